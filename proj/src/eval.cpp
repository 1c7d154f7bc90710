#include "lrel/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "lrel/error.hpp"
#include "lrel/parallel.hpp"
#include "lrel/rng.hpp"

namespace lrel {

FirstTokenFn word_level_first_token() {
  return [](const std::string& s) {
    const std::vector<std::string> words = split_words(s);
    return words.empty() ? std::string() : words.front();
  };
}

FirstTokenFn make_prefix_tokenizer(std::vector<std::string> inventory) {
  std::sort(inventory.begin(), inventory.end(), [](const std::string& a, const std::string& b) {
    return a.size() != b.size() ? a.size() > b.size() : a < b;
  });
  return [inventory](const std::string& s) -> std::string {
    for (const std::string& piece : inventory)
      if (!piece.empty() && s.rfind(piece, 0) == 0) return piece;
    return s.empty() ? std::string() : s.substr(0, 1);
  };
}

SuffixClass classify_suffix(const std::string& prediction, const std::string& subject,
                            const std::string& object, const FirstTokenFn& first_token) {
  if (prediction.empty() || subject.empty() || object.empty())
    throw InputError("classify_suffix: empty argument");
  if (prediction == first_token(object)) return SuffixClass::Correct;
  const bool prefix_of_object =
      prediction.size() <= object.size() && object.compare(0, prediction.size(), prediction) == 0;
  const bool prefix_of_subject =
      prediction.size() <= subject.size() && subject.compare(0, prediction.size(), prediction) == 0;
  if (prefix_of_object && prefix_of_subject && prediction.size() >= 3) return SuffixClass::Stemmed;
  return SuffixClass::Incorrect;
}

int unique_start_tokens(const RelationCategory& category, const FirstTokenFn& first_token) {
  std::set<std::string> starts;
  for (const RelationPair& p : category.pairs) starts.insert(first_token(p.objects.at(0)));
  return static_cast<int>(starts.size());
}

namespace {

// Everything faithfulness needs from one test prompt, extracted once.
struct PairEval {
  std::vector<Vec> s_at;  // subject state per requested layer
  Vec o;                  // final-layer state at the last position
  int model_pred = 0;
  std::vector<int> gold_ids;  // first-token ids of acceptable objects
};

std::vector<PairEval> trace_pairs(const Parameters& params, const Vocab& vocab,
                                  const RelationCategory& category,
                                  std::span<const RelationPair> pairs,
                                  std::span<const RelationPair> icl_pairs,
                                  const std::vector<int>& layers) {
  const int L = params.config.n_layers;
  const int d = params.config.d_model;
  std::vector<PairEval> out(pairs.size());
  par::for_n(static_cast<std::int64_t>(pairs.size()), [&](std::int64_t i) {
    const Prompt prompt = build_prompt(category, vocab, pairs[i].subject, icl_pairs);
    const ActivationTrace tr = forward_trace(params, prompt.tokens);
    PairEval& pe = out[i];
    pe.s_at.reserve(layers.size());
    for (const int layer : layers) {
      const double* s = tr.x_at(layer, prompt.subject_position);
      pe.s_at.emplace_back(s, s + d);
    }
    const double* o = tr.x_at(L, tr.n - 1);
    pe.o.assign(o, o + d);
    pe.model_pred = argmax_smallest(tr.logits);
    for (const std::string& obj : pairs[i].objects) {
      const std::vector<std::string> words = split_words(obj);
      if (!words.empty() && vocab.contains(words.front()))
        pe.gold_ids.push_back(vocab.id_of(words.front()));
    }
  });
  return out;
}

FaithfulnessResult score_operator(const Parameters& params, const Vocab& vocab,
                                  const RelationalOperator& op,
                                  std::span<const RelationPair> pairs,
                                  const std::vector<PairEval>& evals, int layer_index) {
  FaithfulnessResult r;
  r.n_test = static_cast<int>(pairs.size());
  std::vector<int> preds(pairs.size(), 0);
  par::for_n(static_cast<std::int64_t>(pairs.size()), [&](std::int64_t i) {
    const Vec approx = apply_operator(op, evals[i].s_at.at(layer_index));
    preds[i] = decode_argmax(params, approx);
  });
  const FirstTokenFn wl = word_level_first_token();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (preds[i] == evals[i].model_pred) ++r.matched;
    bool gold = false;
    for (const int g : evals[i].gold_ids)
      if (g == preds[i]) gold = true;
    if (gold) ++r.gold_matched;
    switch (classify_suffix(vocab.word_of(preds[i]), pairs[i].subject, pairs[i].objects.at(0), wl)) {
      case SuffixClass::Correct: ++r.n_correct; break;
      case SuffixClass::Stemmed: ++r.n_stemmed; break;
      case SuffixClass::Incorrect: ++r.n_incorrect; break;
    }
  }
  r.faithfulness = static_cast<double>(r.matched) / r.n_test;
  r.gold_accuracy = static_cast<double>(r.gold_matched) / r.n_test;
  return r;
}

void check_disjoint(const RelationalOperator& op, std::span<const RelationPair> test_pairs) {
  std::set<std::string> ids(op.sample_ids.begin(), op.sample_ids.end());
  for (const RelationPair& p : test_pairs)
    if (ids.count(p.subject))
      throw ProtocolError("test pair '" + p.subject + "' was used to estimate the operator");
}

}  // namespace

FaithfulnessResult faithfulness(const Parameters& params, const Vocab& vocab,
                                const RelationCategory& category, const RelationalOperator& op,
                                std::span<const RelationPair> test_pairs,
                                std::span<const RelationPair> icl_pairs) {
  if (test_pairs.empty()) throw EvalError("empty test set for " + category.id);
  check_disjoint(op, test_pairs);
  const std::vector<PairEval> evals =
      trace_pairs(params, vocab, category, test_pairs, icl_pairs, {op.source_layer});
  return score_operator(params, vocab, op, test_pairs, evals, 0);
}

SweepResult sweep(const Parameters& params, const Vocab& vocab, const RelationCategory& category,
                  const SweepOptions& options) {
  const int L = params.config.n_layers;
  if (options.kinds.empty()) throw EvalError("sweep needs at least one operator kind");
  if (options.n_runs < 1) throw EvalError("n_runs must be >= 1");
  if (options.layer_lo < 0 || options.layer_hi > L || options.layer_lo > options.layer_hi)
    throw EvalError("layer range [" + std::to_string(options.layer_lo) + ", " +
                    std::to_string(options.layer_hi) + "] outside 0.." + std::to_string(L));

  std::vector<int> layers;
  for (int l = options.layer_lo; l <= options.layer_hi; ++l) layers.push_back(l);

  SweepResult result;
  struct KindAccum {
    double best_sum = 0.0;
    int n_test_total = 0;
    std::map<int, double> layer_sum;
    int n_correct = 0, n_stemmed = 0, n_incorrect = 0;
  };
  std::map<OperatorKind, KindAccum> accum;

  std::vector<std::uint64_t> run_seeds;
  for (int run = 0; run < options.n_runs; ++run) {
    Rng rs = subrng(options.seed, "run", static_cast<std::uint64_t>(run));
    const std::uint64_t run_seed = rs.next_u64();
    run_seeds.push_back(run_seed);

    auto [train, test_all] = split_pairs(category, options.n_train, run_seed);
    const int n_icl = std::min<int>(8, static_cast<int>(train.size()));
    const std::vector<RelationPair> icl = sample_icl(category, train, n_icl, run_seed);
    const std::vector<RelationPair> test =
        filter_known(params, vocab, category, test_all, icl);
    if (test.empty())
      throw EvalError("no testable pairs for " + category.id + " at run seed " +
                      std::to_string(run_seed));

    const std::vector<PairEval> evals = trace_pairs(params, vocab, category, test, icl, layers);

    std::map<OperatorKind, std::vector<FaithfulnessResult>> by_kind;
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const OperatorSet set =
          estimate_from_model(params, vocab, category, train, layers[li], options.beta);
      for (const OperatorKind kind : options.kinds) {
        const FaithfulnessResult fr = score_operator(params, vocab, select_kind(set, kind), test,
                                                     evals, static_cast<int>(li));
        by_kind[kind].push_back(fr);
        result.rows.push_back({category.id, group_name(category.group), kind_name(kind),
                               layers[li], run_seed, fr.faithfulness, fr.gold_accuracy,
                               fr.n_test});
      }
    }

    for (const OperatorKind kind : options.kinds) {
      const std::vector<FaithfulnessResult>& frs = by_kind[kind];
      std::size_t best = 0;
      for (std::size_t li = 1; li < frs.size(); ++li)
        if (frs[li].faithfulness > frs[best].faithfulness) best = li;
      KindAccum& ka = accum[kind];
      ka.best_sum += frs[best].faithfulness;
      ka.n_test_total += frs[best].n_test;
      ka.n_correct += frs[best].n_correct;
      ka.n_stemmed += frs[best].n_stemmed;
      ka.n_incorrect += frs[best].n_incorrect;
      for (std::size_t li = 0; li < frs.size(); ++li)
        ka.layer_sum[layers[li]] += frs[li].faithfulness;
    }
  }

  for (const OperatorKind kind : options.kinds) {
    const KindAccum& ka = accum[kind];
    EvalReport rep;
    rep.relation_id = category.id;
    rep.operator_kind = kind_name(kind);
    rep.source_layer = "best";
    rep.faithfulness = ka.best_sum / options.n_runs;
    rep.n_test = ka.n_test_total;
    rep.run_seeds = run_seeds;
    for (const auto& [layer, sum] : ka.layer_sum) rep.per_layer[layer] = sum / options.n_runs;
    rep.unique_start_token_count = unique_start_tokens(category, word_level_first_token());
    rep.n_correct = ka.n_correct;
    rep.n_stemmed = ka.n_stemmed;
    rep.n_incorrect = ka.n_incorrect;
    result.reports.emplace(kind, std::move(rep));
  }
  return result;
}

std::string results_csv(std::span<const SweepRow> rows) {
  std::string out = "relation_id,group,kind,layer,run_seed,faithfulness,gold_accuracy,n_test\n";
  char buf[160];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof(buf), ",%d,%llu,%.17g,%.17g,%d\n", r.layer,
                  static_cast<unsigned long long>(r.run_seed), r.faithfulness, r.gold_accuracy,
                  r.n_test);
    out += r.relation_id + "," + r.group + "," + r.kind + buf;
  }
  return out;
}

std::vector<SweepRow> parse_results_csv(const std::string& csv) {
  std::vector<SweepRow> rows;
  std::istringstream in(csv);
  std::string line;
  bool first = true;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (first) {
      first = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string::npos ? comma : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != 8)
      throw FormatError("results CSV line " + std::to_string(line_no) + ": expected 8 fields");
    SweepRow r;
    r.relation_id = fields[0];
    r.group = fields[1];
    r.kind = fields[2];
    r.layer = std::stoi(fields[3]);
    r.run_seed = std::stoull(fields[4]);
    r.faithfulness = std::stod(fields[5]);
    r.gold_accuracy = std::stod(fields[6]);
    r.n_test = std::stoi(fields[7]);
    rows.push_back(std::move(r));
  }
  return rows;
}

nlohmann::json sweep_summary_json(const SweepResult& result) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [kind, rep] : result.reports) {
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& [layer, f] : rep.per_layer) layers[std::to_string(layer)] = f;
    out[kind_name(kind)] = {
        {"relation_id", rep.relation_id},
        {"source_layer", rep.source_layer},
        {"faithfulness", rep.faithfulness},
        {"n_test", rep.n_test},
        {"run_seeds", rep.run_seeds},
        {"per_layer", layers},
        {"unique_start_tokens", rep.unique_start_token_count},
        {"suffix_counts",
         {{"correct", rep.n_correct}, {"stemmed", rep.n_stemmed}, {"incorrect", rep.n_incorrect}}},
    };
  }
  return out;
}

std::string report_table(std::span<const SweepRow> rows) {
  // Per (relation, kind, run): best faithfulness over layers; then mean over
  // runs; presented per relation grouped by relation group.
  struct Key {
    std::string relation, kind;
    std::uint64_t run;
    bool operator<(const Key& o) const {
      if (relation != o.relation) return relation < o.relation;
      if (kind != o.kind) return kind < o.kind;
      return run < o.run;
    }
  };
  std::map<Key, double> best;
  std::map<std::string, std::string> group_of;
  for (const SweepRow& r : rows) {
    const Key k{r.relation_id, r.kind, r.run_seed};
    auto it = best.find(k);
    if (it == best.end() || r.faithfulness > it->second) best[k] = r.faithfulness;
    group_of[r.relation_id] = r.group;
  }

  std::map<std::string, std::map<std::string, std::pair<double, int>>> mean;  // rel -> kind -> (sum, n)
  std::set<std::string> kinds;
  for (const auto& [k, f] : best) {
    auto& cell = mean[k.relation][k.kind];
    cell.first += f;
    cell.second += 1;
    kinds.insert(k.kind);
  }

  std::map<std::string, std::vector<std::string>> by_group;
  for (const auto& [rel, _] : mean) by_group[group_of[rel]].push_back(rel);

  std::ostringstream out;
  char buf[64];
  for (const auto& [group, rels] : by_group) {
    out << "=== " << group << " ===\n";
    out << "relation";
    for (const std::string& k : kinds) out << "," << k;
    out << "\n";
    std::map<std::string, std::pair<double, int>> group_acc;
    for (const std::string& rel : rels) {
      out << rel;
      for (const std::string& k : kinds) {
        auto it = mean[rel].find(k);
        if (it == mean[rel].end()) {
          out << ",";
        } else {
          const double v = it->second.first / it->second.second;
          std::snprintf(buf, sizeof(buf), ",%.4f", v);
          out << buf;
          group_acc[k].first += v;
          group_acc[k].second += 1;
        }
      }
      out << "\n";
    }
    out << "group-mean";
    for (const std::string& k : kinds) {
      auto it = group_acc.find(k);
      if (it == group_acc.end()) {
        out << ",";
      } else {
        std::snprintf(buf, sizeof(buf), ",%.4f", it->second.first / it->second.second);
        out << buf;
      }
    }
    out << "\n\n";
  }
  return out.str();
}

}  // namespace lrel
