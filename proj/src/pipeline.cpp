#include "lrel/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>

#include "lrel/checkpoint.hpp"
#include "lrel/error.hpp"
#include "lrel/eval.hpp"
#include "lrel/io.hpp"
#include "lrel/parallel.hpp"
#include "lrel/projection.hpp"
#include "lrel/rng.hpp"

namespace fs = std::filesystem;

namespace lrel {

namespace {

std::string join_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

struct Dataset {
  std::vector<RelationCategory> categories;
  Vocab vocab;
  std::map<std::string, std::vector<std::string>> held_out;
  std::vector<std::string> corpus_lines;
  int lines_per_doc = 0;
  std::vector<std::string> systematic_ids;
};

Dataset load_dataset(const RunConfig& config, bool need_corpus) {
  const std::string dir = config.out_dir;
  const std::string meta_path = join_path(dir, "data_meta.json");
  if (!fs::exists(meta_path))
    throw FormatError("missing " + meta_path + "; run gen-corpus first");

  Dataset ds;
  const nlohmann::json meta = nlohmann::json::parse(read_file(meta_path));
  ds.lines_per_doc = meta.at("lines_per_doc").get<int>();
  ds.systematic_ids = meta.at("systematic").get<std::vector<std::string>>();
  ds.vocab = vocab_from_text(read_file(join_path(dir, "vocab.txt")));
  ds.categories = parse_bats_dir(join_path(dir, "relations"));

  const nlohmann::json held = nlohmann::json::parse(read_file(join_path(dir, "heldout.json")));
  for (auto it = held.begin(); it != held.end(); ++it)
    ds.held_out[it.key()] = it.value().get<std::vector<std::string>>();

  if (need_corpus) {
    std::istringstream in(read_file(join_path(dir, "corpus.txt")));
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) ds.corpus_lines.push_back(line);
    }
  }
  return ds;
}

Parameters load_model(const RunConfig& config) {
  const std::string path = join_path(config.out_dir, "model.lrel");
  if (!fs::exists(path)) throw FormatError("missing " + path + "; run train first");
  return load_checkpoint(path);
}

std::uint64_t run_seed_for(const RunConfig& config, int run) {
  Rng r = subrng(config.seed, "run", static_cast<std::uint64_t>(run));
  return r.next_u64();
}

const RelationCategory& find_category(const Dataset& ds, const std::string& id) {
  for (const RelationCategory& c : ds.categories)
    if (c.id == id) return c;
  throw InputError("unknown relation '" + id + "'");
}

}  // namespace

void cmd_gen_corpus(const RunConfig& config) {
  fs::create_directories(config.out_dir);

  if (config.data.kind == "bats") {
    const std::vector<RelationCategory> cats = parse_bats_dir(config.data.bats_path);
    const FirstTokenFn word = word_level_first_token();
    const FirstTokenFn prefix = make_prefix_tokenizer(
        {"un", "re", "over", "in", "dis", "non", "anti", "mis", "pre", "under"});
    std::string csv = "category,group,n_pairs,unique_start_word,unique_start_prefix\n";
    char buf[64];
    for (const RelationCategory& c : cats) {
      std::snprintf(buf, sizeof(buf), ",%d,%d,%d\n", static_cast<int>(c.pairs.size()),
                    unique_start_tokens(c, word), unique_start_tokens(c, prefix));
      csv += c.id + "," + group_name(c.group) + buf;
    }
    write_file_atomic(join_path(config.out_dir, "bats_stats.csv"), csv);
    std::cout << "wrote " << join_path(config.out_dir, "bats_stats.csv") << " ("
              << cats.size() << " categories)\n";
    return;
  }

  const SyntheticData data = generate_synthetic(config.data.synthetic, config.seed);

  std::string corpus;
  for (const std::string& line : data.corpus_lines) {
    corpus += line;
    corpus += '\n';
  }
  write_file_atomic(join_path(config.out_dir, "corpus.txt"), corpus);
  write_file_atomic(join_path(config.out_dir, "vocab.txt"), vocab_to_text(data.vocab));

  const std::string rel_dir = join_path(config.out_dir, "relations/5_Synthetic");
  fs::create_directories(rel_dir);
  nlohmann::json templates = nlohmann::json::object();
  nlohmann::json heldout = nlohmann::json::object();
  std::vector<std::string> systematic;
  for (const RelationCategory& c : data.categories) {
    write_file_atomic(join_path(rel_dir, c.id + ".txt"), serialize_category(c));
    templates[c.id] = c.template_line;
    heldout[c.id] = data.held_out.at(c.id);
    if (c.id != "syn-color") systematic.push_back(c.id);
  }
  write_file_atomic(join_path(config.out_dir, "relations/templates.json"), templates.dump(2));
  write_file_atomic(join_path(config.out_dir, "heldout.json"), heldout.dump(2));

  const nlohmann::json meta{{"kind", "synthetic"},
                            {"vocab_size", data.vocab.size()},
                            {"lines_per_doc", data.lines_per_doc},
                            {"n_docs", config.data.synthetic.n_docs},
                            {"systematic", systematic},
                            {"arbitrary", {"syn-color"}}};
  write_file_atomic(join_path(config.out_dir, "data_meta.json"), meta.dump(2));
  std::cout << "wrote corpus (" << data.corpus_lines.size() << " lines), vocab ("
            << data.vocab.size() << " words) under " << config.out_dir << "\n";
}

void cmd_train(const RunConfig& config) {
  const Dataset ds = load_dataset(config, /*need_corpus=*/true);
  const std::vector<std::vector<int>> docs =
      docs_from_corpus(ds.corpus_lines, ds.vocab, ds.lines_per_doc);
  if (docs.empty()) throw TrainError("corpus produced no documents");

  std::size_t max_len = 0;
  for (const auto& doc : docs) max_len = std::max(max_len, doc.size());

  ModelConfig mc = config.model;
  mc.vocab_size = ds.vocab.size();
  if (mc.max_seq_len < static_cast<int>(max_len))
    throw ConfigError("max_seq_len " + std::to_string(mc.max_seq_len) +
                      " below longest document " + std::to_string(max_len));
  Parameters params = build_model(mc);

  TrainResult result = train(std::move(params), docs, config.train);
  save_checkpoint(join_path(config.out_dir, "model.lrel"), result.params);
  write_file_atomic(join_path(config.out_dir, "loss_curve.csv"), loss_curve_csv(result.curve));

  // Held-out completion accuracy per relation: subjects never seen in the
  // relation's query frame, prompted with ICL examples from the train pool.
  nlohmann::json accuracy = nlohmann::json::object();
  for (const RelationCategory& cat : ds.categories) {
    const auto held_it = ds.held_out.find(cat.id);
    if (held_it == ds.held_out.end() || held_it->second.empty()) continue;
    const std::set<std::string> held(held_it->second.begin(), held_it->second.end());
    std::vector<RelationPair> held_pairs, pool;
    for (const RelationPair& p : cat.pairs)
      (held.count(p.subject) ? held_pairs : pool).push_back(p);
    const RelationCategory pool_cat{cat.id, cat.group, cat.template_line, pool};
    const std::vector<RelationPair> icl =
        sample_icl(pool_cat, pool, std::min<int>(8, static_cast<int>(pool.size())), config.seed);
    accuracy[cat.id] = lm_accuracy(result.params, ds.vocab, cat, held_pairs, icl);
  }

  nlohmann::json report{{"final_loss", result.curve.empty() ? 0.0 : result.curve.back().loss},
                        {"final_batch_accuracy",
                         result.curve.empty() ? 0.0 : result.curve.back().accuracy},
                        {"held_out_accuracy", accuracy}};
  write_file_atomic(join_path(config.out_dir, "train_report.json"), report.dump(2));
  std::cout << "trained " << config.train.steps << " steps; held-out accuracy: "
            << accuracy.dump() << "\n";
}

void cmd_estimate(const RunConfig& config) {
  const Dataset ds = load_dataset(config, /*need_corpus=*/false);
  const Parameters params = load_model(config);
  const std::uint64_t run_seed = run_seed_for(config, 0);

  const std::string op_dir = join_path(config.out_dir, "operators");
  fs::create_directories(op_dir);

  int written = 0;
  for (const RelationCategory& cat : ds.categories) {
    auto [train_pairs, test_pairs] = split_pairs(cat, config.lre.n_samples, run_seed);
    (void)test_pairs;
    for (const int layer : config.lre.layers) {
      if (layer < 0 || layer > params.config.n_layers)
        throw ConfigError("lre.layers entry " + std::to_string(layer) + " outside 0.." +
                          std::to_string(params.config.n_layers));
      const OperatorSet set =
          estimate_from_model(params, ds.vocab, cat, train_pairs, layer, config.lre.beta);
      for (const OperatorKind kind : config.lre.kinds) {
        const std::string name = cat.id + "__" + kind_name(kind) + "__L" + std::to_string(layer) +
                                 ".lrel";
        save_operator(join_path(op_dir, name), select_kind(set, kind));
        ++written;
      }
    }
  }
  std::cout << "wrote " << written << " operator files under " << op_dir << "\n";
}

void cmd_sweep(const RunConfig& config) {
  const Dataset ds = load_dataset(config, /*need_corpus=*/false);
  const Parameters params = load_model(config);

  SweepOptions options;
  options.kinds = config.lre.kinds;
  options.layer_lo = config.eval.layer_lo;
  options.layer_hi = std::min(config.eval.layer_hi, params.config.n_layers);
  options.n_runs = config.eval.n_runs;
  options.n_train = config.lre.n_samples;
  options.beta = config.lre.beta;
  options.seed = config.seed;

  std::vector<SweepRow> all_rows;
  nlohmann::json summary = nlohmann::json::object();
  for (const RelationCategory& cat : ds.categories) {
    const SweepResult result = sweep(params, ds.vocab, cat, options);
    all_rows.insert(all_rows.end(), result.rows.begin(), result.rows.end());
    summary[cat.id] = sweep_summary_json(result);
    std::cout << cat.id << ":";
    for (const auto& [kind, rep] : result.reports) {
      char buf[64];
      std::snprintf(buf, sizeof(buf), " %s=%.3f", kind_name(kind).c_str(), rep.faithfulness);
      std::cout << buf;
    }
    std::cout << "\n";
  }
  write_file_atomic(join_path(config.out_dir, "results.csv"), results_csv(all_rows));
  write_file_atomic(join_path(config.out_dir, "summary.json"), summary.dump(2));
  std::cout << "wrote " << join_path(config.out_dir, "results.csv") << " (" << all_rows.size()
            << " rows)\n";
}

void cmd_project(const RunConfig& config) {
  const Dataset ds = load_dataset(config, /*need_corpus=*/false);
  const Parameters params = load_model(config);

  const std::string rel_id = config.projection.relation.empty() && !ds.systematic_ids.empty()
                                 ? ds.systematic_ids.front()
                                 : config.projection.relation;
  const RelationCategory& cat = find_category(ds, rel_id);
  const int layer =
      config.projection.layer >= 0 ? config.projection.layer : params.config.n_layers / 2;

  const std::uint64_t run_seed = run_seed_for(config, 0);
  auto [train_pairs, test_all] = split_pairs(cat, config.lre.n_samples, run_seed);
  const std::vector<RelationPair> icl =
      sample_icl(cat, train_pairs, std::min<int>(8, static_cast<int>(train_pairs.size())), run_seed);
  const std::vector<RelationPair> test = filter_known(params, ds.vocab, cat, test_all, icl);
  if (test.empty()) throw EvalError("no testable pairs for projection on " + cat.id);

  const OperatorSet set =
      estimate_from_model(params, ds.vocab, cat, train_pairs, layer, config.lre.beta);

  const std::string proj_dir = join_path(config.out_dir, "projection");
  fs::create_directories(proj_dir);

  // Distance/faithfulness table over betas, plus argmin stability across
  // basis seeds.
  const std::vector<BetaSweepPoint> points =
      beta_sweep(params, ds.vocab, cat, set.affine, test, icl, config.projection.betas,
                 subrng(config.seed, "basis", 0).next_u64());
  {
    std::string csv =
        "beta,mean_projected_distance,centroid_projected_distance,mean_full_distance,"
        "faithfulness\n";
    char buf[192];
    for (const BetaSweepPoint& p : points) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g\n", p.beta,
                    p.mean_projected_distance, p.centroid_projected_distance,
                    p.mean_full_distance, p.faithfulness);
      csv += buf;
    }
    write_file_atomic(join_path(proj_dir, "beta_sweep_" + cat.id + ".csv"), csv);
  }
  {
    nlohmann::json argmins = nlohmann::json::array();
    for (int s = 0; s < config.projection.n_seeds; ++s) {
      const std::vector<BetaSweepPoint> pts =
          beta_sweep(params, ds.vocab, cat, set.affine, test, icl, config.projection.betas,
                     subrng(config.seed, "basis", static_cast<std::uint64_t>(s)).next_u64());
      std::size_t best = 0;
      for (std::size_t i = 1; i < pts.size(); ++i)
        if (pts[i].mean_projected_distance < pts[best].mean_projected_distance) best = i;
      argmins.push_back(pts[best].beta);
    }
    nlohmann::json j{{"relation", cat.id},
                     {"layer", layer},
                     {"argmin_beta_per_seed", argmins},
                     {"bias_concept_cosine", bias_concept_cosine(set.affine, set.translation)}};
    write_file_atomic(join_path(proj_dir, "projection_report.json"), j.dump(2));
  }

  // Scatter per beta: s, beta*W s, beta*W s + b, o in the {b, random} plane.
  const ProjectionBasis basis = gs_basis(set.affine.b, subrng(config.seed, "basis", 0).next_u64());
  const int d = params.config.d_model;
  struct Row {
    Vec s, ws, o;
  };
  std::vector<Row> rows(test.size());
  par::for_n(static_cast<std::int64_t>(test.size()), [&](std::int64_t i) {
    const Prompt prompt = build_prompt(cat, ds.vocab, test[i].subject, icl);
    const ActivationTrace tr = forward_trace(params, prompt.tokens);
    Row& r = rows[i];
    const double* s = tr.x_at(layer, prompt.subject_position);
    r.s.assign(s, s + d);
    r.ws.resize(d);
    for (int c = 0; c < d; ++c) r.ws[c] = dot(set.affine.W.row(c), s, d);
    const double* o = tr.x_at(params.config.n_layers, tr.n - 1);
    r.o.assign(o, o + d);
  });

  for (const double beta : config.projection.betas) {
    ScatterGroup gs{"s", "gray", {}}, gws{"bWs", "magenta", {}}, gwsb{"bWs+b", "red", {}},
        go{"o", "blue", {}};
    std::string csv = "label,x,y\n";
    char buf[128];
    Vec tmp(d);
    auto add_point = [&](ScatterGroup& g, const Vec& v) {
      const Point2 p{dot(v.data(), basis.u1.data(), d), dot(v.data(), basis.u2.data(), d)};
      g.points.push_back(p);
      std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g\n", g.label.c_str(), p[0], p[1]);
      csv += buf;
    };
    for (const Row& r : rows) {
      add_point(gs, r.s);
      for (int c = 0; c < d; ++c) tmp[c] = beta * r.ws[c];
      add_point(gws, tmp);
      for (int c = 0; c < d; ++c) tmp[c] = beta * r.ws[c] + set.affine.b[c];
      add_point(gwsb, tmp);
      add_point(go, r.o);
    }
    char bname[64];
    std::snprintf(bname, sizeof(bname), "beta%g", beta);
    const std::string title = cat.id + " layer " + std::to_string(layer) + " " + bname;
    write_file_atomic(join_path(proj_dir, "scatter_" + cat.id + "_" + bname + ".svg"),
                      scatter_svg({gs, gws, gwsb, go}, title));
    write_file_atomic(join_path(proj_dir, "points_" + cat.id + "_" + bname + ".csv"), csv);
  }
  std::cout << "wrote projection artifacts under " << proj_dir << "\n";
}

void cmd_report(const RunConfig& config) {
  const std::string results_path = join_path(config.out_dir, "results.csv");
  if (!fs::exists(results_path))
    throw FormatError("missing " + results_path + "; run sweep first");
  const std::vector<SweepRow> rows = parse_results_csv(read_file(results_path));
  const std::string table = report_table(rows);
  write_file_atomic(join_path(config.out_dir, "report.txt"), table);
  std::cout << table;
}

}  // namespace lrel
