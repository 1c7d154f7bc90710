#include "lrel/relations.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lrel/error.hpp"
#include "lrel/io.hpp"
#include "lrel/parallel.hpp"
#include "lrel/rng.hpp"

namespace fs = std::filesystem;

namespace lrel {

std::string group_name(RelationGroup g) {
  switch (g) {
    case RelationGroup::Inflectional: return "Inflectional";
    case RelationGroup::Derivational: return "Derivational";
    case RelationGroup::Encyclopedic: return "Encyclopedic";
    case RelationGroup::Lexicographic: return "Lexicographic";
    case RelationGroup::Synthetic: return "Synthetic";
  }
  return "Unknown";
}

Vocab Vocab::with_specials() {
  Vocab v;
  v.add("<pad>");
  v.add("<unk>");
  v.add("<nl>");
  return v;
}

int Vocab::add(const std::string& word) {
  auto it = index.find(word);
  if (it != index.end()) return it->second;
  const int id = static_cast<int>(words.size());
  words.push_back(word);
  index.emplace(word, id);
  return id;
}

int Vocab::id_of(const std::string& word) const {
  auto it = index.find(word);
  if (it == index.end()) throw VocabError("word not in vocabulary: '" + word + "'");
  return it->second;
}

const std::string& Vocab::word_of(int id) const {
  if (id < 0 || id >= size()) throw VocabError("token id out of range: " + std::to_string(id));
  return words[id];
}

std::vector<std::string> split_words(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

std::string vocab_to_text(const Vocab& vocab) {
  std::string out;
  for (const std::string& w : vocab.words) {
    out += w;
    out += '\n';
  }
  return out;
}

Vocab vocab_from_text(const std::string& text) {
  Vocab v;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (v.index.count(line)) throw VocabError("duplicate vocabulary word '" + line + "'");
    v.add(line);
  }
  if (v.size() < 3 || v.words[0] != "<pad>" || v.words[1] != "<unk>" || v.words[2] != "<nl>")
    throw VocabError("vocabulary file must start with <pad>, <unk>, <nl>");
  return v;
}

// ---------------------------------------------------------------------------
// BATS ingestion
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

RelationGroup group_from_dir(const std::string& name) {
  if (name.rfind("1_", 0) == 0 || name.find("Inflectional") != std::string::npos)
    return RelationGroup::Inflectional;
  if (name.rfind("2_", 0) == 0 || name.find("Derivational") != std::string::npos)
    return RelationGroup::Derivational;
  if (name.rfind("3_", 0) == 0 || name.find("Encyclopedic") != std::string::npos)
    return RelationGroup::Encyclopedic;
  if (name.rfind("4_", 0) == 0 || name.find("Lexicographic") != std::string::npos)
    return RelationGroup::Lexicographic;
  return RelationGroup::Synthetic;
}

}  // namespace

RelationCategory parse_bats_file(const std::string& path, const std::string& id,
                                 RelationGroup group) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path);

  RelationCategory cat;
  cat.id = id;
  cat.group = group;

  std::set<std::string> seen_subjects;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = path + ":" + std::to_string(line_no);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(where + ": missing tab separator");
    const std::string subject = trim(line.substr(0, tab));
    const std::string object_field = trim(line.substr(tab + 1));
    if (subject.empty()) throw ParseError(where + ": empty subject");
    if (object_field.empty()) throw ParseError(where + ": empty object list");
    if (!seen_subjects.insert(subject).second)
      throw ParseError(where + ": duplicate subject '" + subject + "'");

    RelationPair pair;
    pair.subject = subject;
    std::size_t start = 0;
    std::set<std::string> seen_objects;
    while (start <= object_field.size()) {
      const std::size_t slash = object_field.find('/', start);
      const std::string obj = trim(slash == std::string::npos
                                       ? object_field.substr(start)
                                       : object_field.substr(start, slash - start));
      if (obj.empty()) throw ParseError(where + ": empty object alternative");
      if (!seen_objects.insert(obj).second)
        throw ParseError(where + ": duplicate object '" + obj + "'");
      pair.objects.push_back(obj);
      if (slash == std::string::npos) break;
      start = slash + 1;
    }
    cat.pairs.push_back(std::move(pair));
  }
  if (cat.pairs.empty()) throw ParseError(path + ": no pairs (empty file)");
  return cat;
}

std::vector<RelationCategory> parse_bats_dir(const std::string& path) {
  if (!fs::is_directory(path)) throw ParseError("not a directory: " + path);

  std::map<std::string, std::string> templates;
  const fs::path tpath = fs::path(path) / "templates.json";
  if (fs::exists(tpath)) {
    try {
      const nlohmann::json j = nlohmann::json::parse(read_file(tpath.string()));
      for (auto it = j.begin(); it != j.end(); ++it)
        templates[it.key()] = it.value().get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("invalid templates.json: " + std::string(e.what()));
    }
  }

  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(path))
    if (entry.is_directory()) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());

  std::vector<RelationCategory> out;
  for (const fs::path& dir : dirs) {
    const RelationGroup group = group_from_dir(dir.filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".txt")
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& file : files) {
      RelationCategory cat = parse_bats_file(file.string(), file.stem().string(), group);
      auto it = templates.find(cat.id);
      if (it != templates.end()) cat.template_line = it->second;
      out.push_back(std::move(cat));
    }
  }
  if (out.empty()) throw ParseError("no category files under " + path);
  return out;
}

std::string serialize_category(const RelationCategory& category) {
  std::string out;
  for (const RelationPair& p : category.pairs) {
    out += p.subject;
    out += '\t';
    for (std::size_t i = 0; i < p.objects.size(); ++i) {
      if (i) out += '/';
      out += p.objects[i];
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
  if (n_stems < 10) throw ConfigError("n_stems must be >= 10, got " + std::to_string(n_stems));
  if (arbitrary_targets < 1) throw ConfigError("arbitrary_targets must be >= 1");
  if (held_out_fraction < 0.0 || held_out_fraction > 0.9)
    throw ConfigError("held_out_fraction must be in [0, 0.9]");
  if (arbitrary_share <= 0.0 || arbitrary_share >= 1.0)
    throw ConfigError("arbitrary_share must be in (0, 1)");
  if (n_docs < 1) throw ConfigError("n_docs must be >= 1");
  if (lines_per_doc < 1) throw ConfigError("lines_per_doc must be >= 1");
  if (vocab_budget < 16) throw ConfigError("vocab_budget must be >= 16");
  // Two surface forms per stem plus targets, frames, and specials.
  const int needed = 2 * n_stems + arbitrary_targets + 8;
  if (needed > vocab_budget)
    throw ConfigError("spec needs about " + std::to_string(needed) +
                      " vocabulary entries, budget is " + std::to_string(vocab_budget));
}

namespace {

const char* kConsonants[] = {"b", "d", "f", "g", "k", "l", "m",
                             "n", "p", "r", "s", "t", "v", "z"};
const char* kVowels[] = {"a", "e", "i", "o", "u"};

std::string make_word(Rng& rng, int n_syllables) {
  std::string w;
  for (int s = 0; s < n_syllables; ++s) {
    w += kConsonants[rng.below(14)];
    w += kVowels[rng.below(5)];
  }
  return w;
}

// Draws pairs from a pool in near-uniform rotation; reshuffles each pass.
struct RotatingSampler {
  std::vector<int> order;
  std::size_t pos = 0;
  Rng rng;

  RotatingSampler(std::vector<int> indices, Rng r) : order(std::move(indices)), rng(r) {
    rng.shuffle(order);
  }
  int next() {
    if (pos >= order.size()) {
      rng.shuffle(order);
      pos = 0;
    }
    return order[pos++];
  }
};

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();

  const std::string query_frame = "ask";
  const std::string echo_frame = "see";
  const bool fusional = spec.scheme == SuffixScheme::Fusional;
  const std::string rel_word = fusional ? "plural" : "inflect";
  const std::string suffix = fusional ? "ka" : "kaan";  // agglutinative stacks two slots
  const std::string sys_id = fusional ? "syn-plural" : "syn-inflect";
  const std::string arb_id = "syn-color";

  std::set<std::string> used = {"<pad>", "<unk>", "<nl>", query_frame, echo_frame,
                                rel_word, "color"};

  std::vector<std::string> stems, forms;
  Rng srng = subrng(seed, "stems");
  while (static_cast<int>(stems.size()) < spec.n_stems) {
    for (int syll = 2; syll <= 5; ++syll) {
      const std::string w = make_word(srng, syll);
      const std::string f = w + suffix;
      if (used.count(w) || used.count(f) || w == f) continue;
      used.insert(w);
      used.insert(f);
      stems.push_back(w);
      forms.push_back(f);
      break;
    }
  }

  std::vector<std::string> targets;
  Rng trng = subrng(seed, "targets");
  while (static_cast<int>(targets.size()) < spec.arbitrary_targets) {
    for (int syll = 2; syll <= 5; ++syll) {
      const std::string w = make_word(trng, syll);
      if (used.count(w)) continue;
      used.insert(w);
      targets.push_back(w);
      break;
    }
  }

  // Modifier words for the arbitrary relation's compound subjects. The
  // lookup key is the (modifier, stem) pair, so the target is never a
  // function of the subject's last token alone.
  constexpr int kModifiers = 5;
  std::vector<std::string> modifiers;
  Rng mrng = subrng(seed, "modifiers");
  while (static_cast<int>(modifiers.size()) < kModifiers) {
    for (int syll = 2; syll <= 5; ++syll) {
      const std::string w = make_word(mrng, syll);
      if (used.count(w)) continue;
      used.insert(w);
      modifiers.push_back(w);
      break;
    }
  }

  Rng lrng = subrng(seed, "lookup");
  std::vector<int> color_of(spec.n_stems);
  for (int i = 0; i < spec.n_stems; ++i)
    color_of[i] = static_cast<int>(lrng.below(static_cast<std::uint64_t>(spec.arbitrary_targets)));

  SyntheticData data;
  data.lines_per_doc = spec.lines_per_doc;

  RelationCategory sys;
  sys.id = sys_id;
  sys.group = RelationGroup::Synthetic;
  sys.template_line = query_frame + " " + rel_word + " {subject} {object}";
  RelationCategory arb;
  arb.id = arb_id;
  arb.group = RelationGroup::Synthetic;
  arb.template_line = query_frame + " color {subject} {object}";
  const int n_base = (spec.n_stems + kModifiers - 1) / kModifiers;
  for (int i = 0; i < spec.n_stems; ++i) {
    sys.pairs.push_back({stems[i], {forms[i]}});
    const int b = i % n_base;
    const int m = i / n_base;
    arb.pairs.push_back({modifiers[m] + " " + stems[b], {targets[color_of[i]]}});
  }
  data.categories = {sys, arb};

  data.vocab = Vocab::with_specials();
  data.vocab.add(query_frame);
  data.vocab.add(echo_frame);
  data.vocab.add(rel_word);
  data.vocab.add("color");
  for (const std::string& t : targets) data.vocab.add(t);
  for (const std::string& m : modifiers) data.vocab.add(m);
  for (const std::string& s : stems) data.vocab.add(s);
  for (const std::string& f : forms) data.vocab.add(f);
  if (data.vocab.size() > spec.vocab_budget)
    throw ConfigError("vocabulary size " + std::to_string(data.vocab.size()) +
                      " exceeds budget " + std::to_string(spec.vocab_budget));

  // Held-out subjects per relation: excluded from that relation's query frame
  // but still paired with their object in echo frames.
  const int n_held = static_cast<int>(spec.held_out_fraction * spec.n_stems);
  std::vector<std::vector<int>> held_mask(data.categories.size(),
                                          std::vector<int>(spec.n_stems, 0));
  for (std::size_t c = 0; c < data.categories.size(); ++c) {
    std::vector<int> idx(spec.n_stems);
    for (int i = 0; i < spec.n_stems; ++i) idx[i] = i;
    Rng hrng = subrng(seed, "heldout:" + data.categories[c].id);
    hrng.shuffle(idx);
    std::vector<std::string> held;
    for (int i = 0; i < n_held; ++i) {
      held_mask[c][idx[i]] = 1;
      held.push_back(data.categories[c].pairs[idx[i]].subject);
    }
    std::sort(held.begin(), held.end());
    data.held_out[data.categories[c].id] = std::move(held);
  }

  // Corpus documents: lines_per_doc frame lines per doc, alternating relation,
  // query/echo frames mixed evenly. Query pools exclude held-out stems.
  std::vector<RotatingSampler> query_pool, echo_pool;
  for (std::size_t c = 0; c < data.categories.size(); ++c) {
    std::vector<int> train_idx, all_idx;
    for (int i = 0; i < spec.n_stems; ++i) {
      all_idx.push_back(i);
      if (!held_mask[c][i]) train_idx.push_back(i);
    }
    query_pool.emplace_back(train_idx,
                            subrng(seed, "pool-query:" + data.categories[c].id));
    echo_pool.emplace_back(all_idx, subrng(seed, "pool-echo:" + data.categories[c].id));
  }

  Rng crng = subrng(seed, "corpus");
  data.corpus_lines.reserve(static_cast<std::size_t>(spec.n_docs) * spec.lines_per_doc);
  for (int doc = 0; doc < spec.n_docs; ++doc) {
    const std::size_t c = crng.uniform() < spec.arbitrary_share ? 1 : 0;
    const RelationCategory& cat = data.categories[c];
    const bool query = crng.uniform() < 0.5;
    RotatingSampler& pool = query ? query_pool[c] : echo_pool[c];
    const std::string& frame = query ? query_frame : echo_frame;
    const std::string& rword = (c == 0) ? rel_word : "color";
    for (int ln = 0; ln < spec.lines_per_doc; ++ln) {
      const int i = pool.next();
      data.corpus_lines.push_back(frame + " " + rword + " " + cat.pairs[i].subject + " " +
                                  cat.pairs[i].objects[0]);
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// Prompts, splits, filtering
// ---------------------------------------------------------------------------

Prompt build_prompt(const RelationCategory& category, const Vocab& vocab,
                    const std::string& query_subject, std::span<const RelationPair> icl_pairs) {
  const std::string& tpl = category.template_line;
  if (tpl.empty()) throw InputError("category '" + category.id + "' has no prompt template");

  const std::size_t spos = tpl.find("{subject}");
  if (spos == std::string::npos || tpl.find("{subject}", spos + 1) != std::string::npos)
    throw InputError("template must contain exactly one {subject}: '" + tpl + "'");
  const std::size_t opos = tpl.find("{object}");
  if (!icl_pairs.empty() && opos == std::string::npos)
    throw InputError("template lacks {object}, cannot render demonstrations: '" + tpl + "'");

  for (const RelationPair& p : icl_pairs)
    if (p.subject == query_subject)
      throw InputError("query subject '" + query_subject + "' appears among ICL examples");

  auto render_full = [&](const RelationPair& p) {
    std::string line = tpl;
    line.replace(line.find("{subject}"), 9, p.subject);
    const std::size_t op = line.find("{object}");
    line.replace(op, 8, p.objects.at(0));
    return line;
  };

  std::vector<std::string> lines;
  for (const RelationPair& p : icl_pairs) lines.push_back(render_full(p));
  // Query line: template truncated right after the subject.
  lines.push_back(tpl.substr(0, spos) + query_subject);

  Prompt prompt;
  for (std::size_t li = 0; li < lines.size(); ++li) {
    if (li) prompt.tokens.push_back(Vocab::kNewline);
    for (const std::string& w : split_words(lines[li])) prompt.tokens.push_back(vocab.id_of(w));
  }
  prompt.subject_position = static_cast<int>(prompt.tokens.size()) - 1;
  return prompt;
}

std::pair<std::vector<RelationPair>, std::vector<RelationPair>> split_pairs(
    const RelationCategory& category, int n_train, std::uint64_t seed) {
  const int n = static_cast<int>(category.pairs.size());
  if (n_train < 1) throw SplitError("n_train must be >= 1");
  if (n <= n_train)
    throw SplitError("category '" + category.id + "' has " + std::to_string(n) +
                     " pairs, need more than n_train = " + std::to_string(n_train));

  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng rng = subrng(seed, "split:" + category.id);
  rng.shuffle(idx);

  std::vector<RelationPair> train, test;
  for (int i = 0; i < n_train; ++i) train.push_back(category.pairs[idx[i]]);
  std::vector<int> rest(idx.begin() + n_train, idx.end());
  std::sort(rest.begin(), rest.end());
  for (const int i : rest) test.push_back(category.pairs[i]);
  return {std::move(train), std::move(test)};
}

std::vector<RelationPair> sample_icl(const RelationCategory& category,
                                     const std::vector<RelationPair>& train, int n_icl,
                                     std::uint64_t seed) {
  if (n_icl < 1 || n_icl > static_cast<int>(train.size()))
    throw SplitError("cannot sample " + std::to_string(n_icl) + " ICL examples from " +
                     std::to_string(train.size()) + " train pairs");
  std::vector<int> idx(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) idx[i] = static_cast<int>(i);
  Rng rng = subrng(seed, "icl:" + category.id);
  rng.shuffle(idx);
  std::vector<RelationPair> out;
  for (int i = 0; i < n_icl; ++i) out.push_back(train[idx[i]]);
  return out;
}

std::vector<RelationPair> filter_known(const Parameters& params, const Vocab& vocab,
                                       const RelationCategory& category,
                                       std::span<const RelationPair> pairs,
                                       std::span<const RelationPair> icl_pairs,
                                       std::vector<std::string>* warnings) {
  // First token of each acceptable object under the word-level vocabulary.
  std::vector<std::vector<int>> candidates(pairs.size());
  std::vector<char> usable(pairs.size(), 0);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (const std::string& obj : pairs[i].objects) {
      const std::vector<std::string> words = split_words(obj);
      if (!words.empty() && vocab.contains(words.front()))
        candidates[i].push_back(vocab.id_of(words.front()));
    }
    if (candidates[i].empty()) {
      if (warnings)
        warnings->push_back("excluded '" + pairs[i].subject +
                            "': no in-vocabulary object (category " + category.id + ")");
    } else {
      usable[i] = 1;
    }
  }

  std::vector<char> keep(pairs.size(), 0);
  par::for_n(static_cast<std::int64_t>(pairs.size()), [&](std::int64_t i) {
    if (!usable[i]) return;
    const Prompt prompt = build_prompt(category, vocab, pairs[i].subject, icl_pairs);
    const int predicted = predict_next(params, prompt.tokens);
    for (const int cand : candidates[i])
      if (cand == predicted) {
        keep[i] = 1;
        break;
      }
  });

  std::vector<RelationPair> out;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (keep[i]) out.push_back(pairs[i]);
  return out;
}

}  // namespace lrel
