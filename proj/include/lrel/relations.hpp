#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lrel/model.hpp"

namespace lrel {

struct RelationPair {
  std::string subject;
  std::vector<std::string> objects;  // acceptable alternatives, non-empty
};

enum class RelationGroup { Inflectional, Derivational, Encyclopedic, Lexicographic, Synthetic };

std::string group_name(RelationGroup g);

struct RelationCategory {
  std::string id;
  RelationGroup group = RelationGroup::Synthetic;
  // One line per demonstration with {subject} and {object} placeholders; the
  // query line is this template truncated right after the subject.
  std::string template_line;
  std::vector<RelationPair> pairs;
};

// Word-level tokenizer: every surface form is a single token. "<nl>" is the
// explicit line separator inside prompts and training documents.
struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kNewline = 2;

  std::vector<std::string> words;
  std::unordered_map<std::string, int> index;

  static Vocab with_specials();
  int add(const std::string& word);  // idempotent
  bool contains(const std::string& word) const { return index.count(word) > 0; }
  int id_of(const std::string& word) const;  // throws VocabError naming the word
  const std::string& word_of(int id) const;
  int size() const { return static_cast<int>(words.size()); }
};

std::vector<std::string> split_words(const std::string& line);

std::string vocab_to_text(const Vocab& vocab);       // one word per line, id order
Vocab vocab_from_text(const std::string& text);

// ---- BATS-format ingestion ----
// Directory of group folders (1_Inflectional_morphology, ...), each holding
// category files with lines "subject<TAB>object1/object2/...". An optional
// templates.json at the root maps category id -> template line.
std::vector<RelationCategory> parse_bats_dir(const std::string& path);
RelationCategory parse_bats_file(const std::string& path, const std::string& id,
                                 RelationGroup group);
std::string serialize_category(const RelationCategory& category);

// ---- Synthetic relation corpora ----
enum class SuffixScheme { Fusional, Agglutinative };

struct SyntheticSpec {
  int n_stems = 200;
  SuffixScheme scheme = SuffixScheme::Fusional;
  int arbitrary_targets = 8;       // lookup targets for the arbitrary relation
  double held_out_fraction = 0.2;  // stems never shown in their query frame
  double arbitrary_share = 0.5;    // fraction of documents drawn for the arbitrary relation
  int n_docs = 3000;
  int lines_per_doc = 9;
  int vocab_budget = 4096;

  void validate() const;
};

struct SyntheticData {
  std::vector<std::string> corpus_lines;  // doc-major, lines_per_doc per doc
  std::vector<RelationCategory> categories;
  Vocab vocab;
  // Relation id -> subjects that never appear in that relation's query frame.
  std::map<std::string, std::vector<std::string>> held_out;
  int lines_per_doc = 0;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// ---- Prompts, splits, filtering ----
struct Prompt {
  std::vector<int> tokens;
  int subject_position = 0;  // index of the query subject's last token
};

Prompt build_prompt(const RelationCategory& category, const Vocab& vocab,
                    const std::string& query_subject, std::span<const RelationPair> icl_pairs);

std::pair<std::vector<RelationPair>, std::vector<RelationPair>> split_pairs(
    const RelationCategory& category, int n_train, std::uint64_t seed);

// Without replacement, fixed for a given (category, seed).
std::vector<RelationPair> sample_icl(const RelationCategory& category,
                                     const std::vector<RelationPair>& train, int n_icl,
                                     std::uint64_t seed);

// Keeps pairs whose model top-1 next token matches the first token of any
// acceptable object. Pairs with no in-vocabulary object are dropped with a
// warning.
std::vector<RelationPair> filter_known(const Parameters& params, const Vocab& vocab,
                                       const RelationCategory& category,
                                       std::span<const RelationPair> pairs,
                                       std::span<const RelationPair> icl_pairs,
                                       std::vector<std::string>* warnings = nullptr);

}  // namespace lrel
