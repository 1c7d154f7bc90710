#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrel/lre.hpp"
#include "lrel/model.hpp"
#include "lrel/relations.hpp"

namespace lrel {

// First token of a surface string under some tokenizer. The word-level
// default returns the first whitespace word; the prefix tokenizer mimics
// sub-word behavior for diagnostics over BATS files.
using FirstTokenFn = std::function<std::string(const std::string&)>;

FirstTokenFn word_level_first_token();
FirstTokenFn make_prefix_tokenizer(std::vector<std::string> inventory);

enum class SuffixClass { Correct, Stemmed, Incorrect };

// Correct: prediction equals the object's first token. Stemmed: prediction is
// a shared stem (prefix of both object and subject, length >= 3). Otherwise
// incorrect.
SuffixClass classify_suffix(const std::string& prediction, const std::string& subject,
                            const std::string& object,
                            const FirstTokenFn& first_token = word_level_first_token());

// Distinct first tokens among each pair's first acceptable object.
int unique_start_tokens(const RelationCategory& category, const FirstTokenFn& first_token);

struct FaithfulnessResult {
  int n_test = 0;
  int matched = 0;        // operator argmax == model argmax
  double faithfulness = 0.0;
  int gold_matched = 0;   // operator argmax == gold object first token
  double gold_accuracy = 0.0;
  int n_correct = 0, n_stemmed = 0, n_incorrect = 0;  // suffix classes vs gold
};

// Top-one token match rate between the operator's decoded prediction and the
// model's own prediction on the same prompt.
FaithfulnessResult faithfulness(const Parameters& params, const Vocab& vocab,
                                const RelationCategory& category, const RelationalOperator& op,
                                std::span<const RelationPair> test_pairs,
                                std::span<const RelationPair> icl_pairs);

struct SweepRow {
  std::string relation_id;
  std::string group;
  std::string kind;
  int layer = 0;
  std::uint64_t run_seed = 0;
  double faithfulness = 0.0;
  double gold_accuracy = 0.0;
  int n_test = 0;
};

struct EvalReport {
  std::string relation_id;
  std::string operator_kind;
  std::string source_layer;  // "best" for sweep reports
  double faithfulness = 0.0; // mean over runs of the per-run best layer
  int n_test = 0;            // total test prompts across runs
  std::vector<std::uint64_t> run_seeds;
  std::map<int, double> per_layer;  // layer -> mean faithfulness across runs
  int unique_start_token_count = 0;
  int n_correct = 0, n_stemmed = 0, n_incorrect = 0;  // at per-run best layers
};

struct SweepOptions {
  std::vector<OperatorKind> kinds;
  int layer_lo = 0;
  int layer_hi = 0;
  int n_runs = 4;
  int n_train = 8;
  double beta = 1.0;
  std::uint64_t seed = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::map<OperatorKind, EvalReport> reports;
};

// For each run: resample the train/ICL split, estimate operators at every
// layer in range, evaluate faithfulness per layer; per run take the max over
// layers and report the mean of the maxima plus the full per-layer table.
SweepResult sweep(const Parameters& params, const Vocab& vocab, const RelationCategory& category,
                  const SweepOptions& options);

std::string results_csv(std::span<const SweepRow> rows);
std::vector<SweepRow> parse_results_csv(const std::string& csv);

nlohmann::json sweep_summary_json(const SweepResult& result);

// Pure fold over CSV rows: per (relation group, kind) mean of the per-run
// best-layer faithfulness. Never touches the model.
std::string report_table(std::span<const SweepRow> rows);

}  // namespace lrel
