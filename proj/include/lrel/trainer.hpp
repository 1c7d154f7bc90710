#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lrel/model.hpp"
#include "lrel/relations.hpp"

namespace lrel {

struct TrainConfig {
  double learning_rate = 1e-3;
  int steps = 1000;
  int batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  int eval_every = 50;

  void validate() const;
};

struct TrainPoint {
  int step = 0;
  double loss = 0.0;
  double accuracy = 0.0;  // batch next-token top-1
};

struct TrainResult {
  Parameters params;
  std::vector<TrainPoint> curve;
};

// Adam on mean next-token cross-entropy over sampled docs. Deterministic
// under config.seed: data order, updates, and the returned parameter bytes.
TrainResult train(Parameters params, const std::vector<std::vector<int>>& docs,
                  const TrainConfig& config);

// Fraction of prompts whose top-1 completion matches the first token of any
// acceptable object.
double lm_accuracy(const Parameters& params, const Vocab& vocab, const RelationCategory& category,
                   std::span<const RelationPair> pairs, std::span<const RelationPair> icl_pairs);

// Groups corpus lines into fixed-size documents with <nl> separators.
std::vector<std::vector<int>> docs_from_corpus(const std::vector<std::string>& lines,
                                               const Vocab& vocab, int lines_per_doc);

std::string loss_curve_csv(const std::vector<TrainPoint>& curve);

}  // namespace lrel
