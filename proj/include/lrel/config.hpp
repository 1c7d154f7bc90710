#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrel/lre.hpp"
#include "lrel/model.hpp"
#include "lrel/relations.hpp"
#include "lrel/trainer.hpp"

namespace lrel {

struct DataConfig {
  std::string kind = "synthetic";  // "synthetic" or "bats"
  std::string bats_path;
  SyntheticSpec synthetic;
};

struct LreConfig {
  double beta = 3.0;
  int n_samples = 8;  // train-split size; estimation samples per relation
  std::vector<OperatorKind> kinds = {OperatorKind::Affine, OperatorKind::Linear,
                                     OperatorKind::Bias, OperatorKind::Translation};
  std::vector<int> layers = {1, 2};  // layers written by the estimate subcommand
};

struct EvalConfig {
  int n_runs = 4;
  int layer_lo = 0;
  int layer_hi = 3;
};

struct ProjectionConfig {
  std::vector<double> betas = {1.0, 3.0, 5.0, 7.0};
  int n_seeds = 5;
  std::string relation;  // empty: first synthetic systematic relation
  int layer = -1;        // -1: middle layer
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  LreConfig lre;
  EvalConfig eval;
  ProjectionConfig projection;

  void validate() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);

// Loads JSON, applies dotted-key overrides ("train.steps=500"), validates.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {});

void apply_override(nlohmann::json& j, const std::string& dotted_kv);

}  // namespace lrel
