#pragma once

#include <string>
#include <vector>

#include "lrel/diff.hpp"
#include "lrel/model.hpp"
#include "lrel/relations.hpp"
#include "lrel/tensor.hpp"

namespace lrel {

enum class OperatorKind { Affine, Linear, Bias, Translation };

std::string kind_name(OperatorKind kind);
OperatorKind kind_from_name(const std::string& name);

// One relational approximator:
//   Affine      beta * W s + b
//   Linear      W s
//   Bias        s + b            (b is the Jacobian-derived offset)
//   Translation s + b            (b is the mean object-minus-subject offset)
struct RelationalOperator {
  OperatorKind kind = OperatorKind::Affine;
  Mat W;   // d x d; empty for Bias/Translation
  Vec b;   // d; empty for Linear
  double beta = 1.0;  // Affine only
  int source_layer = 0;
  std::string relation_id;
  int n_samples = 0;
  std::vector<std::string> sample_ids;

  void validate() const;  // throws OperatorError on kind/field mismatch
};

struct EstimationSample {
  std::string id;  // pair identifier (the subject)
  const DifferentiableMap* map = nullptr;
  Vec s;  // subject state the Jacobian is taken at
};

struct OperatorSet {
  RelationalOperator affine, linear, bias, translation;
};

// Mean Jacobian and offsets over prepared samples. Samples are canonically
// ordered by id before accumulation, so any permutation of the input yields
// bit-identical operators. The offset uses each sample's own Jacobian:
// b = E[F(s_i) - W_i s_i].
OperatorSet estimate_operators(std::vector<EstimationSample> samples, double beta,
                               int source_layer, const std::string& relation_id);

const RelationalOperator& select_kind(const OperatorSet& set, OperatorKind kind);

// Builds per-sample ICL prompts (leave-one-out over the train pairs), forms
// subject-object maps at source_layer, and estimates all four kinds at once.
OperatorSet estimate_from_model(const Parameters& params, const Vocab& vocab,
                                const RelationCategory& category,
                                const std::vector<RelationPair>& train_pairs, int source_layer,
                                double beta);

RelationalOperator estimate(const Parameters& params, const Vocab& vocab,
                            const RelationCategory& category,
                            const std::vector<RelationPair>& train_pairs, int source_layer,
                            OperatorKind kind, double beta);

Vec apply_operator(const RelationalOperator& op, const Vec& s);

// Operator files share the LREL container with a kind tag and metadata.
void save_operator(const std::string& path, const RelationalOperator& op);
RelationalOperator load_operator(const std::string& path, int expected_d = -1);

}  // namespace lrel
