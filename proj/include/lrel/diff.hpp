#pragma once

#include <memory>
#include <span>
#include <vector>

#include "lrel/model.hpp"
#include "lrel/tensor.hpp"

namespace lrel {

enum class JacobianMethod { ForwardMode, FiniteDifference };

// A differentiable function R^d -> R^d. Implementations must be pure: value
// and jvp_lanes may be called concurrently from many workers.
class DifferentiableMap {
 public:
  // Tangent lanes propagated per forward pass. Lane arithmetic is
  // independent per lane, so batched passes match single-tangent passes
  // bit for bit.
  static constexpr int kLanes = 8;

  virtual ~DifferentiableMap() = default;
  virtual int dim() const = 0;
  virtual Vec value(const Vec& s) const = 0;

  // Computes F(s) into value_out and (dF/ds)*tangent_k into cols for
  // k = 0..n_lanes-1. tangents and cols are n_lanes x d, row-major.
  virtual void jvp_lanes(const Vec& s, const double* tangents, int n_lanes, Vec& value_out,
                         double* cols) const = 0;
};

// The subject-object map F: replaces the residual state at (source_layer,
// subject_position) with s, recomputes everything downstream that can see the
// patch, and returns the final-layer state at the last position. Earlier
// positions are untouched by causality.
class SubjectObjectMap final : public DifferentiableMap {
 public:
  SubjectObjectMap(const Parameters& params, std::vector<int> prompt_tokens, int subject_position,
                   int source_layer);

  int dim() const override { return params_->config.d_model; }
  Vec value(const Vec& s) const override;
  void jvp_lanes(const Vec& s, const double* tangents, int n_lanes, Vec& value_out,
                 double* cols) const override;

  const Parameters& params() const { return *params_; }
  const std::vector<int>& prompt_tokens() const { return prompt_; }
  int subject_position() const { return p_; }
  int source_layer() const { return j_; }
  const Vec& base_state() const { return base_state_; }
  const Vec& clean_final() const { return clean_final_; }
  const ActivationTrace& clean_trace() const { return clean_; }

 private:
  template <class T>
  void run_tail(const T* patched, T* final_out) const;

  const Parameters* params_;
  std::vector<int> prompt_;
  int p_;
  int j_;
  ActivationTrace clean_;
  Vec base_state_;
  Vec clean_final_;
  // Clean keys/values for positions before the patch, per downstream layer.
  std::vector<Vec> prefix_k_, prefix_v_;
};

SubjectObjectMap make_map(const Parameters& params, std::vector<int> prompt_tokens,
                          int subject_position, int source_layer);

struct JacobianResult {
  Mat W;     // W(out, in) = dF_out / ds_in
  Vec value; // F(s)
  JacobianMethod method = JacobianMethod::ForwardMode;
  Vec s0;
};

// Single tangent: returns (dF/ds|_s) * v.
Vec jvp(const DifferentiableMap& map, const Vec& s, const Vec& v);

// ForwardMode assembles columns from tangent lanes (parallel over chunks);
// FiniteDifference uses central differences with step 1e-5 per coordinate.
JacobianResult jacobian(const DifferentiableMap& map, const Vec& s, JacobianMethod method);

inline constexpr double kFiniteDiffStep = 1e-5;

// ||F(s0 + eps*v) - F(s0) - eps*J*v|| for each step size.
std::vector<double> taylor_remainder(const DifferentiableMap& map, const Vec& s0, const Vec& v,
                                     const std::vector<double>& epsilons);

// ---- Reverse mode (training support) ----

struct ParamGrads {
  Mat token_embedding, position_embedding;
  std::vector<LayerParams> layers;  // reused as gradient holders
  Vec final_norm_gain, final_norm_offset;
  Mat decoder_weight;
  Vec decoder_offset;

  void init_like(const Parameters& params);
  void zero();
};

// Tensor views in a fixed order shared by Parameters and ParamGrads; used by
// the optimizer and gradient clipping.
std::vector<Vec*> tensor_views(Parameters& p);
std::vector<Vec*> tensor_views(ParamGrads& g);

// Mean next-token cross-entropy over positions 0..n-2.
double sequence_loss(const Parameters& params, std::span<const int> tokens);

// Fraction of positions whose argmax logits equal the next token.
double sequence_token_accuracy(const Parameters& params, std::span<const int> tokens);

// Loss plus parameter gradients (overwrites grads). Matches central finite
// differences coordinate-wise to relative 1e-4.
double sequence_loss_and_grad(const Parameters& params, std::span<const int> tokens,
                              ParamGrads& grads);

// Mean over docs; per-doc gradients are computed in parallel into separate
// slots and reduced in doc order, so results do not depend on worker count.
double batch_loss_and_grad(const Parameters& params, const std::vector<std::vector<int>>& docs,
                           ParamGrads& grads);

}  // namespace lrel
