#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lrel/tensor.hpp"

namespace lrel {

enum class Wiring { Parallel, Sequential };

struct ModelConfig {
  int d_model = 0;
  int n_layers = 0;
  int n_heads = 0;
  int d_head = 0;
  int d_mlp = 0;
  int vocab_size = 0;
  int max_seq_len = 0;
  Wiring wiring = Wiring::Parallel;
  bool final_layer_norm = true;
  bool decoder_bias = false;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError naming the offending field
};

struct LayerParams {
  Vec ln_attn_gain, ln_attn_offset;
  Mat w_query, w_key, w_value, w_out;  // each d x d, input-major
  Vec ln_mlp_gain, ln_mlp_offset;
  Mat w_mlp_in;   // d x d_mlp
  Mat w_mlp_out;  // d_mlp x d
};

// Immutable after construction; forward passes never mutate parameters, so
// they are safe to share across workers.
struct Parameters {
  ModelConfig config;
  Mat token_embedding;     // vocab x d
  Mat position_embedding;  // max_seq_len x d
  std::vector<LayerParams> layers;
  Vec final_norm_gain, final_norm_offset;  // empty unless final_layer_norm
  Mat decoder_weight;                      // d x vocab
  Vec decoder_offset;                      // empty unless decoder_bias
};

// Residual states x^l_i for l = 0..L (x^0 = embeddings) plus the attention
// and MLP contributions a^l_i, m^l_i that produced them.
struct ActivationTrace {
  std::vector<int> tokens;
  int n = 0;
  int d = 0;
  int n_layers = 0;
  Vec x;       // (L+1) * n * d
  Vec a;       // L * n * d
  Vec m;       // L * n * d
  Vec logits;  // vocab, at the last position

  const double* x_at(int layer, int pos) const {
    return x.data() + (static_cast<std::size_t>(layer) * n + pos) * d;
  }
  const double* a_at(int layer, int pos) const {
    return a.data() + (static_cast<std::size_t>(layer) * n + pos) * d;
  }
  const double* m_at(int layer, int pos) const {
    return m.data() + (static_cast<std::size_t>(layer) * n + pos) * d;
  }
  double* x_at(int layer, int pos) {
    return x.data() + (static_cast<std::size_t>(layer) * n + pos) * d;
  }
  double* a_at(int layer, int pos) {
    return a.data() + (static_cast<std::size_t>(layer) * n + pos) * d;
  }
  double* m_at(int layer, int pos) {
    return m.data() + (static_cast<std::size_t>(layer) * n + pos) * d;
  }
};

// Deterministic initialization from config.seed: scaled Gaussian weights,
// unit norm gains, zero offsets. Equal configs yield bit-identical bytes.
Parameters build_model(const ModelConfig& config);

ActivationTrace forward_trace(const Parameters& params, std::span<const int> tokens);

// argmax over decoder logits at the last position; ties break to smallest id.
int predict_next(const Parameters& params, std::span<const int> tokens);

// Optional final norm, decoder head, no softmax.
Vec decode_logits(const Parameters& params, std::span<const double> state);

// As decode_logits followed by softmax; sums to 1, argmax preserved.
Vec decode_distribution(const Parameters& params, std::span<const double> state);

int decode_argmax(const Parameters& params, std::span<const double> state);

void validate_tokens(const ModelConfig& config, std::span<const int> tokens);

}  // namespace lrel
