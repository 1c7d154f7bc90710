#include "lrel/model.hpp"

#include <cmath>
#include <string>

#include "lrel/error.hpp"
#include "lrel/parallel.hpp"
#include "lrel/rng.hpp"

namespace lrel {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

void fill_gaussian(Mat& m, Rng& rng, double sigma) {
  for (double& w : m.a) w = rng.gaussian() * sigma;
}

}  // namespace

void ModelConfig::validate() const {
  require(d_model >= 1, "d_model must be >= 1, got " + std::to_string(d_model));
  require(n_layers >= 1, "n_layers must be >= 1, got " + std::to_string(n_layers));
  require(n_heads >= 1, "n_heads must be >= 1, got " + std::to_string(n_heads));
  require(d_head >= 1, "d_head must be >= 1, got " + std::to_string(d_head));
  require(d_mlp >= 1, "d_mlp must be >= 1, got " + std::to_string(d_mlp));
  require(vocab_size >= 1, "vocab_size must be >= 1, got " + std::to_string(vocab_size));
  require(max_seq_len >= 2, "max_seq_len must be >= 2, got " + std::to_string(max_seq_len));
  require(d_model == n_heads * d_head,
          "d_model (" + std::to_string(d_model) + ") must equal n_heads (" +
              std::to_string(n_heads) + ") * d_head (" + std::to_string(d_head) + ")");
}

Parameters build_model(const ModelConfig& config) {
  config.validate();
  const int d = config.d_model;

  Parameters p;
  p.config = config;

  {
    Rng rng = subrng(config.seed, "token_embedding");
    p.token_embedding = Mat(config.vocab_size, d);
    fill_gaussian(p.token_embedding, rng, 0.05);
  }
  {
    Rng rng = subrng(config.seed, "position_embedding");
    p.position_embedding = Mat(config.max_seq_len, d);
    fill_gaussian(p.position_embedding, rng, 0.05);
  }

  const double attn_sigma = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  p.layers.resize(config.n_layers);
  for (int l = 0; l < config.n_layers; ++l) {
    Rng rng = subrng(config.seed, "layer", static_cast<std::uint64_t>(l));
    LayerParams& lp = p.layers[l];
    lp.ln_attn_gain.assign(d, 1.0);
    lp.ln_attn_offset.assign(d, 0.0);
    lp.ln_mlp_gain.assign(d, 1.0);
    lp.ln_mlp_offset.assign(d, 0.0);
    lp.w_query = Mat(d, d);
    lp.w_key = Mat(d, d);
    lp.w_value = Mat(d, d);
    lp.w_out = Mat(d, d);
    lp.w_mlp_in = Mat(d, config.d_mlp);
    lp.w_mlp_out = Mat(config.d_mlp, d);
    fill_gaussian(lp.w_query, rng, attn_sigma);
    fill_gaussian(lp.w_key, rng, attn_sigma);
    fill_gaussian(lp.w_value, rng, attn_sigma);
    fill_gaussian(lp.w_out, rng, attn_sigma * resid_scale);
    fill_gaussian(lp.w_mlp_in, rng, attn_sigma);
    fill_gaussian(lp.w_mlp_out, rng, resid_scale / std::sqrt(static_cast<double>(config.d_mlp)));
  }

  if (config.final_layer_norm) {
    p.final_norm_gain.assign(d, 1.0);
    p.final_norm_offset.assign(d, 0.0);
  }
  {
    Rng rng = subrng(config.seed, "decoder");
    p.decoder_weight = Mat(d, config.vocab_size);
    fill_gaussian(p.decoder_weight, rng, attn_sigma);
  }
  if (config.decoder_bias) p.decoder_offset.assign(config.vocab_size, 0.0);
  return p;
}

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw InputError("token sequence is empty");
  if (static_cast<int>(tokens.size()) > config.max_seq_len)
    throw InputError("sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < 0 || tokens[i] >= config.vocab_size)
      throw InputError("token id " + std::to_string(tokens[i]) + " at position " +
                       std::to_string(i) + " out of range [0, " +
                       std::to_string(config.vocab_size) + ")");
}

ActivationTrace forward_trace(const Parameters& params, std::span<const int> tokens) {
  const ModelConfig& cfg = params.config;
  validate_tokens(cfg, tokens);

  const int n = static_cast<int>(tokens.size());
  const int d = cfg.d_model;
  const int hd = cfg.d_head;
  const int heads = cfg.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ActivationTrace tr;
  tr.tokens.assign(tokens.begin(), tokens.end());
  tr.n = n;
  tr.d = d;
  tr.n_layers = cfg.n_layers;
  tr.x.assign(static_cast<std::size_t>(cfg.n_layers + 1) * n * d, 0.0);
  tr.a.assign(static_cast<std::size_t>(cfg.n_layers) * n * d, 0.0);
  tr.m.assign(static_cast<std::size_t>(cfg.n_layers) * n * d, 0.0);

  for (int i = 0; i < n; ++i) {
    const double* te = params.token_embedding.row(tokens[i]);
    const double* pe = params.position_embedding.row(i);
    double* x0 = tr.x_at(0, i);
    for (int c = 0; c < d; ++c) x0[c] = te[c] + pe[c];
  }

  Vec normed(static_cast<std::size_t>(n) * d);
  Vec q(static_cast<std::size_t>(n) * d), k(static_cast<std::size_t>(n) * d),
      v(static_cast<std::size_t>(n) * d), ctx(static_cast<std::size_t>(n) * d);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params.layers[l];

    par::for_n(n, [&](std::int64_t i) {
      const double* xin = tr.x_at(l, static_cast<int>(i));
      double* na = normed.data() + i * d;
      layer_norm(xin, d, lp.ln_attn_gain.data(), lp.ln_attn_offset.data(), na);
      matvec(lp.w_query.a.data(), d, d, na, q.data() + i * d);
      matvec(lp.w_key.a.data(), d, d, na, k.data() + i * d);
      matvec(lp.w_value.a.data(), d, d, na, v.data() + i * d);
    });

    par::for_n(n, [&](std::int64_t i) {
      Vec scores(static_cast<std::size_t>(i) + 1);
      double* ci = ctx.data() + i * d;
      for (int h = 0; h < heads; ++h) {
        const double* qh = q.data() + i * d + h * hd;
        for (std::int64_t j = 0; j <= i; ++j)
          scores[j] = dot(qh, k.data() + j * d + h * hd, hd) * scale;
        softmax_inplace(scores.data(), static_cast<int>(i) + 1);
        double* ch = ci + h * hd;
        for (int c = 0; c < hd; ++c) ch[c] = 0.0;
        for (std::int64_t j = 0; j <= i; ++j) {
          const double p = scores[j];
          const double* vh = v.data() + j * d + h * hd;
          for (int c = 0; c < hd; ++c) ch[c] += p * vh[c];
        }
      }
      matvec(lp.w_out.a.data(), d, d, ci, tr.a_at(l, static_cast<int>(i)));
    });

    par::for_n(n, [&](std::int64_t i) {
      const double* xin = tr.x_at(l, static_cast<int>(i));
      const double* ai = tr.a_at(l, static_cast<int>(i));
      Vec mlp_src(d);
      if (cfg.wiring == Wiring::Parallel) {
        for (int c = 0; c < d; ++c) mlp_src[c] = xin[c];
      } else {
        for (int c = 0; c < d; ++c) mlp_src[c] = xin[c] + ai[c];
      }
      Vec na(d), hidden(cfg.d_mlp);
      layer_norm(mlp_src.data(), d, lp.ln_mlp_gain.data(), lp.ln_mlp_offset.data(), na.data());
      matvec(lp.w_mlp_in.a.data(), d, cfg.d_mlp, na.data(), hidden.data());
      for (int c = 0; c < cfg.d_mlp; ++c) hidden[c] = gelu(hidden[c]);
      matvec(lp.w_mlp_out.a.data(), cfg.d_mlp, d, hidden.data(), tr.m_at(l, static_cast<int>(i)));

      const double* mi = tr.m_at(l, static_cast<int>(i));
      double* xout = tr.x_at(l + 1, static_cast<int>(i));
      for (int c = 0; c < d; ++c) xout[c] = (xin[c] + ai[c]) + mi[c];
    });
  }

  tr.logits = decode_logits(params, std::span<const double>(tr.x_at(cfg.n_layers, n - 1), d));
  return tr;
}

int predict_next(const Parameters& params, std::span<const int> tokens) {
  const ActivationTrace tr = forward_trace(params, tokens);
  return argmax_smallest(tr.logits);
}

Vec decode_logits(const Parameters& params, std::span<const double> state) {
  const ModelConfig& cfg = params.config;
  if (static_cast<int>(state.size()) != cfg.d_model)
    throw InputError("state length " + std::to_string(state.size()) + " != d_model " +
                     std::to_string(cfg.d_model));
  if (!all_finite(state)) throw InputError("state contains non-finite values");

  Vec pre(cfg.d_model);
  if (cfg.final_layer_norm) {
    layer_norm(state.data(), cfg.d_model, params.final_norm_gain.data(),
               params.final_norm_offset.data(), pre.data());
  } else {
    pre.assign(state.begin(), state.end());
  }
  Vec logits(cfg.vocab_size);
  matvec(params.decoder_weight.a.data(), cfg.d_model, cfg.vocab_size, pre.data(), logits.data());
  if (cfg.decoder_bias)
    for (int t = 0; t < cfg.vocab_size; ++t) logits[t] += params.decoder_offset[t];
  return logits;
}

Vec decode_distribution(const Parameters& params, std::span<const double> state) {
  Vec probs = decode_logits(params, state);
  softmax_inplace(probs.data(), static_cast<int>(probs.size()));
  return probs;
}

int decode_argmax(const Parameters& params, std::span<const double> state) {
  return argmax_smallest(decode_logits(params, state));
}

}  // namespace lrel
