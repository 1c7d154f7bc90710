#include "lrel/diff.hpp"

#include <cmath>
#include <cstring>
#include <string>

#include "lrel/dual.hpp"
#include "lrel/error.hpp"
#include "lrel/parallel.hpp"

namespace lrel {

namespace {

using Dual8 = Dual<DifferentiableMap::kLanes>;

void check_finite_input(const Vec& v, const char* what) {
  if (!all_finite(v)) throw InputError(std::string(what) + " contains non-finite values");
}

}  // namespace

SubjectObjectMap::SubjectObjectMap(const Parameters& params, std::vector<int> prompt_tokens,
                                   int subject_position, int source_layer)
    : params_(&params), prompt_(std::move(prompt_tokens)), p_(subject_position), j_(source_layer) {
  const ModelConfig& cfg = params.config;
  validate_tokens(cfg, prompt_);
  const int n = static_cast<int>(prompt_.size());
  if (p_ < 0 || p_ >= n)
    throw InputError("subject_position " + std::to_string(p_) + " out of range [0, " +
                     std::to_string(n) + ")");
  if (j_ < 0 || j_ > cfg.n_layers)
    throw InputError("source_layer " + std::to_string(j_) + " out of range [0, " +
                     std::to_string(cfg.n_layers) + "]");

  clean_ = forward_trace(params, prompt_);
  const int d = cfg.d_model;
  base_state_.assign(clean_.x_at(j_, p_), clean_.x_at(j_, p_) + d);
  clean_final_.assign(clean_.x_at(cfg.n_layers, n - 1), clean_.x_at(cfg.n_layers, n - 1) + d);

  // Keys/values of pre-patch positions never change, so compute them once.
  const int n_tail_layers = cfg.n_layers - j_;
  prefix_k_.resize(n_tail_layers);
  prefix_v_.resize(n_tail_layers);
  Vec normed(d);
  for (int l = j_; l < cfg.n_layers; ++l) {
    Vec& pk = prefix_k_[l - j_];
    Vec& pv = prefix_v_[l - j_];
    pk.assign(static_cast<std::size_t>(p_) * d, 0.0);
    pv.assign(static_cast<std::size_t>(p_) * d, 0.0);
    const LayerParams& lp = params.layers[l];
    for (int q = 0; q < p_; ++q) {
      layer_norm(clean_.x_at(l, q), d, lp.ln_attn_gain.data(), lp.ln_attn_offset.data(),
                 normed.data());
      matvec(lp.w_key.a.data(), d, d, normed.data(), pk.data() + static_cast<std::size_t>(q) * d);
      matvec(lp.w_value.a.data(), d, d, normed.data(), pv.data() + static_cast<std::size_t>(q) * d);
    }
  }
}

template <class T>
void SubjectObjectMap::run_tail(const T* patched, T* final_out) const {
  const ModelConfig& cfg = params_->config;
  const int n = static_cast<int>(prompt_.size());
  const int d = cfg.d_model;
  const int hd = cfg.d_head;
  const int heads = cfg.n_heads;
  const int tn = n - p_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<T> cur(static_cast<std::size_t>(tn) * d), next(static_cast<std::size_t>(tn) * d);
  for (int c = 0; c < d; ++c) cur[c] = patched[c];
  for (int t = 1; t < tn; ++t) {
    const double* clean_row = clean_.x_at(j_, p_ + t);
    for (int c = 0; c < d; ++c) cur[static_cast<std::size_t>(t) * d + c] = T(clean_row[c]);
  }

  std::vector<T> normed(static_cast<std::size_t>(tn) * d), q(static_cast<std::size_t>(tn) * d),
      tk(static_cast<std::size_t>(tn) * d), tv(static_cast<std::size_t>(tn) * d),
      attn(static_cast<std::size_t>(tn) * d);
  std::vector<T> scores(n), ctx(d), mlp_src(d), mlp_normed(d), hidden(cfg.d_mlp);

  for (int l = j_; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params_->layers[l];
    const Vec& pk = prefix_k_[l - j_];
    const Vec& pv = prefix_v_[l - j_];

    for (int t = 0; t < tn; ++t) {
      const T* xin = cur.data() + static_cast<std::size_t>(t) * d;
      T* na = normed.data() + static_cast<std::size_t>(t) * d;
      layer_norm(xin, d, lp.ln_attn_gain.data(), lp.ln_attn_offset.data(), na);
      matvec(lp.w_query.a.data(), d, d, na, q.data() + static_cast<std::size_t>(t) * d);
      matvec(lp.w_key.a.data(), d, d, na, tk.data() + static_cast<std::size_t>(t) * d);
      matvec(lp.w_value.a.data(), d, d, na, tv.data() + static_cast<std::size_t>(t) * d);
    }

    for (int t = 0; t < tn; ++t) {
      const int gi = p_ + t;
      for (int h = 0; h < heads; ++h) {
        const T* qh = q.data() + static_cast<std::size_t>(t) * d + h * hd;
        for (int gj = 0; gj <= gi; ++gj) {
          if (gj < p_) {
            scores[gj] =
                dot_mixed(qh, pk.data() + static_cast<std::size_t>(gj) * d + h * hd, hd) * scale;
          } else {
            scores[gj] =
                dot(qh, tk.data() + static_cast<std::size_t>(gj - p_) * d + h * hd, hd) * scale;
          }
        }
        softmax_inplace(scores.data(), gi + 1);
        T* ch = ctx.data() + h * hd;
        for (int c = 0; c < hd; ++c) ch[c] = T(0.0);
        for (int gj = 0; gj <= gi; ++gj) {
          const T p = scores[gj];
          if (gj < p_) {
            const double* vh = pv.data() + static_cast<std::size_t>(gj) * d + h * hd;
            for (int c = 0; c < hd; ++c) ch[c] += p * vh[c];
          } else {
            const T* vh = tv.data() + static_cast<std::size_t>(gj - p_) * d + h * hd;
            for (int c = 0; c < hd; ++c) ch[c] += p * vh[c];
          }
        }
      }
      matvec(lp.w_out.a.data(), d, d, ctx.data(), attn.data() + static_cast<std::size_t>(t) * d);
    }

    for (int t = 0; t < tn; ++t) {
      const T* xin = cur.data() + static_cast<std::size_t>(t) * d;
      const T* ai = attn.data() + static_cast<std::size_t>(t) * d;
      if (cfg.wiring == Wiring::Parallel) {
        for (int c = 0; c < d; ++c) mlp_src[c] = xin[c];
      } else {
        for (int c = 0; c < d; ++c) mlp_src[c] = xin[c] + ai[c];
      }
      layer_norm(mlp_src.data(), d, lp.ln_mlp_gain.data(), lp.ln_mlp_offset.data(),
                 mlp_normed.data());
      matvec(lp.w_mlp_in.a.data(), d, cfg.d_mlp, mlp_normed.data(), hidden.data());
      for (int c = 0; c < cfg.d_mlp; ++c) hidden[c] = gelu(hidden[c]);
      T* mi = next.data() + static_cast<std::size_t>(t) * d;  // reuse next as m scratch
      matvec(lp.w_mlp_out.a.data(), cfg.d_mlp, d, hidden.data(), mi);
      for (int c = 0; c < d; ++c) mi[c] = (xin[c] + ai[c]) + mi[c];
    }
    std::swap(cur, next);
  }

  const T* last = cur.data() + static_cast<std::size_t>(tn - 1) * d;
  for (int c = 0; c < d; ++c) final_out[c] = last[c];
}

Vec SubjectObjectMap::value(const Vec& s) const {
  const int d = dim();
  if (static_cast<int>(s.size()) != d)
    throw InputError("state length " + std::to_string(s.size()) + " != d_model");
  check_finite_input(s, "state");
  Vec out(d);
  run_tail<double>(s.data(), out.data());
  return out;
}

void SubjectObjectMap::jvp_lanes(const Vec& s, const double* tangents, int n_lanes, Vec& value_out,
                                 double* cols) const {
  const int d = dim();
  if (static_cast<int>(s.size()) != d)
    throw InputError("state length " + std::to_string(s.size()) + " != d_model");
  if (n_lanes < 1 || n_lanes > kLanes)
    throw InputError("n_lanes " + std::to_string(n_lanes) + " out of range");
  check_finite_input(s, "state");

  std::vector<Dual8> patched(d), out(d);
  for (int i = 0; i < d; ++i) {
    patched[i].v = s[i];
    patched[i].t.fill(0.0);
    for (int k = 0; k < n_lanes; ++k) patched[i].t[k] = tangents[static_cast<std::size_t>(k) * d + i];
  }
  run_tail<Dual8>(patched.data(), out.data());

  value_out.resize(d);
  for (int i = 0; i < d; ++i) value_out[i] = out[i].v;
  for (int k = 0; k < n_lanes; ++k)
    for (int i = 0; i < d; ++i) cols[static_cast<std::size_t>(k) * d + i] = out[i].t[k];
}

SubjectObjectMap make_map(const Parameters& params, std::vector<int> prompt_tokens,
                          int subject_position, int source_layer) {
  return SubjectObjectMap(params, std::move(prompt_tokens), subject_position, source_layer);
}

Vec jvp(const DifferentiableMap& map, const Vec& s, const Vec& v) {
  const int d = map.dim();
  if (static_cast<int>(v.size()) != d) throw InputError("tangent length mismatch");
  check_finite_input(v, "tangent");
  Vec value;
  Vec col(d);
  map.jvp_lanes(s, v.data(), 1, value, col.data());
  return col;
}

JacobianResult jacobian(const DifferentiableMap& map, const Vec& s, JacobianMethod method) {
  const int d = map.dim();
  JacobianResult result;
  result.method = method;
  result.s0 = s;
  result.W = Mat(d, d);

  if (method == JacobianMethod::ForwardMode) {
    const int lanes = DifferentiableMap::kLanes;
    const int n_chunks = (d + lanes - 1) / lanes;
    std::vector<Vec> chunk_values(n_chunks);
    std::vector<Vec> chunk_cols(n_chunks);
    par::for_n(n_chunks, [&](std::int64_t c) {
      const int c0 = static_cast<int>(c) * lanes;
      const int nl = std::min(lanes, d - c0);
      Vec tangents(static_cast<std::size_t>(lanes) * d, 0.0);
      for (int k = 0; k < nl; ++k) tangents[static_cast<std::size_t>(k) * d + c0 + k] = 1.0;
      chunk_cols[c].resize(static_cast<std::size_t>(lanes) * d);
      map.jvp_lanes(s, tangents.data(), nl, chunk_values[c], chunk_cols[c].data());
    });
    result.value = chunk_values[0];
    for (int c = 0; c < n_chunks; ++c) {
      const int c0 = c * lanes;
      const int nl = std::min(lanes, d - c0);
      for (int k = 0; k < nl; ++k) {
        const double* col = chunk_cols[c].data() + static_cast<std::size_t>(k) * d;
        for (int out = 0; out < d; ++out) {
          if (!std::isfinite(col[out]))
            throw NumericError("non-finite Jacobian entry at column " + std::to_string(c0 + k));
          result.W.at(out, c0 + k) = col[out];
        }
      }
    }
  } else {
    result.value = map.value(s);
    std::vector<Vec> columns(d);
    par::for_n(d, [&](std::int64_t i) {
      Vec sp = s, sm = s;
      sp[i] += kFiniteDiffStep;
      sm[i] -= kFiniteDiffStep;
      const Vec fp = map.value(sp);
      const Vec fm = map.value(sm);
      Vec col(d);
      for (int out = 0; out < d; ++out) col[out] = (fp[out] - fm[out]) / (2.0 * kFiniteDiffStep);
      columns[i] = std::move(col);
    });
    for (int i = 0; i < d; ++i) {
      for (int out = 0; out < d; ++out) {
        if (!std::isfinite(columns[i][out]))
          throw NumericError("non-finite finite-difference column at coordinate " +
                             std::to_string(i));
        result.W.at(out, i) = columns[i][out];
      }
    }
  }
  return result;
}

std::vector<double> taylor_remainder(const DifferentiableMap& map, const Vec& s0, const Vec& v,
                                     const std::vector<double>& epsilons) {
  const int d = map.dim();
  if (static_cast<int>(v.size()) != d) throw InputError("direction length mismatch");
  const double nrm = l2_norm(v);
  if (std::abs(nrm - 1.0) > 1e-8)
    throw InputError("direction must be unit norm, got " + std::to_string(nrm));
  double prev = std::numeric_limits<double>::infinity();
  for (const double e : epsilons) {
    if (e < 0.0) throw InputError("epsilons must be non-negative");
    if (e > prev) throw InputError("epsilons must be descending");
    prev = e;
  }

  const Vec f0 = map.value(s0);
  const Vec jv = jvp(map, s0, v);
  std::vector<double> out;
  out.reserve(epsilons.size());
  for (const double eps : epsilons) {
    Vec se(d);
    for (int i = 0; i < d; ++i) se[i] = s0[i] + eps * v[i];
    const Vec fe = map.value(se);
    double acc = 0.0;
    for (int i = 0; i < d; ++i) {
      const double r = fe[i] - f0[i] - eps * jv[i];
      acc += r * r;
    }
    out.push_back(std::sqrt(acc));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reverse mode
// ---------------------------------------------------------------------------

void ParamGrads::init_like(const Parameters& params) {
  const ModelConfig& cfg = params.config;
  const int d = cfg.d_model;
  token_embedding = Mat(cfg.vocab_size, d);
  position_embedding = Mat(cfg.max_seq_len, d);
  layers.assign(cfg.n_layers, LayerParams{});
  for (LayerParams& lp : layers) {
    lp.ln_attn_gain.assign(d, 0.0);
    lp.ln_attn_offset.assign(d, 0.0);
    lp.ln_mlp_gain.assign(d, 0.0);
    lp.ln_mlp_offset.assign(d, 0.0);
    lp.w_query = Mat(d, d);
    lp.w_key = Mat(d, d);
    lp.w_value = Mat(d, d);
    lp.w_out = Mat(d, d);
    lp.w_mlp_in = Mat(d, cfg.d_mlp);
    lp.w_mlp_out = Mat(cfg.d_mlp, d);
  }
  if (cfg.final_layer_norm) {
    final_norm_gain.assign(d, 0.0);
    final_norm_offset.assign(d, 0.0);
  } else {
    final_norm_gain.clear();
    final_norm_offset.clear();
  }
  decoder_weight = Mat(d, cfg.vocab_size);
  if (cfg.decoder_bias) {
    decoder_offset.assign(cfg.vocab_size, 0.0);
  } else {
    decoder_offset.clear();
  }
}

void ParamGrads::zero() {
  auto z = [](Vec& v) { std::fill(v.begin(), v.end(), 0.0); };
  z(token_embedding.a);
  z(position_embedding.a);
  for (LayerParams& lp : layers) {
    z(lp.ln_attn_gain);
    z(lp.ln_attn_offset);
    z(lp.ln_mlp_gain);
    z(lp.ln_mlp_offset);
    z(lp.w_query.a);
    z(lp.w_key.a);
    z(lp.w_value.a);
    z(lp.w_out.a);
    z(lp.w_mlp_in.a);
    z(lp.w_mlp_out.a);
  }
  z(final_norm_gain);
  z(final_norm_offset);
  z(decoder_weight.a);
  z(decoder_offset);
}

namespace {

template <class P>
std::vector<Vec*> views_impl(P& p) {
  std::vector<Vec*> out;
  out.push_back(&p.token_embedding.a);
  out.push_back(&p.position_embedding.a);
  for (auto& lp : p.layers) {
    out.push_back(&lp.ln_attn_gain);
    out.push_back(&lp.ln_attn_offset);
    out.push_back(&lp.w_query.a);
    out.push_back(&lp.w_key.a);
    out.push_back(&lp.w_value.a);
    out.push_back(&lp.w_out.a);
    out.push_back(&lp.ln_mlp_gain);
    out.push_back(&lp.ln_mlp_offset);
    out.push_back(&lp.w_mlp_in.a);
    out.push_back(&lp.w_mlp_out.a);
  }
  if (!p.final_norm_gain.empty()) {
    out.push_back(&p.final_norm_gain);
    out.push_back(&p.final_norm_offset);
  }
  out.push_back(&p.decoder_weight.a);
  if (!p.decoder_offset.empty()) out.push_back(&p.decoder_offset);
  return out;
}

}  // namespace

std::vector<Vec*> tensor_views(Parameters& p) { return views_impl(p); }
std::vector<Vec*> tensor_views(ParamGrads& g) { return views_impl(g); }

namespace {

struct TrainWS {
  int n = 0;
  Vec x;       // (L+1)*n*d
  Vec na;      // L*n*d
  Vec q, k, v; // L*n*d each
  Vec probs;   // L*H*n*n
  Vec ctx;     // L*n*d
  Vec a;       // L*n*d
  Vec msrc;    // L*n*d
  Vec mna;     // L*n*d
  Vec hpre;    // L*n*dm
  Vec hact;    // L*n*dm
  Vec m;       // L*n*d
  Vec predec;  // n*d
  Vec logits;  // n*V
};

double forward_train(const Parameters& params, std::span<const int> tokens, TrainWS& ws) {
  const ModelConfig& cfg = params.config;
  validate_tokens(cfg, tokens);
  const int n = static_cast<int>(tokens.size());
  if (n < 2) throw InputError("training sequence needs at least 2 tokens");
  const int d = cfg.d_model, hd = cfg.d_head, H = cfg.n_heads, L = cfg.n_layers, dm = cfg.d_mlp,
            V = cfg.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ws.n = n;
  const std::size_t nd = static_cast<std::size_t>(n) * d;
  ws.x.assign(static_cast<std::size_t>(L + 1) * nd, 0.0);
  ws.na.assign(static_cast<std::size_t>(L) * nd, 0.0);
  ws.q.assign(static_cast<std::size_t>(L) * nd, 0.0);
  ws.k.assign(static_cast<std::size_t>(L) * nd, 0.0);
  ws.v.assign(static_cast<std::size_t>(L) * nd, 0.0);
  ws.probs.assign(static_cast<std::size_t>(L) * H * n * n, 0.0);
  ws.ctx.assign(static_cast<std::size_t>(L) * nd, 0.0);
  ws.a.assign(static_cast<std::size_t>(L) * nd, 0.0);
  ws.msrc.assign(static_cast<std::size_t>(L) * nd, 0.0);
  ws.mna.assign(static_cast<std::size_t>(L) * nd, 0.0);
  ws.hpre.assign(static_cast<std::size_t>(L) * n * dm, 0.0);
  ws.hact.assign(static_cast<std::size_t>(L) * n * dm, 0.0);
  ws.m.assign(static_cast<std::size_t>(L) * nd, 0.0);
  ws.predec.assign(nd, 0.0);
  ws.logits.assign(static_cast<std::size_t>(n) * V, 0.0);

  auto X = [&](int l, int i) { return ws.x.data() + (static_cast<std::size_t>(l) * n + i) * d; };

  for (int i = 0; i < n; ++i) {
    const double* te = params.token_embedding.row(tokens[i]);
    const double* pe = params.position_embedding.row(i);
    double* x0 = X(0, i);
    for (int c = 0; c < d; ++c) x0[c] = te[c] + pe[c];
  }

  for (int l = 0; l < L; ++l) {
    const LayerParams& lp = params.layers[l];
    const std::size_t off = static_cast<std::size_t>(l) * nd;
    for (int i = 0; i < n; ++i) {
      double* na = ws.na.data() + off + static_cast<std::size_t>(i) * d;
      layer_norm(X(l, i), d, lp.ln_attn_gain.data(), lp.ln_attn_offset.data(), na);
      matvec(lp.w_query.a.data(), d, d, na, ws.q.data() + off + static_cast<std::size_t>(i) * d);
      matvec(lp.w_key.a.data(), d, d, na, ws.k.data() + off + static_cast<std::size_t>(i) * d);
      matvec(lp.w_value.a.data(), d, d, na, ws.v.data() + off + static_cast<std::size_t>(i) * d);
    }
    for (int i = 0; i < n; ++i) {
      double* ci = ws.ctx.data() + off + static_cast<std::size_t>(i) * d;
      for (int h = 0; h < H; ++h) {
        double* prow =
            ws.probs.data() + ((static_cast<std::size_t>(l) * H + h) * n + i) * n;
        const double* qh = ws.q.data() + off + static_cast<std::size_t>(i) * d + h * hd;
        for (int j = 0; j <= i; ++j)
          prow[j] = dot(qh, ws.k.data() + off + static_cast<std::size_t>(j) * d + h * hd, hd) * scale;
        softmax_inplace(prow, i + 1);
        double* ch = ci + h * hd;
        for (int c = 0; c < hd; ++c) ch[c] = 0.0;
        for (int j = 0; j <= i; ++j) {
          const double p = prow[j];
          const double* vh = ws.v.data() + off + static_cast<std::size_t>(j) * d + h * hd;
          for (int c = 0; c < hd; ++c) ch[c] += p * vh[c];
        }
      }
      matvec(lp.w_out.a.data(), d, d, ci, ws.a.data() + off + static_cast<std::size_t>(i) * d);
    }
    for (int i = 0; i < n; ++i) {
      const double* xin = X(l, i);
      const double* ai = ws.a.data() + off + static_cast<std::size_t>(i) * d;
      double* src = ws.msrc.data() + off + static_cast<std::size_t>(i) * d;
      if (cfg.wiring == Wiring::Parallel) {
        for (int c = 0; c < d; ++c) src[c] = xin[c];
      } else {
        for (int c = 0; c < d; ++c) src[c] = xin[c] + ai[c];
      }
      double* na = ws.mna.data() + off + static_cast<std::size_t>(i) * d;
      layer_norm(src, d, lp.ln_mlp_gain.data(), lp.ln_mlp_offset.data(), na);
      double* hp = ws.hpre.data() + (static_cast<std::size_t>(l) * n + i) * dm;
      matvec(lp.w_mlp_in.a.data(), d, dm, na, hp);
      double* ha = ws.hact.data() + (static_cast<std::size_t>(l) * n + i) * dm;
      for (int c = 0; c < dm; ++c) ha[c] = gelu(hp[c]);
      double* mi = ws.m.data() + off + static_cast<std::size_t>(i) * d;
      matvec(lp.w_mlp_out.a.data(), dm, d, ha, mi);
      double* xout = X(l + 1, i);
      for (int c = 0; c < d; ++c) xout[c] = (xin[c] + ai[c]) + mi[c];
    }
  }

  for (int i = 0; i < n; ++i) {
    double* pd = ws.predec.data() + static_cast<std::size_t>(i) * d;
    if (cfg.final_layer_norm) {
      layer_norm(X(L, i), d, params.final_norm_gain.data(), params.final_norm_offset.data(), pd);
    } else {
      std::memcpy(pd, X(L, i), sizeof(double) * d);
    }
    double* lg = ws.logits.data() + static_cast<std::size_t>(i) * V;
    matvec(params.decoder_weight.a.data(), d, V, pd, lg);
    if (cfg.decoder_bias)
      for (int t = 0; t < V; ++t) lg[t] += params.decoder_offset[t];
  }

  double loss = 0.0;
  for (int i = 0; i + 1 < n; ++i) {
    const double* lg = ws.logits.data() + static_cast<std::size_t>(i) * V;
    double mx = lg[0];
    for (int t = 1; t < V; ++t)
      if (lg[t] > mx) mx = lg[t];
    double sum = 0.0;
    for (int t = 0; t < V; ++t) sum += std::exp(lg[t] - mx);
    loss += mx + std::log(sum) - lg[tokens[i + 1]];
  }
  return loss / (n - 1);
}

// dx overwritten; gain/offset gradient accumulation.
void layer_norm_backward(const double* x, int d, const double* gain, const double* dy, double* dx,
                         double* dgain, double* doffset) {
  double mean = 0.0;
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= d;
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);

  double mean_dyh = 0.0, mean_dyh_xhat = 0.0;
  for (int i = 0; i < d; ++i) {
    const double xhat = (x[i] - mean) * inv;
    const double dyh = dy[i] * gain[i];
    dgain[i] += dy[i] * xhat;
    doffset[i] += dy[i];
    mean_dyh += dyh;
    mean_dyh_xhat += dyh * xhat;
  }
  mean_dyh /= d;
  mean_dyh_xhat /= d;
  for (int i = 0; i < d; ++i) {
    const double xhat = (x[i] - mean) * inv;
    const double dyh = dy[i] * gain[i];
    dx[i] = inv * (dyh - mean_dyh - xhat * mean_dyh_xhat);
  }
}

double gelu_grad(double x) {
  const double kInvSqrt2 = 0.7071067811865475244;
  const double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

// dW(r, c) += u[r] * w[c]
void outer_acc(double* dw, int rows, int cols, const double* u, const double* w) {
  for (int r = 0; r < rows; ++r) {
    const double ur = u[r];
    double* row = dw + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) row[c] += ur * w[c];
  }
}

// dx[r] = sum_c W(r, c) * dy[c]  (transpose-multiply for input-major weights)
void matvec_t(const double* w, int rows, int cols, const double* dy, double* dx) {
  for (int r = 0; r < rows; ++r)
    dx[r] = dot(w + static_cast<std::size_t>(r) * cols, dy, cols);
}

}  // namespace

double sequence_loss(const Parameters& params, std::span<const int> tokens) {
  TrainWS ws;
  return forward_train(params, tokens, ws);
}

double sequence_token_accuracy(const Parameters& params, std::span<const int> tokens) {
  TrainWS ws;
  forward_train(params, tokens, ws);
  const int V = params.config.vocab_size;
  int hits = 0;
  for (int i = 0; i + 1 < ws.n; ++i) {
    const std::span<const double> row(ws.logits.data() + static_cast<std::size_t>(i) * V, V);
    if (argmax_smallest(row) == tokens[i + 1]) ++hits;
  }
  return static_cast<double>(hits) / (ws.n - 1);
}

double sequence_loss_and_grad(const Parameters& params, std::span<const int> tokens,
                              ParamGrads& grads) {
  const ModelConfig& cfg = params.config;
  TrainWS ws;
  const double loss = forward_train(params, tokens, ws);

  const int n = ws.n, d = cfg.d_model, hd = cfg.d_head, H = cfg.n_heads, L = cfg.n_layers,
            dm = cfg.d_mlp, V = cfg.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t nd = static_cast<std::size_t>(n) * d;

  grads.zero();

  auto X = [&](int l, int i) { return ws.x.data() + (static_cast<std::size_t>(l) * n + i) * d; };

  // Decoder head and final norm.
  Vec dlogits(V), dpredec(nd, 0.0), dx(nd, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* lg = ws.logits.data() + static_cast<std::size_t>(i) * V;
    double* dpd = dpredec.data() + static_cast<std::size_t>(i) * d;
    if (i + 1 >= n) continue;
    double mx = lg[0];
    for (int t = 1; t < V; ++t)
      if (lg[t] > mx) mx = lg[t];
    double sum = 0.0;
    for (int t = 0; t < V; ++t) sum += std::exp(lg[t] - mx);
    const double inv_scale = 1.0 / (n - 1);
    for (int t = 0; t < V; ++t) dlogits[t] = std::exp(lg[t] - mx) / sum * inv_scale;
    dlogits[tokens[i + 1]] -= inv_scale;

    const double* pd = ws.predec.data() + static_cast<std::size_t>(i) * d;
    outer_acc(grads.decoder_weight.a.data(), d, V, pd, dlogits.data());
    if (cfg.decoder_bias)
      for (int t = 0; t < V; ++t) grads.decoder_offset[t] += dlogits[t];
    matvec_t(params.decoder_weight.a.data(), d, V, dlogits.data(), dpd);
  }
  for (int i = 0; i < n; ++i) {
    const double* dpd = dpredec.data() + static_cast<std::size_t>(i) * d;
    double* dxi = dx.data() + static_cast<std::size_t>(i) * d;
    if (cfg.final_layer_norm) {
      layer_norm_backward(X(L, i), d, params.final_norm_gain.data(), dpd, dxi,
                          grads.final_norm_gain.data(), grads.final_norm_offset.data());
    } else {
      std::memcpy(dxi, dpd, sizeof(double) * d);
    }
  }

  Vec da(nd), dm_buf(nd), dsrc(d), dna(nd), dq(nd), dk(nd), dv(nd), dctx(nd);
  Vec dhact(dm), dhpre(dm), dmna(d);
  for (int l = L - 1; l >= 0; --l) {
    const LayerParams& lp = params.layers[l];
    LayerParams& gl = grads.layers[l];
    const std::size_t off = static_cast<std::size_t>(l) * nd;

    // x^{l+1} = x^l + a + m : pass dx through, branch into a and m.
    std::memcpy(da.data(), dx.data(), sizeof(double) * nd);
    std::memcpy(dm_buf.data(), dx.data(), sizeof(double) * nd);

    // MLP backward.
    for (int i = 0; i < n; ++i) {
      const double* ha = ws.hact.data() + (static_cast<std::size_t>(l) * n + i) * dm;
      const double* hp = ws.hpre.data() + (static_cast<std::size_t>(l) * n + i) * dm;
      const double* dmi = dm_buf.data() + static_cast<std::size_t>(i) * d;
      outer_acc(gl.w_mlp_out.a.data(), dm, d, ha, dmi);
      matvec_t(lp.w_mlp_out.a.data(), dm, d, dmi, dhact.data());
      for (int c = 0; c < dm; ++c) dhpre[c] = dhact[c] * gelu_grad(hp[c]);
      const double* na = ws.mna.data() + off + static_cast<std::size_t>(i) * d;
      outer_acc(gl.w_mlp_in.a.data(), d, dm, na, dhpre.data());
      matvec_t(lp.w_mlp_in.a.data(), d, dm, dhpre.data(), dmna.data());
      const double* src = ws.msrc.data() + off + static_cast<std::size_t>(i) * d;
      layer_norm_backward(src, d, lp.ln_mlp_gain.data(), dmna.data(), dsrc.data(),
                          gl.ln_mlp_gain.data(), gl.ln_mlp_offset.data());
      double* dxi = dx.data() + static_cast<std::size_t>(i) * d;
      if (cfg.wiring == Wiring::Parallel) {
        for (int c = 0; c < d; ++c) dxi[c] += dsrc[c];
      } else {
        double* dai = da.data() + static_cast<std::size_t>(i) * d;
        for (int c = 0; c < d; ++c) {
          dxi[c] += dsrc[c];
          dai[c] += dsrc[c];
        }
      }
    }

    // Attention output projection.
    std::fill(dctx.begin(), dctx.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const double* ci = ws.ctx.data() + off + static_cast<std::size_t>(i) * d;
      const double* dai = da.data() + static_cast<std::size_t>(i) * d;
      outer_acc(gl.w_out.a.data(), d, d, ci, dai);
      matvec_t(lp.w_out.a.data(), d, d, dai, dctx.data() + static_cast<std::size_t>(i) * d);
    }

    // Attention core.
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    Vec dprow(n), dscore(n);
    for (int i = 0; i < n; ++i) {
      for (int h = 0; h < H; ++h) {
        const double* prow = ws.probs.data() + ((static_cast<std::size_t>(l) * H + h) * n + i) * n;
        const double* dch = dctx.data() + static_cast<std::size_t>(i) * d + h * hd;
        for (int j = 0; j <= i; ++j) {
          const double* vh = ws.v.data() + off + static_cast<std::size_t>(j) * d + h * hd;
          dprow[j] = dot(dch, vh, hd);
          double* dvh = dv.data() + static_cast<std::size_t>(j) * d + h * hd;
          const double p = prow[j];
          for (int c = 0; c < hd; ++c) dvh[c] += p * dch[c];
        }
        double inner = 0.0;
        for (int j = 0; j <= i; ++j) inner += prow[j] * dprow[j];
        for (int j = 0; j <= i; ++j) dscore[j] = prow[j] * (dprow[j] - inner);
        double* dqh = dq.data() + static_cast<std::size_t>(i) * d + h * hd;
        const double* qh = ws.q.data() + off + static_cast<std::size_t>(i) * d + h * hd;
        for (int j = 0; j <= i; ++j) {
          const double g = dscore[j] * scale;
          const double* kh = ws.k.data() + off + static_cast<std::size_t>(j) * d + h * hd;
          double* dkh = dk.data() + static_cast<std::size_t>(j) * d + h * hd;
          for (int c = 0; c < hd; ++c) {
            dqh[c] += g * kh[c];
            dkh[c] += g * qh[c];
          }
        }
      }
    }

    // Q/K/V projections share the normed input.
    std::fill(dna.begin(), dna.end(), 0.0);
    Vec tmp(d);
    for (int i = 0; i < n; ++i) {
      const double* na = ws.na.data() + off + static_cast<std::size_t>(i) * d;
      double* dnai = dna.data() + static_cast<std::size_t>(i) * d;
      const double* dqi = dq.data() + static_cast<std::size_t>(i) * d;
      const double* dki = dk.data() + static_cast<std::size_t>(i) * d;
      const double* dvi = dv.data() + static_cast<std::size_t>(i) * d;
      outer_acc(gl.w_query.a.data(), d, d, na, dqi);
      outer_acc(gl.w_key.a.data(), d, d, na, dki);
      outer_acc(gl.w_value.a.data(), d, d, na, dvi);
      matvec_t(lp.w_query.a.data(), d, d, dqi, tmp.data());
      for (int c = 0; c < d; ++c) dnai[c] += tmp[c];
      matvec_t(lp.w_key.a.data(), d, d, dki, tmp.data());
      for (int c = 0; c < d; ++c) dnai[c] += tmp[c];
      matvec_t(lp.w_value.a.data(), d, d, dvi, tmp.data());
      for (int c = 0; c < d; ++c) dnai[c] += tmp[c];
    }
    for (int i = 0; i < n; ++i) {
      layer_norm_backward(X(l, i), d, lp.ln_attn_gain.data(),
                          dna.data() + static_cast<std::size_t>(i) * d, dsrc.data(),
                          gl.ln_attn_gain.data(), gl.ln_attn_offset.data());
      double* dxi = dx.data() + static_cast<std::size_t>(i) * d;
      for (int c = 0; c < d; ++c) dxi[c] += dsrc[c];
    }
  }

  // Embeddings.
  for (int i = 0; i < n; ++i) {
    const double* dxi = dx.data() + static_cast<std::size_t>(i) * d;
    double* gt = grads.token_embedding.row(tokens[i]);
    double* gp = grads.position_embedding.row(i);
    for (int c = 0; c < d; ++c) {
      gt[c] += dxi[c];
      gp[c] += dxi[c];
    }
  }
  return loss;
}

double batch_loss_and_grad(const Parameters& params, const std::vector<std::vector<int>>& docs,
                           ParamGrads& grads) {
  if (docs.empty()) throw InputError("empty batch");
  const int B = static_cast<int>(docs.size());
  std::vector<ParamGrads> slots(B);
  std::vector<double> losses(B, 0.0);
  par::for_n(B, [&](std::int64_t b) {
    slots[b].init_like(params);
    losses[b] = sequence_loss_and_grad(params, docs[b], slots[b]);
  });

  grads.init_like(params);
  grads.zero();
  std::vector<Vec*> acc = tensor_views(grads);
  const double inv = 1.0 / B;
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    loss += losses[b];
    std::vector<Vec*> src = tensor_views(slots[b]);
    for (std::size_t t = 0; t < acc.size(); ++t) {
      Vec& dst = *acc[t];
      const Vec& s = *src[t];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s[i] * inv;
    }
  }
  return loss * inv;
}

}  // namespace lrel
