#include "lrel/lre.hpp"

#include <algorithm>
#include <memory>

#include "lrel/checkpoint.hpp"
#include "lrel/error.hpp"
#include "lrel/parallel.hpp"

namespace lrel {

std::string kind_name(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::Affine: return "affine";
    case OperatorKind::Linear: return "linear";
    case OperatorKind::Bias: return "bias";
    case OperatorKind::Translation: return "translation";
  }
  return "unknown";
}

OperatorKind kind_from_name(const std::string& name) {
  if (name == "affine") return OperatorKind::Affine;
  if (name == "linear") return OperatorKind::Linear;
  if (name == "bias") return OperatorKind::Bias;
  if (name == "translation") return OperatorKind::Translation;
  throw OperatorError("unknown operator kind '" + name + "'");
}

void RelationalOperator::validate() const {
  const bool has_w = !W.empty();
  const bool has_b = !b.empty();
  switch (kind) {
    case OperatorKind::Affine:
      if (!has_w || !has_b) throw OperatorError("affine operator needs both W and b");
      if (beta <= 0.0) throw OperatorError("affine beta must be positive");
      break;
    case OperatorKind::Linear:
      if (!has_w) throw OperatorError("linear operator needs W");
      if (has_b) throw OperatorError("linear operator must not carry an additive term");
      break;
    case OperatorKind::Bias:
    case OperatorKind::Translation:
      if (!has_b) throw OperatorError(kind_name(kind) + " operator needs b");
      if (has_w)
        throw OperatorError(kind_name(kind) + " operator must not carry a multiplicative term");
      break;
  }
  if (has_w && W.rows != W.cols) throw OperatorError("W must be square");
  if (has_w && has_b && W.rows != static_cast<int>(b.size()))
    throw OperatorError("W and b dimensions disagree");
  if (n_samples != static_cast<int>(sample_ids.size()))
    throw OperatorError("n_samples does not match sample_ids");
}

OperatorSet estimate_operators(std::vector<EstimationSample> samples, double beta,
                               int source_layer, const std::string& relation_id) {
  if (samples.empty()) throw EstimationError("no estimation samples for " + relation_id);
  std::sort(samples.begin(), samples.end(),
            [](const EstimationSample& a, const EstimationSample& b) { return a.id < b.id; });

  const int d = samples.front().map->dim();
  const int n = static_cast<int>(samples.size());

  std::vector<Mat> w_i(n);
  std::vector<Vec> f_i(n);
  std::vector<std::string> errors(n);
  par::for_n(n, [&](std::int64_t i) {
    try {
      JacobianResult jr = jacobian(*samples[i].map, samples[i].s, JacobianMethod::ForwardMode);
      w_i[i] = std::move(jr.W);
      f_i[i] = std::move(jr.value);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (int i = 0; i < n; ++i)
    if (!errors[i].empty())
      throw NumericError("sample '" + samples[i].id + "': " + errors[i]);

  // Per-sample offset contributions; b uses each sample's own Jacobian:
  // F(s_i) - W_i s_i.
  std::vector<Vec> b_i(n, Vec(d)), t_i(n, Vec(d));
  for (int i = 0; i < n; ++i) {
    for (int r = 0; r < d; ++r) {
      const double ws = dot(w_i[i].row(r), samples[i].s.data(), d);
      b_i[i][r] = f_i[i][r] - ws;
      t_i[i][r] = f_i[i][r] - samples[i].s[r];
    }
  }

  // Pairwise tree reduction: deterministic, and exact when all terms are
  // equal and n is a power of two (the n = 8 default).
  const auto reduce = [](auto&& self, std::vector<Vec>& terms, int lo, int hi) -> Vec {
    if (hi - lo == 1) return std::move(terms[lo]);
    const int mid = lo + (hi - lo) / 2;
    Vec left = self(self, terms, lo, mid);
    const Vec right = self(self, terms, mid, hi);
    for (std::size_t e = 0; e < left.size(); ++e) left[e] += right[e];
    return left;
  };

  std::vector<Vec> w_terms(n);
  for (int i = 0; i < n; ++i) w_terms[i] = std::move(w_i[i].a);
  Mat w_mean(d, d);
  w_mean.a = reduce(reduce, w_terms, 0, n);
  for (double& e : w_mean.a) e /= n;
  Vec b_mean = reduce(reduce, b_i, 0, n);
  Vec tr_mean = reduce(reduce, t_i, 0, n);
  for (int r = 0; r < d; ++r) {
    b_mean[r] /= n;
    tr_mean[r] /= n;
  }

  std::vector<std::string> ids;
  for (const EstimationSample& s : samples) ids.push_back(s.id);

  OperatorSet set;
  set.affine = {OperatorKind::Affine, w_mean, b_mean, beta, source_layer, relation_id, n, ids};
  set.linear = {OperatorKind::Linear, w_mean, {}, 1.0, source_layer, relation_id, n, ids};
  set.bias = {OperatorKind::Bias, {}, b_mean, 1.0, source_layer, relation_id, n, ids};
  set.translation = {OperatorKind::Translation, {}, tr_mean, 1.0, source_layer, relation_id, n,
                     ids};
  return set;
}

const RelationalOperator& select_kind(const OperatorSet& set, OperatorKind kind) {
  switch (kind) {
    case OperatorKind::Affine: return set.affine;
    case OperatorKind::Linear: return set.linear;
    case OperatorKind::Bias: return set.bias;
    case OperatorKind::Translation: return set.translation;
  }
  throw OperatorError("unknown operator kind");
}

OperatorSet estimate_from_model(const Parameters& params, const Vocab& vocab,
                                const RelationCategory& category,
                                const std::vector<RelationPair>& train_pairs, int source_layer,
                                double beta) {
  if (train_pairs.empty()) throw EstimationError("empty train_pairs for " + category.id);

  const int n = static_cast<int>(train_pairs.size());
  std::vector<std::unique_ptr<SubjectObjectMap>> maps(n);
  std::vector<std::string> errors(n);
  par::for_n(n, [&](std::int64_t i) {
    try {
      std::vector<RelationPair> icl;
      for (int k = 0; k < n; ++k)
        if (k != i) icl.push_back(train_pairs[k]);
      const Prompt prompt = build_prompt(category, vocab, train_pairs[i].subject, icl);
      maps[i] = std::make_unique<SubjectObjectMap>(params, prompt.tokens, prompt.subject_position,
                                                   source_layer);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (int i = 0; i < n; ++i)
    if (!errors[i].empty())
      throw EstimationError("sample '" + train_pairs[i].subject + "': " + errors[i]);

  std::vector<EstimationSample> samples;
  for (int i = 0; i < n; ++i)
    samples.push_back({train_pairs[i].subject, maps[i].get(), maps[i]->base_state()});
  return estimate_operators(std::move(samples), beta, source_layer, category.id);
}

RelationalOperator estimate(const Parameters& params, const Vocab& vocab,
                            const RelationCategory& category,
                            const std::vector<RelationPair>& train_pairs, int source_layer,
                            OperatorKind kind, double beta) {
  return select_kind(estimate_from_model(params, vocab, category, train_pairs, source_layer, beta),
                     kind);
}

Vec apply_operator(const RelationalOperator& op, const Vec& s) {
  op.validate();
  const int d = !op.W.empty() ? op.W.rows : static_cast<int>(op.b.size());
  if (static_cast<int>(s.size()) != d)
    throw OperatorError("state length " + std::to_string(s.size()) + " != operator dimension " +
                        std::to_string(d));

  Vec out(d, 0.0);
  switch (op.kind) {
    case OperatorKind::Affine:
      for (int r = 0; r < d; ++r) out[r] = op.beta * dot(op.W.row(r), s.data(), d) + op.b[r];
      break;
    case OperatorKind::Linear:
      for (int r = 0; r < d; ++r) out[r] = dot(op.W.row(r), s.data(), d);
      break;
    case OperatorKind::Bias:
    case OperatorKind::Translation:
      for (int r = 0; r < d; ++r) out[r] = s[r] + op.b[r];
      break;
  }
  return out;
}

void save_operator(const std::string& path, const RelationalOperator& op) {
  op.validate();
  const int d = !op.W.empty() ? op.W.rows : static_cast<int>(op.b.size());
  nlohmann::json header{{"kind", "operator"},
                        {"op_kind", kind_name(op.kind)},
                        {"relation_id", op.relation_id},
                        {"source_layer", op.source_layer},
                        {"beta", op.beta},
                        {"n_samples", op.n_samples},
                        {"sample_ids", op.sample_ids},
                        {"d", d}};
  std::vector<TensorRef> refs;
  if (!op.W.empty()) refs.push_back({"W", {d, d}, op.W.a.data()});
  if (!op.b.empty())
    refs.push_back({op.kind == OperatorKind::Translation ? "b_translation" : "b", {d},
                    op.b.data()});
  write_container(path, std::move(header), refs);
}

RelationalOperator load_operator(const std::string& path, int expected_d) {
  LoadedContainer lc = read_container(path);
  if (lc.header.value("kind", "") != "operator")
    throw FormatError("container at " + path + " is not an operator file");

  RelationalOperator op;
  try {
    op.kind = kind_from_name(lc.header.at("op_kind").get<std::string>());
    op.relation_id = lc.header.at("relation_id").get<std::string>();
    op.source_layer = lc.header.at("source_layer").get<int>();
    op.beta = lc.header.at("beta").get<double>();
    op.n_samples = lc.header.at("n_samples").get<int>();
    op.sample_ids = lc.header.at("sample_ids").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("invalid operator header: " + std::string(e.what()));
  }
  const int d = lc.header.at("d").get<int>();
  if (expected_d >= 0 && d != expected_d)
    throw FormatError("operator dimension " + std::to_string(d) + " does not match model d_model " +
                      std::to_string(expected_d));

  const bool wants_w = op.kind == OperatorKind::Affine || op.kind == OperatorKind::Linear;
  const bool wants_b = op.kind != OperatorKind::Linear;
  const std::string b_name = op.kind == OperatorKind::Translation ? "b_translation" : "b";
  if (wants_w) {
    auto it = lc.tensors.find("W");
    if (it == lc.tensors.end()) throw FormatError("operator file missing W");
    if (it->second.shape != std::vector<int>{d, d}) throw FormatError("W shape mismatch");
    op.W = Mat(d, d);
    op.W.a = std::move(it->second.values);
  }
  if (wants_b) {
    auto it = lc.tensors.find(b_name);
    if (it == lc.tensors.end()) throw FormatError("operator file missing " + b_name);
    if (it->second.shape != std::vector<int>{d}) throw FormatError(b_name + " shape mismatch");
    op.b = std::move(it->second.values);
  }
  op.validate();
  return op;
}

}  // namespace lrel
