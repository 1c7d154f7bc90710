#include "lrel/projection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "lrel/error.hpp"
#include "lrel/parallel.hpp"
#include "lrel/rng.hpp"

namespace lrel {

std::optional<Vec> gram_schmidt_step(const Vec& b_unit, const Vec& r) {
  const int d = static_cast<int>(b_unit.size());
  if (static_cast<int>(r.size()) != d) throw InputError("dimension mismatch in Gram-Schmidt");
  const double proj = dot(r.data(), b_unit.data(), d);
  Vec residual(d);
  for (int i = 0; i < d; ++i) residual[i] = r[i] - proj * b_unit[i];
  const double nrm = l2_norm(residual);
  if (nrm < 1e-8) return std::nullopt;
  for (double& x : residual) x /= nrm;
  return residual;
}

ProjectionBasis gs_basis(const Vec& b, std::uint64_t seed) {
  const int d = static_cast<int>(b.size());
  if (d < 2) throw InputError("projection basis needs dimension >= 2");
  const double bn = l2_norm(b);
  if (bn == 0.0) throw InputError("cannot build projection basis from the zero vector");

  ProjectionBasis basis;
  basis.seed = seed;
  basis.u1.resize(d);
  for (int i = 0; i < d; ++i) basis.u1[i] = b[i] / bn;

  Rng rng = subrng(seed, "gs-basis");
  for (int attempt = 0; attempt < 64; ++attempt) {
    Vec r(d);
    for (int i = 0; i < d; ++i) r[i] = rng.gaussian();
    if (const auto u2 = gram_schmidt_step(basis.u1, r)) {
      basis.u2 = *u2;
      return basis;
    }
  }
  throw NumericError("failed to draw a direction independent of b");
}

std::vector<std::pair<std::string, Point2>> project_states(
    const ProjectionBasis& basis, const std::vector<std::pair<std::string, Vec>>& states) {
  const int d = static_cast<int>(basis.u1.size());
  std::vector<std::pair<std::string, Point2>> out;
  out.reserve(states.size());
  for (const auto& [label, v] : states) {
    if (static_cast<int>(v.size()) != d) throw InputError("state dimension mismatch in projection");
    out.push_back({label, {dot(v.data(), basis.u1.data(), d), dot(v.data(), basis.u2.data(), d)}});
  }
  return out;
}

std::vector<BetaSweepPoint> beta_sweep(const Parameters& params, const Vocab& vocab,
                                       const RelationCategory& category,
                                       const RelationalOperator& affine_op,
                                       std::span<const RelationPair> test_pairs,
                                       std::span<const RelationPair> icl_pairs,
                                       const std::vector<double>& betas,
                                       std::uint64_t basis_seed) {
  if (affine_op.kind != OperatorKind::Affine)
    throw OperatorError("beta_sweep needs an affine operator");
  affine_op.validate();
  if (test_pairs.empty()) throw EvalError("beta_sweep: empty test set");
  for (const double b : betas)
    if (b <= 0.0) throw InputError("beta values must be positive");

  const int d = params.config.d_model;
  const ProjectionBasis basis = gs_basis(affine_op.b, basis_seed);

  struct PairState {
    Vec ws;  // W s, shared across betas
    Vec o;
    int model_pred = 0;
  };
  std::vector<PairState> states(test_pairs.size());
  par::for_n(static_cast<std::int64_t>(test_pairs.size()), [&](std::int64_t i) {
    const Prompt prompt = build_prompt(category, vocab, test_pairs[i].subject, icl_pairs);
    const ActivationTrace tr = forward_trace(params, prompt.tokens);
    const double* s = tr.x_at(affine_op.source_layer, prompt.subject_position);
    PairState& ps = states[i];
    ps.ws.resize(d);
    for (int r = 0; r < d; ++r) ps.ws[r] = dot(affine_op.W.row(r), s, d);
    const double* o = tr.x_at(params.config.n_layers, tr.n - 1);
    ps.o.assign(o, o + d);
    ps.model_pred = argmax_smallest(tr.logits);
  });

  std::vector<BetaSweepPoint> out;
  for (const double beta : betas) {
    BetaSweepPoint pt;
    pt.beta = beta;
    double proj_sum = 0.0, full_sum = 0.0;
    double c_approx[2] = {0.0, 0.0}, c_true[2] = {0.0, 0.0};
    int matched = 0;
    Vec approx(d);
    for (const PairState& ps : states) {
      for (int r = 0; r < d; ++r) approx[r] = beta * ps.ws[r] + affine_op.b[r];
      const double ax = dot(approx.data(), basis.u1.data(), d);
      const double ay = dot(approx.data(), basis.u2.data(), d);
      const double ox = dot(ps.o.data(), basis.u1.data(), d);
      const double oy = dot(ps.o.data(), basis.u2.data(), d);
      proj_sum += std::hypot(ax - ox, ay - oy);
      c_approx[0] += ax;
      c_approx[1] += ay;
      c_true[0] += ox;
      c_true[1] += oy;
      double fs = 0.0;
      for (int r = 0; r < d; ++r) {
        const double diff = approx[r] - ps.o[r];
        fs += diff * diff;
      }
      full_sum += std::sqrt(fs);
      if (decode_argmax(params, approx) == ps.model_pred) ++matched;
    }
    const double n = static_cast<double>(states.size());
    pt.mean_projected_distance = proj_sum / n;
    pt.centroid_projected_distance =
        std::hypot(c_approx[0] / n - c_true[0] / n, c_approx[1] / n - c_true[1] / n);
    pt.mean_full_distance = full_sum / n;
    pt.faithfulness = matched / n;
    out.push_back(pt);
  }
  return out;
}

double bias_concept_cosine(const RelationalOperator& op,
                           const RelationalOperator& translation_op) {
  if (op.b.empty()) throw OperatorError("first operator carries no additive term");
  if (translation_op.kind != OperatorKind::Translation)
    throw OperatorError("second operator must be a translation");
  const int d = static_cast<int>(op.b.size());
  if (static_cast<int>(translation_op.b.size()) != d)
    throw OperatorError("offset dimensions disagree");
  const double na = l2_norm(op.b);
  const double nb = l2_norm(translation_op.b);
  if (na == 0.0 || nb == 0.0) throw InputError("cosine undefined for a zero vector");
  return dot(op.b.data(), translation_op.b.data(), d) / (na * nb);
}

std::string scatter_svg(const std::vector<ScatterGroup>& groups, const std::string& title) {
  double xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;
  bool any = false;
  for (const ScatterGroup& g : groups)
    for (const Point2& p : g.points) {
      if (!any) {
        xmin = xmax = p[0];
        ymin = ymax = p[1];
        any = true;
      } else {
        xmin = std::min(xmin, p[0]);
        xmax = std::max(xmax, p[0]);
        ymin = std::min(ymin, p[1]);
        ymax = std::max(ymax, p[1]);
      }
    }
  const double xpad = (xmax - xmin) * 0.08 + 1e-9;
  const double ypad = (ymax - ymin) * 0.08 + 1e-9;
  xmin -= xpad;
  xmax += xpad;
  ymin -= ypad;
  ymax += ypad;

  const int W = 640, H = 640, margin = 40;
  auto sx = [&](double x) { return margin + (x - xmin) / (xmax - xmin) * (W - 2 * margin); };
  auto sy = [&](double y) { return H - margin - (y - ymin) / (ymax - ymin) * (H - 2 * margin); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << margin << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">"
      << title << "</text>\n";
  char buf[160];
  int legend_y = 44;
  for (const ScatterGroup& g : groups) {
    std::snprintf(buf, sizeof(buf),
                  "<circle cx=\"%d\" cy=\"%d\" r=\"4\" fill=\"%s\"/>", margin + 6, legend_y - 4,
                  g.color.c_str());
    svg << buf << "<text x=\"" << margin + 16 << "\" y=\"" << legend_y
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << g.label << "</text>\n";
    legend_y += 18;
  }
  for (const ScatterGroup& g : groups) {
    for (const Point2& p : g.points) {
      std::snprintf(buf, sizeof(buf), "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"%s\" fill-opacity=\"0.75\"/>\n",
                    sx(p[0]), sy(p[1]), g.color.c_str());
      svg << buf;
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace lrel
