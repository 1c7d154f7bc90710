#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lrel/lre.hpp"
#include "lrel/model.hpp"
#include "lrel/relations.hpp"
#include "lrel/tensor.hpp"

namespace lrel {

struct ProjectionBasis {
  Vec u1;  // normalized b
  Vec u2;  // random unit vector orthogonalized to u1
  std::uint64_t seed = 0;
};

// Returns the orthonormal completion of b_unit against r, or nothing when r
// is too close to parallel (residual norm < 1e-8).
std::optional<Vec> gram_schmidt_step(const Vec& b_unit, const Vec& r);

// u1 = b/||b||; u2 from a seeded random direction, resampled on degeneracy.
ProjectionBasis gs_basis(const Vec& b, std::uint64_t seed);

using Point2 = std::array<double, 2>;

std::vector<std::pair<std::string, Point2>> project_states(
    const ProjectionBasis& basis, const std::vector<std::pair<std::string, Vec>>& states);

struct BetaSweepPoint {
  double beta = 0.0;
  double mean_projected_distance = 0.0;      // per-pair mean in the 2-D plane
  double centroid_projected_distance = 0.0;  // distance between cloud centroids
  double mean_full_distance = 0.0;           // full d-dimensional distance
  double faithfulness = 0.0;
};

// Applies beta * W s + b at each beta and compares against the model's own
// object states, in the plane spanned by {b, random orthogonal}.
std::vector<BetaSweepPoint> beta_sweep(const Parameters& params, const Vocab& vocab,
                                       const RelationCategory& category,
                                       const RelationalOperator& affine_op,
                                       std::span<const RelationPair> test_pairs,
                                       std::span<const RelationPair> icl_pairs,
                                       const std::vector<double>& betas,
                                       std::uint64_t basis_seed);

// Cosine between the Jacobian-based offset and the mean object-minus-subject
// offset.
double bias_concept_cosine(const RelationalOperator& op,
                           const RelationalOperator& translation_op);

struct ScatterGroup {
  std::string label;
  std::string color;
  std::vector<Point2> points;
};

std::string scatter_svg(const std::vector<ScatterGroup>& groups, const std::string& title);

}  // namespace lrel
