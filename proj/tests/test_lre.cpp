#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "lrel/error.hpp"
#include "lrel/io.hpp"
#include "lrel/lre.hpp"
#include "support/hook_maps.hpp"
#include "support/reference_model.hpp"

using namespace lrel;
using lrel_test::AffineHookMap;

namespace {

std::vector<EstimationSample> hook_samples(const AffineHookMap& hook, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<EstimationSample> samples;
  for (int i = 0; i < n; ++i) {
    Vec s(hook.dim());
    for (double& x : s) x = rng.gaussian();
    samples.push_back({"sample-" + std::to_string(i), &hook, s});
  }
  return samples;
}

}  // namespace

TEST_CASE("estimating on an exactly affine map recovers it") {
  const AffineHookMap hook(12, 300);
  const OperatorSet set = estimate_operators(hook_samples(hook, 1, 301), 1.0, 0, "affine-oracle");

  // Held-out inputs reproduce F within 1e-8; beta = 1.
  Rng rng(302);
  for (int trial = 0; trial < 100; ++trial) {
    Vec s(12);
    for (double& x : s) x = rng.gaussian();
    const Vec via_op = apply_operator(set.affine, s);
    const Vec truth = hook.value(s);
    for (int i = 0; i < 12; ++i) CHECK(std::abs(via_op[i] - truth[i]) <= 1e-8);
  }
}

TEST_CASE("identical samples give exactly the single-sample Jacobian") {
  const AffineHookMap hook(8, 310);
  std::vector<EstimationSample> samples = hook_samples(hook, 1, 311);
  std::vector<EstimationSample> repeated;
  for (int i = 0; i < 8; ++i) {
    EstimationSample s = samples[0];
    s.id = "dup-" + std::to_string(i);
    repeated.push_back(s);
  }
  const OperatorSet one = estimate_operators(std::move(samples), 1.0, 0, "r");
  const OperatorSet eight = estimate_operators(std::move(repeated), 1.0, 0, "r");
  CHECK(one.affine.W.a == eight.affine.W.a);
  CHECK(one.affine.b == eight.affine.b);
}

TEST_CASE("estimation is invariant under sample permutation, bit for bit") {
  const AffineHookMap hook(10, 320);
  std::vector<EstimationSample> samples = hook_samples(hook, 6, 321);
  std::vector<EstimationSample> shuffled = samples;
  std::rotate(shuffled.begin(), shuffled.begin() + 3, shuffled.end());
  std::swap(shuffled[0], shuffled[4]);

  const OperatorSet a = estimate_operators(std::move(samples), 2.0, 1, "perm");
  const OperatorSet b = estimate_operators(std::move(shuffled), 2.0, 1, "perm");
  CHECK(a.affine.W.a == b.affine.W.a);
  CHECK(a.affine.b == b.affine.b);
  CHECK(a.translation.b == b.translation.b);
  CHECK(a.affine.sample_ids == b.affine.sample_ids);
}

TEST_CASE("empty sample set is an estimation error") {
  CHECK_THROWS_AS(estimate_operators({}, 1.0, 0, "none"), EstimationError);
}

TEST_CASE("apply: kinds, identities, and field validation") {
  const int d = 6;
  RelationalOperator linear;
  linear.kind = OperatorKind::Linear;
  linear.W = Mat(d, d);
  for (int i = 0; i < d; ++i) linear.W.at(i, i) = 1.0;
  linear.n_samples = 0;

  Vec s(d);
  Rng rng(7);
  for (double& x : s) x = rng.gaussian();
  CHECK(apply_operator(linear, s) == s);

  RelationalOperator bias;
  bias.kind = OperatorKind::Bias;
  bias.b.assign(d, 0.0);
  CHECK(apply_operator(bias, s) == s);

  RelationalOperator translation;
  translation.kind = OperatorKind::Translation;
  translation.b.assign(d, 0.25);
  const Vec shifted = apply_operator(translation, s);
  for (int i = 0; i < d; ++i) CHECK(shifted[i] == s[i] + 0.25);

  // Affine with beta = 1 equals Linear plus b.
  RelationalOperator affine;
  affine.kind = OperatorKind::Affine;
  affine.W = linear.W;
  affine.b.assign(d, 0.5);
  affine.beta = 1.0;
  const Vec via_affine = apply_operator(affine, s);
  const Vec via_linear = apply_operator(linear, s);
  for (int i = 0; i < d; ++i) CHECK(std::abs(via_affine[i] - (via_linear[i] + 0.5)) <= 1e-12);

  // Kind/field mismatches are operator errors.
  RelationalOperator broken = linear;
  broken.b.assign(d, 1.0);
  CHECK_THROWS_AS(apply_operator(broken, s), OperatorError);
  RelationalOperator no_w;
  no_w.kind = OperatorKind::Affine;
  no_w.b.assign(d, 1.0);
  CHECK_THROWS_AS(apply_operator(no_w, s), OperatorError);
  CHECK_THROWS_AS(apply_operator(linear, Vec(d + 1, 0.0)), OperatorError);
}

TEST_CASE("linear operator homogeneity") {
  const AffineHookMap hook(9, 330);
  const OperatorSet set = estimate_operators(hook_samples(hook, 4, 331), 1.0, 0, "homog");
  Rng rng(332);
  Vec s(9);
  for (double& x : s) x = rng.gaussian();

  // Powers of two scale exactly, bit for bit.
  for (const double alpha : {2.0, 0.5, 8.0}) {
    Vec scaled(9);
    for (int i = 0; i < 9; ++i) scaled[i] = alpha * s[i];
    const Vec a = apply_operator(set.linear, scaled);
    Vec b = apply_operator(set.linear, s);
    for (double& x : b) x *= alpha;
    CHECK(a == b);
  }
  // Arbitrary scalars within floating tolerance.
  const double alpha = 1.7;
  Vec scaled(9);
  for (int i = 0; i < 9; ++i) scaled[i] = alpha * s[i];
  const Vec a = apply_operator(set.linear, scaled);
  const Vec b = apply_operator(set.linear, s);
  for (int i = 0; i < 9; ++i) CHECK(std::abs(a[i] - alpha * b[i]) <= 1e-12 * std::abs(a[i]) + 1e-12);
}

TEST_CASE("operator files round trip bit-identically and reject mismatches") {
  const AffineHookMap hook(7, 340);
  const OperatorSet set = estimate_operators(hook_samples(hook, 3, 341), 5.0, 2, "io-test");
  const std::string path =
      (std::filesystem::temp_directory_path() / "lrel_op_test.lrel").string();

  for (const RelationalOperator* op :
       {&set.affine, &set.linear, &set.bias, &set.translation}) {
    save_operator(path, *op);
    const RelationalOperator back = load_operator(path);
    CHECK(back.kind == op->kind);
    CHECK(back.W.a == op->W.a);
    CHECK(back.b == op->b);
    CHECK(back.beta == op->beta);
    CHECK(back.source_layer == op->source_layer);
    CHECK(back.relation_id == op->relation_id);
    CHECK(back.sample_ids == op->sample_ids);
  }

  // Truncation leaves no partial operator.
  save_operator(path, set.affine);
  const std::string bytes = read_file(path);
  write_file_atomic(path, bytes.substr(0, bytes.size() - 5));
  CHECK_THROWS_AS(load_operator(path), FormatError);

  // Dimension mismatch against the model is named.
  write_file_atomic(path, bytes);
  try {
    load_operator(path, 64);
    CHECK(false);
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("7") != std::string::npos);
    CHECK(msg.find("64") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("estimate_from_model produces applicable operators on a tiny model") {
  const SyntheticData d = [] {
    SyntheticSpec spec;
    spec.n_stems = 16;
    spec.arbitrary_targets = 4;
    spec.held_out_fraction = 0.0;
    spec.n_docs = 10;
    spec.lines_per_doc = 3;
    return generate_synthetic(spec, 50);
  }();
  ModelConfig cfg = lrel_test::small_config(16, 2, 2, d.vocab.size(), 48, 51);
  const Parameters params = build_model(cfg);
  const RelationCategory& cat = d.categories[0];
  auto [train, test] = split_pairs(cat, 4, 3);

  const OperatorSet set = estimate_from_model(params, d.vocab, cat, train, 1, 7.0);
  CHECK(set.affine.n_samples == 4);
  CHECK(set.affine.beta == 7.0);
  CHECK(set.affine.source_layer == 1);
  CHECK(std::is_sorted(set.affine.sample_ids.begin(), set.affine.sample_ids.end()));

  const Prompt prompt = build_prompt(cat, d.vocab, test[0].subject,
                                     std::span<const RelationPair>(train));
  const ActivationTrace tr = forward_trace(params, prompt.tokens);
  const Vec s(tr.x_at(1, prompt.subject_position), tr.x_at(1, prompt.subject_position) + 16);
  for (const OperatorKind kind : {OperatorKind::Affine, OperatorKind::Linear, OperatorKind::Bias,
                                  OperatorKind::Translation}) {
    const Vec out = apply_operator(select_kind(set, kind), s);
    CHECK(all_finite(out));
  }

  CHECK_THROWS_AS(estimate_from_model(params, d.vocab, cat, {}, 1, 1.0), EstimationError);
}
