#include <doctest.h>

#include <cmath>
#include <limits>
#include <memory>

#include "lrel/diff.hpp"
#include "lrel/error.hpp"
#include "support/hook_maps.hpp"
#include "support/reference_model.hpp"

using namespace lrel;
using lrel_test::AffineHookMap;
using lrel_test::SquareHookMap;
using lrel_test::max_rel_error;
using lrel_test::random_unit;
using lrel_test::small_config;
using lrel_test::random_tokens;

namespace {

SubjectObjectMap random_map(int d, int layers, int heads, int vocab, int n, int p, int j,
                            std::uint64_t seed, Wiring wiring = Wiring::Parallel) {
  ModelConfig cfg = small_config(d, layers, heads, vocab, n + 2, seed);
  cfg.wiring = wiring;
  static std::vector<std::unique_ptr<Parameters>> keep_alive;
  keep_alive.push_back(std::make_unique<Parameters>(build_model(cfg)));
  return make_map(*keep_alive.back(), random_tokens(n, vocab, seed + 1), p, j);
}

}  // namespace

TEST_CASE("identity map: source layer L at the last position") {
  const SubjectObjectMap map = random_map(12, 2, 2, 30, 9, 8, 2, 10);
  Vec s(12);
  Rng rng(4);
  for (double& x : s) x = rng.gaussian();
  const JacobianResult jr = jacobian(map, s, JacobianMethod::ForwardMode);
  CHECK(jr.value == s);
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 12; ++c) CHECK(jr.W.at(r, c) == (r == c ? 1.0 : 0.0));
}

TEST_CASE("evaluating at the base state reproduces the clean run exactly") {
  for (const int j : {0, 1, 2}) {
    for (const int p : {3, 6}) {
      const SubjectObjectMap map = random_map(16, 2, 2, 40, 7, p, j, 20 + j + p);
      const Vec out = map.value(map.base_state());
      CHECK(out == map.clean_final());
      const JacobianResult jr = jacobian(map, map.base_state(), JacobianMethod::ForwardMode);
      CHECK(jr.value == map.clean_final());
    }
  }
}

TEST_CASE("patched evaluation matches the independent patched oracle") {
  for (const Wiring wiring : {Wiring::Parallel, Wiring::Sequential}) {
    ModelConfig cfg = small_config(12, 3, 2, 24, 10, 33);
    cfg.wiring = wiring;
    const Parameters params = build_model(cfg);
    const std::vector<int> tokens = random_tokens(8, cfg.vocab_size, 9);
    const int p = 3, j = 1;
    const SubjectObjectMap map = make_map(params, tokens, p, j);

    Vec s = map.base_state();
    Rng rng(77);
    for (double& x : s) x += 0.3 * rng.gaussian();

    const Vec got = map.value(s);
    const auto ref = lrel_test::ref_forward(params, tokens, lrel_test::RefPatch{j, p, s});
    for (int c = 0; c < cfg.d_model; ++c)
      CHECK(std::abs(got[c] - ref.x[cfg.n_layers][7][c]) <= 1e-6);
  }
}

TEST_CASE("perturbing the subject state moves the output") {
  const SubjectObjectMap map = random_map(16, 2, 2, 40, 9, 4, 1, 55);
  Vec s = map.base_state();
  s[0] += 0.1;
  const Vec out = map.value(s);
  double diff = 0.0;
  for (int c = 0; c < 16; ++c) diff += std::abs(out[c] - map.clean_final()[c]);
  CHECK(diff > 1e-8);
}

TEST_CASE("jvp: zero tangent, linearity, and the finite-difference oracle") {
  const SubjectObjectMap map = random_map(16, 2, 2, 40, 8, 7, 1, 60);
  const Vec s = map.base_state();

  const Vec zero(16, 0.0);
  CHECK(jvp(map, s, zero) == zero);

  Rng rng(8);
  Vec u(16), v(16);
  for (double& x : u) x = rng.gaussian();
  for (double& x : v) x = rng.gaussian();
  const double alpha = 0.7, beta = -1.3;
  Vec combo(16);
  for (int i = 0; i < 16; ++i) combo[i] = alpha * u[i] + beta * v[i];
  const Vec lhs = jvp(map, s, combo);
  const Vec ju = jvp(map, s, u);
  const Vec jv_ = jvp(map, s, v);
  for (int i = 0; i < 16; ++i)
    CHECK(std::abs(lhs[i] - (alpha * ju[i] + beta * jv_[i])) <= 1e-9);

  // Central differences along a random direction.
  const Vec dir = random_unit(16, 5);
  const Vec jd = jvp(map, s, dir);
  const double h = 1e-5;
  Vec sp = s, sm = s;
  for (int i = 0; i < 16; ++i) {
    sp[i] = s[i] + h * dir[i];
    sm[i] = s[i] - h * dir[i];
  }
  const Vec fp = map.value(sp);
  const Vec fm = map.value(sm);
  double scale = 0.0;
  for (int i = 0; i < 16; ++i) scale = std::max(scale, std::abs(jd[i]));
  for (int i = 0; i < 16; ++i) {
    const double fd = (fp[i] - fm[i]) / (2.0 * h);
    CHECK(std::abs(jd[i] - fd) <= 1e-6 * std::max(1.0, scale));
  }
}

TEST_CASE("jacobian of a purely linear map recovers the matrix exactly") {
  const AffineHookMap hook(10, 42);
  Vec s(10);
  Rng rng(43);
  for (double& x : s) x = rng.gaussian();
  const JacobianResult jr = jacobian(hook, s, JacobianMethod::ForwardMode);
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 10; ++c) CHECK(std::abs(jr.W.at(r, c) - hook.A.at(r, c)) <= 1e-10);
}

TEST_CASE("elementwise square hook has diagonal Jacobian") {
  const SquareHookMap hook(2);
  const Vec s = {1.0, 2.0};
  const JacobianResult jr = jacobian(hook, s, JacobianMethod::ForwardMode);
  CHECK(std::abs(jr.W.at(0, 0) - 2.0) <= 1e-8);
  CHECK(std::abs(jr.W.at(1, 1) - 4.0) <= 1e-8);
  CHECK(std::abs(jr.W.at(0, 1)) <= 1e-12);
  CHECK(std::abs(jr.W.at(1, 0)) <= 1e-12);
  CHECK(jr.value == Vec{1.0, 4.0});
}

TEST_CASE("forward mode matches finite differences on a random model") {
  const SubjectObjectMap map = random_map(16, 2, 2, 40, 9, 8, 1, 70);
  const Vec s = map.base_state();
  const JacobianResult fm = jacobian(map, s, JacobianMethod::ForwardMode);
  const JacobianResult fd = jacobian(map, s, JacobianMethod::FiniteDifference);
  CHECK(fm.method == JacobianMethod::ForwardMode);
  CHECK(fd.method == JacobianMethod::FiniteDifference);
  CHECK(max_rel_error(fm.W, fd.W) <= 1e-3);
}

TEST_CASE("forward-mode columns equal single-tangent jvp calls exactly") {
  const SubjectObjectMap map = random_map(12, 2, 2, 30, 7, 6, 1, 80);
  const Vec s = map.base_state();
  const JacobianResult jr = jacobian(map, s, JacobianMethod::ForwardMode);
  for (const int i : {0, 3, 11}) {
    Vec e(12, 0.0);
    e[i] = 1.0;
    const Vec col = jvp(map, s, e);
    for (int r = 0; r < 12; ++r) CHECK(jr.W.at(r, i) == col[r]);
  }
}

TEST_CASE("taylor remainders vanish on linear maps and at zero step") {
  const AffineHookMap hook(8, 90);
  Vec s0(8, 0.5);
  const Vec v = random_unit(8, 91);
  const std::vector<double> rems = taylor_remainder(hook, s0, v, {1e-1, 1e-2, 0.0});
  CHECK(rems[0] <= 1e-10);
  CHECK(rems[1] <= 1e-10);
  CHECK(rems[2] == 0.0);
}

TEST_CASE("taylor remainder decays quadratically on a smooth model") {
  const SubjectObjectMap map = random_map(16, 2, 2, 40, 8, 7, 1, 95);
  const Vec s0 = map.base_state();
  int in_range = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const Vec v = random_unit(16, 200 + trial);
    const std::vector<double> rems = taylor_remainder(map, s0, v, {1e-2, 5e-3});
    if (rems[1] > 0.0) {
      const double ratio = rems[0] / rems[1];
      if (ratio >= 3.5 && ratio <= 4.5) ++in_range;
    }
  }
  CHECK(in_range >= 8);
}

TEST_CASE("taylor_remainder validates its inputs") {
  const AffineHookMap hook(8, 13);
  const Vec s0(8, 0.0);
  Vec not_unit(8, 1.0);
  CHECK_THROWS_AS(taylor_remainder(hook, s0, not_unit, {1e-2}), InputError);
  const Vec v = random_unit(8, 14);
  CHECK_THROWS_AS(taylor_remainder(hook, s0, v, {1e-3, 1e-2}), InputError);
  CHECK_THROWS_AS(taylor_remainder(hook, s0, v, {-1e-3}), InputError);
}

TEST_CASE("make_map rejects bad indices and non-finite states") {
  ModelConfig cfg = small_config(12, 2, 2, 24, 8, 5);
  const Parameters params = build_model(cfg);
  const std::vector<int> tokens = random_tokens(6, cfg.vocab_size, 2);
  CHECK_THROWS_AS(make_map(params, tokens, 6, 1), InputError);
  CHECK_THROWS_AS(make_map(params, tokens, -1, 1), InputError);
  CHECK_THROWS_AS(make_map(params, tokens, 2, 3), InputError);
  CHECK_THROWS_AS(make_map(params, tokens, 2, -1), InputError);

  const SubjectObjectMap map = make_map(params, tokens, 2, 1);
  Vec bad(12, 0.0);
  bad[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(map.value(bad), InputError);
  CHECK_THROWS_AS(jvp(map, map.base_state(), bad), InputError);
}
