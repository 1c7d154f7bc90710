// Compares the serial reference path against the OpenMP path on the hot
// kernels: forward traces, Jacobian assembly, and operator estimation.

#include <chrono>
#include <cstdio>
#include <vector>

#include "lrel/diff.hpp"
#include "lrel/lre.hpp"
#include "lrel/model.hpp"
#include "lrel/parallel.hpp"
#include "lrel/rng.hpp"

using Clock = std::chrono::steady_clock;

namespace {

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct Case {
  lrel::Parameters params;
  std::vector<int> prompt;
};

Case make_case(int d, int layers, int heads, int vocab, int seq) {
  lrel::ModelConfig cfg;
  cfg.d_model = d;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.d_head = d / heads;
  cfg.d_mlp = 4 * d;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = seq;
  cfg.seed = 17;
  Case c{lrel::build_model(cfg), {}};
  lrel::Rng rng(3);
  for (int i = 0; i < seq; ++i) c.prompt.push_back(static_cast<int>(rng.below(vocab)));
  return c;
}

template <class F>
double timed(F&& f, int reps) {
  const auto t0 = Clock::now();
  for (int r = 0; r < reps; ++r) f();
  return ms_since(t0) / reps;
}

}  // namespace

int main() {
  const int max_workers = lrel::par::openmp_compiled() ? lrel::par::workers() : 1;
  std::printf("openmp=%s workers=%d\n", lrel::par::openmp_compiled() ? "yes" : "no", max_workers);
  std::printf("%-28s %12s %12s %8s\n", "kernel", "serial(ms)", "parallel(ms)", "speedup");

  Case c = make_case(64, 4, 4, 512, 40);
  const lrel::SubjectObjectMap map =
      lrel::make_map(c.params, c.prompt, static_cast<int>(c.prompt.size()) - 1, 2);
  const lrel::Vec s0 = map.base_state();

  auto bench = [&](const char* name, auto&& fn, int reps) {
    lrel::par::set_workers(1);
    const double serial = timed(fn, reps);
    lrel::par::set_workers(max_workers);
    const double parallel = timed(fn, reps);
    std::printf("%-28s %12.2f %12.2f %7.2fx\n", name, serial, parallel, serial / parallel);
  };

  bench("forward_trace (n=40)", [&] { lrel::forward_trace(c.params, c.prompt); }, 20);
  bench("jacobian forward-mode d=64",
        [&] { lrel::jacobian(map, s0, lrel::JacobianMethod::ForwardMode); }, 5);
  bench("jacobian finite-diff d=64",
        [&] { lrel::jacobian(map, s0, lrel::JacobianMethod::FiniteDifference); }, 2);

  std::vector<std::vector<int>> batch(8, c.prompt);
  lrel::ParamGrads grads;
  bench("batch_loss_and_grad B=8", [&] { lrel::batch_loss_and_grad(c.params, batch, grads); }, 3);

  lrel::par::set_workers(max_workers);
  return 0;
}
