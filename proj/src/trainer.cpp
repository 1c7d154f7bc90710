#include "lrel/trainer.hpp"

#include <cmath>
#include <cstdio>

#include "lrel/diff.hpp"
#include "lrel/error.hpp"
#include "lrel/parallel.hpp"
#include "lrel/rng.hpp"

namespace lrel {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (beta1 <= 0.0 || beta1 >= 1.0) throw ConfigError("beta1 must be in (0, 1)");
  if (beta2 <= 0.0 || beta2 >= 1.0) throw ConfigError("beta2 must be in (0, 1)");
  if (eps <= 0.0) throw ConfigError("eps must be positive");
  if (grad_clip <= 0.0) throw ConfigError("grad_clip must be positive");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

TrainResult train(Parameters params, const std::vector<std::vector<int>>& docs,
                  const TrainConfig& config) {
  config.validate();
  if (docs.empty()) throw TrainError("empty training corpus");

  TrainResult result;
  if (config.steps == 0) {
    result.params = std::move(params);
    return result;
  }

  ParamGrads grads, m_state, v_state;
  grads.init_like(params);
  m_state.init_like(params);
  v_state.init_like(params);

  std::vector<Vec*> pview = tensor_views(params);
  std::vector<Vec*> gview = tensor_views(grads);
  std::vector<Vec*> mview = tensor_views(m_state);
  std::vector<Vec*> vview = tensor_views(v_state);

  Rng batch_rng = subrng(config.seed, "batches");

  for (int step = 1; step <= config.steps; ++step) {
    std::vector<std::vector<int>> batch(config.batch_size);
    for (int b = 0; b < config.batch_size; ++b)
      batch[b] = docs[batch_rng.below(docs.size())];

    const double loss = batch_loss_and_grad(params, batch, grads);
    if (!std::isfinite(loss))
      throw TrainError("training diverged: non-finite loss at step " + std::to_string(step));

    // Global-norm gradient clip.
    double sq = 0.0;
    for (Vec* g : gview)
      for (const double x : *g) sq += x * x;
    const double norm = std::sqrt(sq);
    const double scale = norm > config.grad_clip ? config.grad_clip / norm : 1.0;

    const double bc1 = 1.0 - std::pow(config.beta1, step);
    const double bc2 = 1.0 - std::pow(config.beta2, step);
    for (std::size_t t = 0; t < pview.size(); ++t) {
      Vec& p = *pview[t];
      Vec& g = *gview[t];
      Vec& m = *mview[t];
      Vec& v = *vview[t];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * scale;
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= config.learning_rate * mhat / (std::sqrt(vhat) + config.eps);
      }
    }

    if (step == 1 || step % config.eval_every == 0 || step == config.steps) {
      std::vector<double> doc_acc(batch.size(), 0.0);
      par::for_n(static_cast<std::int64_t>(batch.size()), [&](std::int64_t b) {
        doc_acc[b] = sequence_token_accuracy(params, batch[b]);
      });
      double acc = 0.0;
      for (const double a : doc_acc) acc += a;
      result.curve.push_back({step, loss, acc / batch.size()});
    }
  }

  result.params = std::move(params);
  return result;
}

double lm_accuracy(const Parameters& params, const Vocab& vocab, const RelationCategory& category,
                   std::span<const RelationPair> pairs, std::span<const RelationPair> icl_pairs) {
  if (pairs.empty()) throw InputError("lm_accuracy: empty pair list");

  std::vector<char> hit(pairs.size(), 0);
  par::for_n(static_cast<std::int64_t>(pairs.size()), [&](std::int64_t i) {
    const Prompt prompt = build_prompt(category, vocab, pairs[i].subject, icl_pairs);
    const int predicted = predict_next(params, prompt.tokens);
    for (const std::string& obj : pairs[i].objects) {
      const std::vector<std::string> words = split_words(obj);
      if (!words.empty() && vocab.contains(words.front()) &&
          vocab.id_of(words.front()) == predicted) {
        hit[i] = 1;
        break;
      }
    }
  });

  double n_hit = 0.0;
  for (const char h : hit) n_hit += h;
  return n_hit / static_cast<double>(pairs.size());
}

std::vector<std::vector<int>> docs_from_corpus(const std::vector<std::string>& lines,
                                               const Vocab& vocab, int lines_per_doc) {
  if (lines_per_doc < 1) throw ConfigError("lines_per_doc must be >= 1");
  std::vector<std::vector<int>> docs;
  const std::size_t n_docs = lines.size() / lines_per_doc;
  for (std::size_t doc = 0; doc < n_docs; ++doc) {
    std::vector<int> tokens;
    for (int ln = 0; ln < lines_per_doc; ++ln) {
      if (ln) tokens.push_back(Vocab::kNewline);
      for (const std::string& w : split_words(lines[doc * lines_per_doc + ln]))
        tokens.push_back(vocab.id_of(w));
    }
    docs.push_back(std::move(tokens));
  }
  return docs;
}

std::string loss_curve_csv(const std::vector<TrainPoint>& curve) {
  std::string out = "step,loss,accuracy\n";
  char buf[96];
  for (const TrainPoint& p : curve) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", p.step, p.loss, p.accuracy);
    out += buf;
  }
  return out;
}

}  // namespace lrel
