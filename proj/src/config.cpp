#include "lrel/config.hpp"

#include "lrel/checkpoint.hpp"
#include "lrel/error.hpp"
#include "lrel/io.hpp"

namespace lrel {

namespace {

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  if (data.kind != "synthetic" && data.kind != "bats")
    throw ConfigError("data.kind must be 'synthetic' or 'bats', got '" + data.kind + "'");
  if (data.kind == "bats" && data.bats_path.empty())
    throw ConfigError("data.kind 'bats' needs data.path");
  if (data.kind == "synthetic") data.synthetic.validate();
  train.validate();
  if (lre.beta <= 0.0) throw ConfigError("lre.beta must be positive");
  if (lre.n_samples < 1) throw ConfigError("lre.n_samples must be >= 1");
  if (lre.kinds.empty()) throw ConfigError("lre.kinds must not be empty");
  if (eval.n_runs < 1) throw ConfigError("eval.n_runs must be >= 1");
  if (eval.layer_lo < 0 || eval.layer_lo > eval.layer_hi)
    throw ConfigError("eval layer range invalid");
  for (const double b : projection.betas)
    if (b <= 0.0) throw ConfigError("projection.betas must be positive");
  if (projection.n_seeds < 1) throw ConfigError("projection.n_seeds must be >= 1");
  // Model config is validated when the vocabulary size is known.
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    maybe(j, "seed", c.seed);
    maybe(j, "out_dir", c.out_dir);

    if (j.contains("model")) {
      const nlohmann::json& m = j.at("model");
      maybe(m, "d_model", c.model.d_model);
      maybe(m, "n_layers", c.model.n_layers);
      maybe(m, "n_heads", c.model.n_heads);
      maybe(m, "d_head", c.model.d_head);
      maybe(m, "d_mlp", c.model.d_mlp);
      maybe(m, "vocab_size", c.model.vocab_size);
      maybe(m, "max_seq_len", c.model.max_seq_len);
      if (m.contains("wiring")) {
        const std::string w = m.at("wiring").get<std::string>();
        if (w == "parallel") {
          c.model.wiring = Wiring::Parallel;
        } else if (w == "sequential") {
          c.model.wiring = Wiring::Sequential;
        } else {
          throw ConfigError("model.wiring must be 'parallel' or 'sequential'");
        }
      }
      maybe(m, "final_layer_norm", c.model.final_layer_norm);
      maybe(m, "decoder_bias", c.model.decoder_bias);
      c.model.seed = c.seed;
      maybe(m, "seed", c.model.seed);
    }

    if (j.contains("data")) {
      const nlohmann::json& d = j.at("data");
      maybe(d, "kind", c.data.kind);
      maybe(d, "path", c.data.bats_path);
      maybe(d, "n_stems", c.data.synthetic.n_stems);
      if (d.contains("scheme")) {
        const std::string s = d.at("scheme").get<std::string>();
        if (s == "fusional") {
          c.data.synthetic.scheme = SuffixScheme::Fusional;
        } else if (s == "agglutinative") {
          c.data.synthetic.scheme = SuffixScheme::Agglutinative;
        } else {
          throw ConfigError("data.scheme must be 'fusional' or 'agglutinative'");
        }
      }
      maybe(d, "arbitrary_targets", c.data.synthetic.arbitrary_targets);
      maybe(d, "held_out_fraction", c.data.synthetic.held_out_fraction);
      maybe(d, "arbitrary_share", c.data.synthetic.arbitrary_share);
      maybe(d, "n_docs", c.data.synthetic.n_docs);
      maybe(d, "lines_per_doc", c.data.synthetic.lines_per_doc);
      maybe(d, "vocab_budget", c.data.synthetic.vocab_budget);
    }

    if (j.contains("train")) {
      const nlohmann::json& t = j.at("train");
      maybe(t, "learning_rate", c.train.learning_rate);
      maybe(t, "steps", c.train.steps);
      maybe(t, "batch_size", c.train.batch_size);
      maybe(t, "beta1", c.train.beta1);
      maybe(t, "beta2", c.train.beta2);
      maybe(t, "eps", c.train.eps);
      maybe(t, "grad_clip", c.train.grad_clip);
      maybe(t, "eval_every", c.train.eval_every);
      c.train.seed = c.seed;
      maybe(t, "seed", c.train.seed);
    } else {
      c.train.seed = c.seed;
    }

    if (j.contains("lre")) {
      const nlohmann::json& l = j.at("lre");
      maybe(l, "beta", c.lre.beta);
      maybe(l, "n_samples", c.lre.n_samples);
      maybe(l, "layers", c.lre.layers);
      if (l.contains("kinds")) {
        c.lre.kinds.clear();
        for (const auto& k : l.at("kinds")) c.lre.kinds.push_back(kind_from_name(k.get<std::string>()));
      }
    }

    if (j.contains("eval")) {
      const nlohmann::json& e = j.at("eval");
      maybe(e, "n_runs", c.eval.n_runs);
      maybe(e, "layer_lo", c.eval.layer_lo);
      maybe(e, "layer_hi", c.eval.layer_hi);
    }

    if (j.contains("projection")) {
      const nlohmann::json& p = j.at("projection");
      maybe(p, "betas", c.projection.betas);
      maybe(p, "n_seeds", c.projection.n_seeds);
      maybe(p, "relation", c.projection.relation);
      maybe(p, "layer", c.projection.layer);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  }
  return c;
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json kinds = nlohmann::json::array();
  for (const OperatorKind k : c.lre.kinds) kinds.push_back(kind_name(k));
  return nlohmann::json{
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"model", model_config_to_json(c.model)},
      {"data",
       {{"kind", c.data.kind},
        {"path", c.data.bats_path},
        {"n_stems", c.data.synthetic.n_stems},
        {"scheme", c.data.synthetic.scheme == SuffixScheme::Fusional ? "fusional" : "agglutinative"},
        {"arbitrary_targets", c.data.synthetic.arbitrary_targets},
        {"held_out_fraction", c.data.synthetic.held_out_fraction},
        {"arbitrary_share", c.data.synthetic.arbitrary_share},
        {"n_docs", c.data.synthetic.n_docs},
        {"lines_per_doc", c.data.synthetic.lines_per_doc},
        {"vocab_budget", c.data.synthetic.vocab_budget}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"steps", c.train.steps},
        {"batch_size", c.train.batch_size},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"eps", c.train.eps},
        {"grad_clip", c.train.grad_clip},
        {"eval_every", c.train.eval_every},
        {"seed", c.train.seed}}},
      {"lre",
       {{"beta", c.lre.beta}, {"n_samples", c.lre.n_samples}, {"kinds", kinds},
        {"layers", c.lre.layers}}},
      {"eval",
       {{"n_runs", c.eval.n_runs}, {"layer_lo", c.eval.layer_lo}, {"layer_hi", c.eval.layer_hi}}},
      {"projection",
       {{"betas", c.projection.betas},
        {"n_seeds", c.projection.n_seeds},
        {"relation", c.projection.relation},
        {"layer", c.projection.layer}}},
  };
}

void apply_override(nlohmann::json& j, const std::string& dotted_kv) {
  const std::size_t eq = dotted_kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like section.key=value, got '" + dotted_kv + "'");
  std::string key = dotted_kv.substr(0, eq);
  const std::string value = dotted_kv.substr(eq + 1);

  std::string pointer = "/";
  for (const char ch : key) pointer += (ch == '.') ? '/' : ch;

  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;  // plain string
  }
  try {
    j[nlohmann::json::json_pointer(pointer)] = parsed;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot apply override '" + dotted_kv + "': " + e.what());
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse config " + path + ": " + e.what());
  }
  for (const std::string& kv : overrides) apply_override(j, kv);
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

}  // namespace lrel
