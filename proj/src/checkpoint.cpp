#include "lrel/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>

#include "lrel/error.hpp"
#include "lrel/io.hpp"

namespace lrel {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double d) {
  const std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

double get_f64(const std::string& in, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
  return std::bit_cast<double>(v);
}

std::size_t element_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (const int s : shape) n *= static_cast<std::size_t>(s);
  return n;
}

struct NamedShape {
  std::string name;
  std::vector<int> shape;
};

std::vector<NamedShape> expected_model_tensors(const ModelConfig& cfg) {
  const int d = cfg.d_model;
  std::vector<NamedShape> out;
  out.push_back({"token_embedding", {cfg.vocab_size, d}});
  out.push_back({"position_embedding", {cfg.max_seq_len, d}});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "ln_attn_gain", {d}});
    out.push_back({p + "ln_attn_offset", {d}});
    out.push_back({p + "w_query", {d, d}});
    out.push_back({p + "w_key", {d, d}});
    out.push_back({p + "w_value", {d, d}});
    out.push_back({p + "w_out", {d, d}});
    out.push_back({p + "ln_mlp_gain", {d}});
    out.push_back({p + "ln_mlp_offset", {d}});
    out.push_back({p + "w_mlp_in", {d, cfg.d_mlp}});
    out.push_back({p + "w_mlp_out", {cfg.d_mlp, d}});
  }
  if (cfg.final_layer_norm) {
    out.push_back({"final_norm_gain", {d}});
    out.push_back({"final_norm_offset", {d}});
  }
  out.push_back({"decoder_weight", {d, cfg.vocab_size}});
  if (cfg.decoder_bias) out.push_back({"decoder_offset", {cfg.vocab_size}});
  return out;
}

}  // namespace

std::string encode_container(nlohmann::json header, const std::vector<TensorRef>& tensors) {
  nlohmann::json tens = nlohmann::json::array();
  for (const TensorRef& t : tensors) tens.push_back({{"name", t.name}, {"shape", t.shape}});
  header["tensors"] = std::move(tens);

  const std::string hdr = header.dump();
  std::string out;
  out.reserve(12 + hdr.size());
  out.append(kContainerMagic, 4);
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(hdr.size()));
  out += hdr;
  for (const TensorRef& t : tensors) {
    const std::size_t n = element_count(t.shape);
    for (std::size_t i = 0; i < n; ++i) put_f64(out, t.data[i]);
  }
  return out;
}

LoadedContainer decode_container(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0)
    throw FormatError("not an LREL container (bad magic)");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kContainerVersion)
    throw FormatError("unsupported container version " + std::to_string(version));
  const std::uint32_t hdr_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(hdr_len))
    throw FormatError("truncated container header");

  LoadedContainer lc;
  try {
    lc.header = nlohmann::json::parse(bytes.substr(12, hdr_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid container header: ") + e.what());
  }
  if (!lc.header.contains("tensors") || !lc.header["tensors"].is_array())
    throw FormatError("container header missing tensor list");

  std::size_t off = 12 + hdr_len;
  for (const auto& t : lc.header["tensors"]) {
    const std::string name = t.at("name").get<std::string>();
    const std::vector<int> shape = t.at("shape").get<std::vector<int>>();
    const std::size_t n = element_count(shape);
    if (bytes.size() < off + n * 8)
      throw FormatError("truncated tensor data for '" + name + "'");
    LoadedTensor lt;
    lt.shape = shape;
    lt.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) lt.values[i] = get_f64(bytes, off + i * 8);
    off += n * 8;
    lc.order.push_back(name);
    lc.tensors.emplace(name, std::move(lt));
  }
  if (off != bytes.size()) throw FormatError("trailing bytes after tensor data");
  return lc;
}

void write_container(const std::string& path, nlohmann::json header,
                     const std::vector<TensorRef>& tensors) {
  write_file_atomic(path, encode_container(std::move(header), tensors));
}

LoadedContainer read_container(const std::string& path) { return decode_container(read_file(path)); }

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{
      {"d_model", c.d_model},
      {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},
      {"d_head", c.d_head},
      {"d_mlp", c.d_mlp},
      {"vocab_size", c.vocab_size},
      {"max_seq_len", c.max_seq_len},
      {"wiring", c.wiring == Wiring::Parallel ? "parallel" : "sequential"},
      {"final_layer_norm", c.final_layer_norm},
      {"decoder_bias", c.decoder_bias},
      {"seed", c.seed},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    const std::string w = j.at("wiring").get<std::string>();
    if (w == "parallel") {
      c.wiring = Wiring::Parallel;
    } else if (w == "sequential") {
      c.wiring = Wiring::Sequential;
    } else {
      throw FormatError("unknown wiring '" + w + "'");
    }
    c.final_layer_norm = j.at("final_layer_norm").get<bool>();
    c.decoder_bias = j.at("decoder_bias").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid model config: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::string& path, const Parameters& params) {
  const ModelConfig& cfg = params.config;
  std::vector<TensorRef> refs;
  refs.push_back({"token_embedding", {cfg.vocab_size, cfg.d_model}, params.token_embedding.a.data()});
  refs.push_back(
      {"position_embedding", {cfg.max_seq_len, cfg.d_model}, params.position_embedding.a.data()});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    const int d = cfg.d_model;
    refs.push_back({p + "ln_attn_gain", {d}, lp.ln_attn_gain.data()});
    refs.push_back({p + "ln_attn_offset", {d}, lp.ln_attn_offset.data()});
    refs.push_back({p + "w_query", {d, d}, lp.w_query.a.data()});
    refs.push_back({p + "w_key", {d, d}, lp.w_key.a.data()});
    refs.push_back({p + "w_value", {d, d}, lp.w_value.a.data()});
    refs.push_back({p + "w_out", {d, d}, lp.w_out.a.data()});
    refs.push_back({p + "ln_mlp_gain", {d}, lp.ln_mlp_gain.data()});
    refs.push_back({p + "ln_mlp_offset", {d}, lp.ln_mlp_offset.data()});
    refs.push_back({p + "w_mlp_in", {d, cfg.d_mlp}, lp.w_mlp_in.a.data()});
    refs.push_back({p + "w_mlp_out", {cfg.d_mlp, d}, lp.w_mlp_out.a.data()});
  }
  if (cfg.final_layer_norm) {
    refs.push_back({"final_norm_gain", {cfg.d_model}, params.final_norm_gain.data()});
    refs.push_back({"final_norm_offset", {cfg.d_model}, params.final_norm_offset.data()});
  }
  refs.push_back({"decoder_weight", {cfg.d_model, cfg.vocab_size}, params.decoder_weight.a.data()});
  if (cfg.decoder_bias)
    refs.push_back({"decoder_offset", {cfg.vocab_size}, params.decoder_offset.data()});

  nlohmann::json header{{"kind", "model"}, {"config", model_config_to_json(cfg)}};
  write_container(path, std::move(header), refs);
}

Parameters load_checkpoint(const std::string& path) {
  LoadedContainer lc = read_container(path);
  if (lc.header.value("kind", "") != "model")
    throw FormatError("container at " + path + " is not a model checkpoint");
  const ModelConfig cfg = model_config_from_json(lc.header.at("config"));
  cfg.validate();

  const std::vector<NamedShape> expected = expected_model_tensors(cfg);
  if (expected.size() != lc.order.size())
    throw FormatError("checkpoint tensor count " + std::to_string(lc.order.size()) +
                      " != expected " + std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (lc.order[i] != expected[i].name)
      throw FormatError("checkpoint tensor " + std::to_string(i) + " is '" + lc.order[i] +
                        "', expected '" + expected[i].name + "'");
    if (lc.tensors.at(lc.order[i]).shape != expected[i].shape)
      throw FormatError("shape mismatch for tensor '" + expected[i].name + "'");
  }

  Parameters p;
  p.config = cfg;
  const int d = cfg.d_model;
  auto take_mat = [&](const std::string& name, int r, int c) {
    Mat m(r, c);
    m.a = std::move(lc.tensors.at(name).values);
    return m;
  };
  auto take_vec = [&](const std::string& name) { return std::move(lc.tensors.at(name).values); };

  p.token_embedding = take_mat("token_embedding", cfg.vocab_size, d);
  p.position_embedding = take_mat("position_embedding", cfg.max_seq_len, d);
  p.layers.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams& lp = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    lp.ln_attn_gain = take_vec(pre + "ln_attn_gain");
    lp.ln_attn_offset = take_vec(pre + "ln_attn_offset");
    lp.w_query = take_mat(pre + "w_query", d, d);
    lp.w_key = take_mat(pre + "w_key", d, d);
    lp.w_value = take_mat(pre + "w_value", d, d);
    lp.w_out = take_mat(pre + "w_out", d, d);
    lp.ln_mlp_gain = take_vec(pre + "ln_mlp_gain");
    lp.ln_mlp_offset = take_vec(pre + "ln_mlp_offset");
    lp.w_mlp_in = take_mat(pre + "w_mlp_in", d, cfg.d_mlp);
    lp.w_mlp_out = take_mat(pre + "w_mlp_out", cfg.d_mlp, d);
  }
  if (cfg.final_layer_norm) {
    p.final_norm_gain = take_vec("final_norm_gain");
    p.final_norm_offset = take_vec("final_norm_offset");
  }
  p.decoder_weight = take_mat("decoder_weight", d, cfg.vocab_size);
  if (cfg.decoder_bias) p.decoder_offset = take_vec("decoder_offset");
  return p;
}

}  // namespace lrel
