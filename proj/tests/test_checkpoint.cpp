#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "lrel/checkpoint.hpp"
#include "lrel/error.hpp"
#include "lrel/io.hpp"
#include "support/reference_model.hpp"

using namespace lrel;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-identical") {
  ModelConfig cfg = lrel_test::small_config(16, 2, 2, 40, 12, 77);
  cfg.decoder_bias = true;
  const Parameters p = build_model(cfg);
  const std::string path = temp_path("lrel_ckpt_test.lrel");
  save_checkpoint(path, p);
  const Parameters q = load_checkpoint(path);

  CHECK(q.config.d_model == cfg.d_model);
  CHECK(q.config.wiring == cfg.wiring);
  CHECK(q.token_embedding.a == p.token_embedding.a);
  CHECK(q.position_embedding.a == p.position_embedding.a);
  for (int l = 0; l < cfg.n_layers; ++l) {
    CHECK(q.layers[l].w_query.a == p.layers[l].w_query.a);
    CHECK(q.layers[l].w_mlp_out.a == p.layers[l].w_mlp_out.a);
    CHECK(q.layers[l].ln_mlp_gain == p.layers[l].ln_mlp_gain);
  }
  CHECK(q.final_norm_gain == p.final_norm_gain);
  CHECK(q.decoder_weight.a == p.decoder_weight.a);
  CHECK(q.decoder_offset == p.decoder_offset);
  std::filesystem::remove(path);
}

TEST_CASE("loader rejects bad magic, truncation, and shape mismatches") {
  ModelConfig cfg = lrel_test::small_config(8, 1, 2, 16, 8, 3);
  const Parameters p = build_model(cfg);
  const std::string path = temp_path("lrel_ckpt_bad.lrel");
  save_checkpoint(path, p);
  std::string bytes = read_file(path);

  {
    std::string corrupted = bytes;
    corrupted[0] = 'X';
    write_file_atomic(path, corrupted);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  {
    const std::string truncated = bytes.substr(0, bytes.size() - 9);
    write_file_atomic(path, truncated);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  {
    const std::string padded = bytes + "xx";
    write_file_atomic(path, padded);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  {
    // Header claims a different d_model than the tensors carry.
    LoadedContainer lc = decode_container(bytes);
    lc.header["config"]["d_model"] = 16;
    lc.header["config"]["d_head"] = 8;
    std::vector<TensorRef> refs;
    for (const std::string& name : lc.order)
      refs.push_back({name, lc.tensors.at(name).shape, lc.tensors.at(name).values.data()});
    nlohmann::json hdr = lc.header;
    hdr.erase("tensors");
    write_file_atomic(path, encode_container(hdr, refs));
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("container preserves tensor order and shapes") {
  const Vec a = {1.0, 2.0, 3.0, 4.0};
  const Vec b = {-1.5};
  nlohmann::json hdr{{"kind", "operator"}};
  const std::string bytes =
      encode_container(hdr, {{"W", {2, 2}, a.data()}, {"b", {1}, b.data()}});
  const LoadedContainer lc = decode_container(bytes);
  CHECK(lc.order == std::vector<std::string>{"W", "b"});
  CHECK(lc.tensors.at("W").shape == std::vector<int>{2, 2});
  CHECK(lc.tensors.at("W").values == a);
  CHECK(lc.tensors.at("b").values == b);
}
