#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>

#include "lazykv/model_io.hpp"
#include "oracles.hpp"

using namespace lazykv;

namespace {

ModelConfig cfg() {
  ModelConfig c;
  c.layers = 3;
  c.heads = 2;
  c.dim = 5;
  c.head_dim = 3;
  c.vocab = 11;
  c.activation = Activation::GELU;
  c.ln_mode = LnMode::ClipNorm;
  c.logit_scaling = LogitScaling::None;
  return c;
}

}  // namespace

TEST(ModelIo, RoundTripPreservesWeightsAndConfig) {
  const Weights w = random_init(cfg(), 77, 0.4);
  const auto bytes = serialize_model(w, 77, 0.4);
  const auto m = deserialize_model(bytes);
  EXPECT_EQ(m.weights, w);
  EXPECT_EQ(m.header.seed, 77u);
  EXPECT_EQ(m.header.scale, 0.4);
  EXPECT_EQ(serialize_model(m.weights, 77, 0.4), bytes);
}

TEST(ModelIo, SaveLoadSaveGivesIdenticalLogits) {
  const auto path = (std::filesystem::temp_directory_path() / "lazykv_test_model.bin").string();
  const Weights w = random_init(cfg(), 5, 0.6);
  save_model(path, w, 5, 0.6);
  const auto loaded = load_model(path);
  const std::vector<std::int64_t> toks{1, 2, 3, 10, 0};
  EXPECT_EQ(forward_full(toks, loaded.weights).logits, forward_full(toks, w).logits);
  std::filesystem::remove(path);
}

TEST(ModelIo, BlobLayoutIsLittleEndianInDocumentedOrder) {
  ModelConfig c = cfg();
  c.layers = 1;
  c.heads = 1;
  Weights w = zero_weights(c);
  w.embedding(0, 0) = 1.5;
  w.layers[0].heads[0].w_q(0, 0) = 2.5;
  w.layers[0].w_a2(0, 0) = 3.5;
  w.w_unemb(c.dim - 1, c.vocab - 1) = 4.5;
  const auto bytes = serialize_model(w, 0, 1.0);
  const std::size_t base = bytes.find('\n') + 1;
  auto value_at = [&](std::size_t index) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t(static_cast<unsigned char>(bytes[base + 8 * index + b])) << (8 * b);
    return std::bit_cast<double>(bits);
  };
  const std::size_t emb = c.vocab * c.dim;
  const std::size_t head = 2 * c.dim * c.head_dim + c.dim * c.dim;
  EXPECT_EQ(value_at(0), 1.5);
  EXPECT_EQ(value_at(emb), 2.5);
  EXPECT_EQ(value_at(emb + head + c.dim * c.dim), 3.5);
  EXPECT_EQ(value_at(parameter_count(c) - 1), 4.5);
  EXPECT_EQ(bytes.size(), base + 8 * parameter_count(c));
}

TEST(ModelIo, HeaderFields) {
  const auto bytes = serialize_model(random_init(cfg(), 1, 0.1), 1, 0.1);
  const auto j = nlohmann::json::parse(bytes.substr(0, bytes.find('\n')));
  EXPECT_EQ(j.at("byte_order"), "little-endian");
  EXPECT_EQ(j.at("dtype"), "f64");
  EXPECT_EQ(j.at("layers"), 3);
  EXPECT_EQ(j.at("activation"), "gelu");
  EXPECT_EQ(j.at("ln_mode"), "clip");
  EXPECT_EQ(j.at("logit_scaling"), "none");
}

TEST(ModelIo, RejectsWrongBlobLength) {
  const auto bytes = serialize_model(random_init(cfg(), 1, 0.1), 1, 0.1);
  EXPECT_THROW(deserialize_model(bytes.substr(0, bytes.size() - 1)), InputError);
  EXPECT_THROW(deserialize_model(bytes + std::string(8, '\0')), InputError);
}

TEST(ModelIo, RejectsBadHeaderAndNonFinite) {
  EXPECT_THROW(deserialize_model("no newline"), InputError);
  EXPECT_THROW(deserialize_model("{not json\n"), InputError);
  EXPECT_THROW(deserialize_model("{\"format\":\"other\"}\n"), InputError);
  auto bytes = serialize_model(random_init(cfg(), 1, 0.1), 1, 0.1);
  const auto nan_bits = std::bit_cast<std::uint64_t>(std::numeric_limits<double>::quiet_NaN());
  for (int b = 0; b < 8; ++b) bytes[bytes.find('\n') + 1 + b] = static_cast<char>((nan_bits >> (8 * b)) & 0xFF);
  EXPECT_THROW(deserialize_model(bytes), InputError);
}

TEST(ModelIo, FingerprintIsSha256Hex) {
  EXPECT_EQ(fingerprint(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(fingerprint("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(ModelIo, MissingFileIsInputError) {
  EXPECT_THROW(read_file("/nonexistent/dir/model.bin"), InputError);
  EXPECT_THROW(write_file("/nonexistent/dir/model.bin", "x"), InputError);
}
