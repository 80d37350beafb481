#pragma once

// Model file: one line of JSON header terminated by '\n', followed by the raw
// little-endian f64 blob of every matrix in Weights::for_each_matrix order
// (embedding; per layer: per head W_Q, W_K, W_V; W_A1, W_A2; W_unemb).

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "lazykv/errors.hpp"
#include "lazykv/model.hpp"

namespace lazykv {

struct ModelFileHeader {
  ModelConfig config;
  std::uint64_t seed = 0;
  double scale = 0.0;
};

inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t per_head = 2 * c.dim * c.head_dim + c.dim * c.dim;
  const std::size_t per_layer = c.heads * per_head + 2 * c.dim * c.dim;
  return c.vocab * c.dim + c.layers * per_layer + c.dim * c.vocab;
}

inline nlohmann::json header_json(const ModelFileHeader& h) {
  const auto& c = h.config;
  return {
      {"format", "lazykv-model"},
      {"version", 1},
      {"layers", c.layers},
      {"heads", c.heads},
      {"dim", c.dim},
      {"head_dim", c.head_dim},
      {"vocab", c.vocab},
      {"activation", to_string(c.activation)},
      {"ln_mode", to_string(c.ln_mode)},
      {"logit_scaling", to_string(c.logit_scaling)},
      {"seed", h.seed},
      {"scale", h.scale},
      {"byte_order", "little-endian"},
      {"dtype", "f64"},
      {"values", parameter_count(c)},
  };
}

inline std::string serialize_model(const Weights& w, std::uint64_t seed, double scale) {
  std::string out = header_json({w.config, seed, scale}).dump();
  out.push_back('\n');
  const std::size_t header_len = out.size();
  out.resize(header_len + parameter_count(w.config) * 8);
  char* dst = out.data() + header_len;
  w.for_each_matrix([&](const Matrix& m) {
    for (double v : m.data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) *dst++ = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
  });
  return out;
}

struct LoadedModel {
  Weights weights;
  ModelFileHeader header;
};

inline LoadedModel deserialize_model(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  require_input(nl != std::string::npos, "model file: missing header line");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("model file: bad header JSON: ") + e.what());
  }
  LoadedModel m;
  try {
    require_input(j.at("format") == "lazykv-model", "model file: unknown format");
    require_input(j.at("byte_order") == "little-endian" && j.at("dtype") == "f64",
                  "model file: only little-endian f64 blobs are supported");
    auto& c = m.header.config;
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.activation = activation_from_string(j.at("activation").get<std::string>());
    c.ln_mode = ln_mode_from_string(j.at("ln_mode").get<std::string>());
    c.logit_scaling = logit_scaling_from_string(j.at("logit_scaling").get<std::string>());
    m.header.seed = j.at("seed").get<std::uint64_t>();
    m.header.scale = j.at("scale").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("model file: bad header field: ") + e.what());
  }
  const std::size_t expected = parameter_count(m.header.config) * 8;
  const std::size_t actual = bytes.size() - nl - 1;
  require_input(actual == expected, "model file: blob is " + std::to_string(actual) + " bytes, expected " +
                                        std::to_string(expected));
  m.weights = zero_weights(m.header.config);
  const char* src = bytes.data() + nl + 1;
  m.weights.for_each_matrix([&](Matrix& mat) {
    for (double& v : mat.data()) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(*src++)) << (8 * b);
      v = std::bit_cast<double>(bits);
      require_input(std::isfinite(v), "model file: non-finite weight");
    }
  });
  return m;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require_input(static_cast<bool>(in), "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require_input(static_cast<bool>(out), "cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require_input(static_cast<bool>(out), "write failed for '" + path + "'");
}

inline void save_model(const std::string& path, const Weights& w, std::uint64_t seed, double scale) {
  write_file(path, serialize_model(w, seed, scale));
}

inline LoadedModel load_model(const std::string& path) { return deserialize_model(read_file(path)); }

// SHA-256 of the model file bytes, lowercase hex.
inline std::string fingerprint(const std::string& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("fingerprint: EVP_Digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[md[i] >> 4]);
    hex.push_back(kHex[md[i] & 0xF]);
  }
  return hex;
}

}  // namespace lazykv
