// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mohge/config.hpp"
#include "mohge/error.hpp"
#include "mohge/layer.hpp"

// Weight file layout:
//   bytes 0..7    magic "MOHGEWT1"
//   bytes 8..15   header length H, uint64 little-endian
//   next H bytes  JSON header: {"config", "activation", "arrays": [manifest]}
//   remainder     arrays in manifest order, fp32 little-endian, row-major
// Manifest entries carry name, shape [rows, cols], offset and bytes, with
// offsets relative to the start of the array data.

namespace mohge {

inline constexpr char kWeightsMagic[8] = {'M', 'O', 'H', 'G', 'E', 'W', 'T', '1'};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(p[k]) << (8 * k);
  return v;
}

inline void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xFF));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[k]) << (8 * k);
  return std::bit_cast<float>(bits);
}

template <typename T, typename Fn>
void for_each_named_array(MoHGELayer<T>& layer, Fn&& fn) {
  fn("gating.group_embeddings", layer.gating.group_embeddings);
  fn("gating.expert_embeddings", layer.gating.expert_embeddings);
  const std::size_t n = layer.config.experts_per_group;
  for (std::size_t k = 0; k < layer.experts.size(); ++k) {
    const std::string base =
        "experts.g" + std::to_string(k / n) + ".e" + std::to_string(k % n);
    fn(base + ".up", layer.experts[k].up);
    fn(base + ".down", layer.experts[k].down);
  }
  for (std::size_t s = 0; s < layer.shared.size(); ++s) {
    const std::string base = "shared." + std::to_string(s);
    fn(base + ".up", layer.shared[s].up);
    fn(base + ".down", layer.shared[s].down);
  }
}

}  // namespace detail

template <typename T>
nlohmann::json weights_manifest(const MoHGELayer<T>& layer) {
  auto& mut = const_cast<MoHGELayer<T>&>(layer);
  nlohmann::json arrays = nlohmann::json::array();
  std::uint64_t offset = 0;
  detail::for_each_named_array(mut, [&](const std::string& name, Matrix<T>& m) {
    const std::uint64_t bytes = 4 * m.size();
    arrays.push_back({{"name", name},
                      {"shape", {m.rows(), m.cols()}},
                      {"offset", offset},
                      {"bytes", bytes}});
    offset += bytes;
  });
  return arrays;
}

template <typename T>
std::string encode_weights(const MoHGELayer<T>& layer) {
  nlohmann::json header = {
      {"config", to_json(layer.config)},
      {"activation", layer.activation == Activation::gelu ? "gelu" : "identity"},
      {"dtype", "float32-le"},
      {"arrays", weights_manifest(layer)}};
  const std::string hdr = header.dump();
  std::string out(kWeightsMagic, kWeightsMagic + 8);
  detail::put_u64(out, hdr.size());
  out += hdr;
  auto& mut = const_cast<MoHGELayer<T>&>(layer);
  detail::for_each_named_array(mut, [&](const std::string&, Matrix<T>& m) {
    for (T v : m.data()) detail::put_f32(out, static_cast<float>(v));
  });
  return out;
}

template <typename T>
MoHGELayer<T> decode_weights(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(p, kWeightsMagic, 8) != 0)
    throw ConfigError("not a weights file (bad magic)");
  const std::uint64_t hlen = detail::get_u64(p + 8);
  if (bytes.size() < 16 + hlen) throw ConfigError("truncated weights header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed weights header: ") + e.what());
  }
  const ModelConfig cfg = config_from_json(header.at("config"));
  MoHGELayer<T> layer(cfg);
  layer.activation =
      header.value("activation", std::string("gelu")) == "identity" ? Activation::identity
                                                                    : Activation::gelu;
  const auto& arrays = header.at("arrays");
  const std::uint64_t data0 = 16 + hlen;
  std::size_t idx = 0;
  detail::for_each_named_array(layer, [&](const std::string& name, Matrix<T>& m) {
    if (idx >= arrays.size()) throw ConfigError("weights manifest is missing " + name);
    const auto& entry = arrays.at(idx++);
    if (entry.at("name").get<std::string>() != name ||
        entry.at("shape").at(0).get<std::size_t>() != m.rows() ||
        entry.at("shape").at(1).get<std::size_t>() != m.cols())
      throw ConfigError("weights manifest does not match config at " + name);
    const std::uint64_t off = data0 + entry.at("offset").get<std::uint64_t>();
    if (bytes.size() < off + 4 * m.size()) throw ConfigError("truncated weights data");
    for (std::size_t k = 0; k < m.size(); ++k)
      m.data()[k] = static_cast<T>(detail::get_f32(p + off + 4 * k));
  });
  return layer;
}

template <typename T>
void save_weights(const std::string& path, const MoHGELayer<T>& layer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write weights file '" + path + "'");
  const std::string bytes = encode_weights(layer);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing weights file '" + path + "'");
}

template <typename T>
MoHGELayer<T> load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_weights<T>(ss.str());
}

}  // namespace mohge
