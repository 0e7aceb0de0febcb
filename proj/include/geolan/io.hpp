// Copyright 2026 The GeoLAN Workbench Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats.
//
// EmbeddingDump ("GLAN"):
//   offset 0   4 bytes  magic "GLAN"
//   offset 4   u32      version (1)
//   offset 8   u32      layers
//   offset 12  u32      tokens
//   offset 16  u32      dim
//   offset 20  f32[]    layers * tokens * dim values, layer-major, then token, then dim
// All integers and floats are little-endian regardless of host.
//
// A checkpoint is a dump with layers = tokens = 1 and dim = total parameter
// count, plus a JSON manifest naming each tensor's shape and offset.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geolan/error.hpp"
#include "geolan/geoloss.hpp"
#include "geolan/model.hpp"
#include "geolan/tensor.hpp"

namespace geolan {

inline constexpr std::array<char, 4> kDumpMagic{'G', 'L', 'A', 'N'};
inline constexpr std::uint32_t kDumpVersion = 1;

struct EmbeddingDump {
  std::uint32_t layers = 0;
  std::uint32_t tokens = 0;
  std::uint32_t dim = 0;
  std::vector<float> data;

  float at(std::size_t l, std::size_t t, std::size_t k) const {
    return data[(l * tokens + t) * dim + k];
  }

  friend bool operator==(const EmbeddingDump&, const EmbeddingDump&) = default;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed for " + path.string());
}

}  // namespace detail

inline std::string encode_dump(const EmbeddingDump& d) {
  const std::size_t n = static_cast<std::size_t>(d.layers) * d.tokens * d.dim;
  detail::require(d.data.size() == n, "encode_dump: payload size does not match counts");
  std::string out(kDumpMagic.begin(), kDumpMagic.end());
  out.reserve(20 + 4 * n);
  detail::put_u32(out, kDumpVersion);
  detail::put_u32(out, d.layers);
  detail::put_u32(out, d.tokens);
  detail::put_u32(out, d.dim);
  for (float f : d.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline EmbeddingDump decode_dump(const std::string& bytes) {
  if (bytes.size() < 20) throw CorruptDataError("dump is truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kDumpMagic.data(), 4) != 0) throw CorruptDataError("dump has bad magic");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != kDumpVersion) throw CorruptDataError("unsupported dump version " + std::to_string(version));
  EmbeddingDump d;
  d.layers = detail::get_u32(p + 8);
  d.tokens = detail::get_u32(p + 12);
  d.dim = detail::get_u32(p + 16);
  const std::uint64_t n = static_cast<std::uint64_t>(d.layers) * d.tokens * d.dim;
  if (bytes.size() != 20 + 4 * n)
    throw CorruptDataError("dump payload is " + std::to_string(bytes.size() - 20) + " bytes, expected " +
                           std::to_string(4 * n));
  d.data.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) d.data[i] = std::bit_cast<float>(detail::get_u32(p + 20 + 4 * i));
  return d;
}

inline void write_dump(const std::filesystem::path& path, const EmbeddingDump& d) {
  detail::write_file(path, encode_dump(d));
}

inline EmbeddingDump read_dump(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("dump not found: " + path.string());
  return decode_dump(detail::read_file(path));
}

/// Stack equally-shaped matrices (one per layer) into a dump.
inline EmbeddingDump dump_from_layers(const std::vector<Tensor>& layers) {
  detail::require(!layers.empty(), "dump_from_layers: no layers");
  EmbeddingDump d;
  d.layers = static_cast<std::uint32_t>(layers.size());
  d.tokens = static_cast<std::uint32_t>(layers[0].rows());
  d.dim = static_cast<std::uint32_t>(layers[0].cols());
  d.data.reserve(static_cast<std::size_t>(d.layers) * d.tokens * d.dim);
  for (const auto& t : layers) {
    detail::require(t.rank() == 2 && t.rows() == d.tokens && t.cols() == d.dim, "dump_from_layers: shape mismatch");
    for (double v : t.values()) d.data.push_back(static_cast<float>(v));
  }
  return d;
}

/// Rank-3 stacks (K x N x N per layer) flattened to (K*N) x N rows.
inline EmbeddingDump dump_from_stacks(const std::vector<Tensor>& stacks) {
  std::vector<Tensor> flat;
  for (const auto& s : stacks) flat.push_back(s.reshaped(Shape{s.dim(0) * s.dim(1), s.dim(2)}));
  return dump_from_layers(flat);
}

inline std::vector<Tensor> layers_from_dump(const EmbeddingDump& d) {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < d.layers; ++l) {
    Tensor t(Shape{d.tokens, d.dim});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = d.data[l * t.size() + i];
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config JSON

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
          {"d_head", c.d_head},         {"max_seq", c.max_seq}, {"ffn_mult", c.ffn_mult}};
}

inline nlohmann::json to_json(const RegularizerConfig& c) {
  return {{"lambda1_target", c.lambda1_target}, {"lambda2_target", c.lambda2_target}, {"ramp_steps", c.ramp_steps},
          {"n_probes", c.n_probes},             {"entropy_rank_cap", c.entropy_rank_cap}};
}

namespace detail {

/// Read an optional field, naming it in the error when its type is wrong.
template <typename T>
void read_field(const nlohmann::json& j, const std::string& prefix, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InputError("field " + prefix + key + " has the wrong type");
  }
}

inline void check_keys(const nlohmann::json& j, const std::string& prefix, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw InputError("field " + (prefix.empty() ? std::string("<root>") : prefix) + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known |= k == key;
    if (!known) throw InputError("unknown field " + prefix + k);
  }
}

}  // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& prefix = "model.") {
  detail::check_keys(j, prefix, {"vocab_size", "d_model", "n_layers", "n_heads", "d_head", "max_seq", "ffn_mult"});
  ModelConfig c;
  detail::read_field(j, prefix, "vocab_size", c.vocab_size);
  detail::read_field(j, prefix, "d_model", c.d_model);
  detail::read_field(j, prefix, "n_layers", c.n_layers);
  detail::read_field(j, prefix, "n_heads", c.n_heads);
  detail::read_field(j, prefix, "d_head", c.d_head);
  detail::read_field(j, prefix, "max_seq", c.max_seq);
  detail::read_field(j, prefix, "ffn_mult", c.ffn_mult);
  c.validate();
  return c;
}

inline RegularizerConfig regularizer_config_from_json(const nlohmann::json& j,
                                                      const std::string& prefix = "regularizer.") {
  detail::check_keys(j, prefix, {"lambda1_target", "lambda2_target", "ramp_steps", "n_probes", "entropy_rank_cap"});
  RegularizerConfig c;
  detail::read_field(j, prefix, "lambda1_target", c.lambda1_target);
  detail::read_field(j, prefix, "lambda2_target", c.lambda2_target);
  detail::read_field(j, prefix, "ramp_steps", c.ramp_steps);
  detail::read_field(j, prefix, "n_probes", c.n_probes);
  detail::read_field(j, prefix, "entropy_rank_cap", c.entropy_rank_cap);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline std::filesystem::path manifest_path(const std::filesystem::path& ckpt) {
  std::filesystem::path m = ckpt;
  m.replace_extension(".json");
  return m;
}

inline nlohmann::json checkpoint_manifest(const Params& p) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t off = 0;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    tensors.push_back({{"name", p.names[i]}, {"shape", p.tensors[i].shape()}, {"offset", off}});
    off += p.tensors[i].size();
  }
  return {{"format", "geolan-checkpoint"}, {"version", 1}, {"model", to_json(p.config)},
          {"total", off},                  {"tensors", tensors}};
}

/// Writes `path` (GLAN payload) and its sibling .json manifest.
inline void write_checkpoint(const std::filesystem::path& path, const Params& p) {
  EmbeddingDump d;
  d.layers = 1;
  d.tokens = 1;
  d.dim = static_cast<std::uint32_t>(p.total_size());
  d.data.reserve(d.dim);
  for (const auto& t : p.tensors)
    for (double v : t.values()) d.data.push_back(static_cast<float>(v));
  write_dump(path, d);
  detail::write_file(manifest_path(path), checkpoint_manifest(p).dump(2) + "\n");
}

inline Params read_checkpoint(const std::filesystem::path& path) {
  const EmbeddingDump d = read_dump(path);
  const auto mpath = manifest_path(path);
  if (!std::filesystem::exists(mpath)) throw InputError("checkpoint manifest not found: " + mpath.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (d.layers != 1 || d.tokens != 1) throw CorruptDataError("checkpoint payload must have layers = tokens = 1");
  try {
    if (m.at("format") != "geolan-checkpoint") throw CorruptDataError("not a checkpoint manifest");
    const ModelConfig cfg = model_config_from_json(m.at("model"));
    std::vector<std::string> names;
    std::vector<Tensor> tensors;
    for (const auto& t : m.at("tensors")) {
      const Shape shape = t.at("shape").get<Shape>();
      const std::size_t off = t.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      if (off + n > d.dim) throw CorruptDataError("tensor " + t.at("name").get<std::string>() + " exceeds payload");
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = d.data[off + i];
      names.push_back(t.at("name").get<std::string>());
      tensors.emplace_back(shape, std::move(v));
    }
    return params_from(cfg, names, std::move(tensors));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError("checkpoint manifest is malformed: " + std::string(e.what()));
  } catch (const InputError& e) {
    throw CorruptDataError(std::string("checkpoint manifest is invalid: ") + e.what());
  }
}

}  // namespace geolan
