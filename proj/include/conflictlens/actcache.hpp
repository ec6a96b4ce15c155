// Copyright 2026 The ConflictLens Authors
// SPDX-License-Identifier: Apache-2.0

// Activation cache file: "ACTV", u32 version, u32 n_layers, u32 d_model,
// u32 n, u32 condition id, then n rows of (n_layers + 1) x d_model f32 LE.
// Row i starts at byte kActvHeader + i * row_bytes().

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "conflictlens/binio.hpp"
#include "conflictlens/errors.hpp"
#include "conflictlens/model.hpp"

namespace conflictlens {

inline constexpr std::uint32_t kActvVersion = 1;
inline constexpr std::size_t kActvHeader = 4 + 5 * 4;

struct ActivationCache {
  std::size_t n_layers = 0;  // residual snapshots per row = n_layers + 1
  std::size_t d_model = 0;
  std::uint32_t condition = 0;
  std::vector<float> data;

  std::size_t row_floats() const { return (n_layers + 1) * d_model; }
  std::size_t row_bytes() const { return row_floats() * 4; }
  std::size_t size() const { return row_floats() ? data.size() / row_floats() : 0; }

  std::span<const float> at(std::size_t row, std::size_t layer) const {
    if (row >= size() || layer > n_layers) throw IndexError("ActivationCache: index out of range");
    return std::span<const float>(data).subspan(row * row_floats() + layer * d_model, d_model);
  }

  static ActivationCache from_traces(std::span<const ForwardTrace> traces, std::size_t n_layers,
                                     std::size_t d_model, std::uint32_t condition) {
    ActivationCache c{n_layers, d_model, condition, {}};
    c.data.reserve(traces.size() * c.row_floats());
    for (const auto& t : traces) {
      if (t.residual.size() != n_layers + 1) throw DimensionError("ActivationCache: trace layer count mismatch");
      for (const auto& r : t.residual) {
        if (r.size() != d_model) throw DimensionError("ActivationCache: trace width mismatch");
        c.data.insert(c.data.end(), r.begin(), r.end());
      }
    }
    return c;
  }

  std::vector<ForwardTrace> to_traces() const {
    std::vector<ForwardTrace> out(size());
    for (std::size_t i = 0; i < out.size(); ++i)
      for (std::size_t l = 0; l <= n_layers; ++l) {
        auto s = at(i, l);
        out[i].residual.emplace_back(s.begin(), s.end());
      }
    return out;
  }

  friend bool operator==(const ActivationCache&, const ActivationCache&) = default;
};

inline std::string serialize_activations(const ActivationCache& c) {
  binio::Writer w;
  w.bytes("ACTV");
  w.u32(kActvVersion);
  w.u32(static_cast<std::uint32_t>(c.n_layers));
  w.u32(static_cast<std::uint32_t>(c.d_model));
  w.u32(static_cast<std::uint32_t>(c.size()));
  w.u32(c.condition);
  w.f32s(c.data);
  return w.buffer();
}

inline ActivationCache deserialize_activations(const std::string& bytes) {
  binio::Reader r(bytes);
  r.expect_magic("ACTV");
  const std::uint32_t version = r.u32();
  if (version != kActvVersion) throw FormatError("ACTV: unsupported version " + std::to_string(version), 4);
  ActivationCache c;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  const std::size_t n = r.u32();
  c.condition = r.u32();
  if (r.remaining() != n * c.row_bytes())
    throw FormatError("ACTV: body holds " + std::to_string(r.remaining()) + " bytes, header implies " +
                          std::to_string(n * c.row_bytes()),
                      r.offset());
  c.data.resize(n * c.row_floats());
  r.f32s(std::span<float>(c.data));
  return c;
}

inline void save_activations(const ActivationCache& c, const std::filesystem::path& path) {
  binio::write_file_atomic(path, serialize_activations(c));
}

inline ActivationCache load_activations(const std::filesystem::path& path) {
  return deserialize_activations(binio::read_file(path));
}

}  // namespace conflictlens
