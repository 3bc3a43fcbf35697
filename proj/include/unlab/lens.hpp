// Copyright 2026 The unlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// LogitLens: every layer's final-position hidden state read out through the
// shared final norm and unembedding.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "unlab/engine.hpp"
#include "unlab/error.hpp"
#include "unlab/model.hpp"

namespace unlab {

struct LensStack {
  std::int64_t prompt_id = 0;
  std::vector<std::vector<double>> layers;  // ascending layer order

  std::size_t depth() const { return layers.size(); }
  std::size_t vocab() const { return layers.empty() ? 0 : layers.front().size(); }
  const std::vector<double>& output() const { return layers.back(); }
  bool operator==(const LensStack&) const = default;
};

template <typename Real>
LensStack lens_from_tape(const engine::Tape<Real>& tp, std::size_t seq, std::int64_t prompt_id) {
  LensStack s;
  s.prompt_id = prompt_id;
  for (const auto& h : tp.heads[seq]) s.layers.emplace_back(h.probs.begin(), h.probs.end());
  return s;
}

template <typename Real>
LensStack lens_distributions(const ModelState<Real>& state, const Query& q, std::int64_t prompt_id = 0) {
  const auto tp = engine::forward(state, {&q}, true);
  return lens_from_tape(tp, 0, prompt_id);
}

template <typename Real>
std::vector<LensStack> lens_distributions(const ModelState<Real>& state, const std::vector<Query>& qs,
                                          std::size_t chunk = 64) {
  std::vector<LensStack> out;
  out.reserve(qs.size());
  for (std::size_t start = 0; start < qs.size(); start += chunk) {
    std::vector<const Query*> ptrs;
    for (std::size_t i = start; i < std::min(qs.size(), start + chunk); ++i) ptrs.push_back(&qs[i]);
    const auto tp = engine::forward(state, ptrs, true);
    for (std::size_t b = 0; b < ptrs.size(); ++b) {
      out.push_back(lens_from_tape(tp, b, static_cast<std::int64_t>(start + b)));
    }
  }
  return out;
}

// Rank of `token` in a distribution: 1 + number of tokens ahead of it, where
// equal probabilities rank the lower index first.
inline int token_rank(const std::vector<double>& p, int token) {
  const double pt = p[static_cast<std::size_t>(token)];
  int rank = 1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > pt || (p[i] == pt && static_cast<int>(i) < token)) ++rank;
  }
  return rank;
}

// Lens dump layout, all little-endian:
//   bytes 0..3   magic "ULNS"
//   u32          format version (1)
//   u32          n_layers
//   u32          vocab size V
//   u64          prompt count
//   per prompt:  i64 prompt id, then n_layers * V f64 probabilities,
//                layer-major.
inline constexpr char kLensMagic[4] = {'U', 'L', 'N', 'S'};
inline constexpr std::uint32_t kLensVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw InvalidInput("truncated binary file");
  return v;
}

}  // namespace detail

inline void save_lens_dump(const std::vector<LensStack>& stacks, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write lens dump: " + path);
  const std::uint32_t n = stacks.empty() ? 0 : static_cast<std::uint32_t>(stacks.front().depth());
  const std::uint32_t v = stacks.empty() ? 0 : static_cast<std::uint32_t>(stacks.front().vocab());
  out.write(kLensMagic, 4);
  detail::write_le(out, kLensVersion);
  detail::write_le(out, n);
  detail::write_le(out, v);
  detail::write_le(out, static_cast<std::uint64_t>(stacks.size()));
  for (const auto& s : stacks) {
    if (s.depth() != n || s.vocab() != v) throw InvalidInput("lens stacks differ in shape");
    detail::write_le(out, s.prompt_id);
    for (const auto& layer : s.layers) {
      for (double x : layer) detail::write_le(out, x);
    }
  }
  if (!out) throw InvalidInput("failed writing lens dump: " + path);
}

inline std::vector<LensStack> load_lens_dump(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read lens dump: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kLensMagic, 4) != 0) throw InvalidInput("not a lens dump: " + path);
  const auto version = detail::read_le<std::uint32_t>(in);
  if (version != kLensVersion) {
    throw VersionError("unsupported lens dump version", static_cast<int>(version), static_cast<int>(kLensVersion));
  }
  const auto n = detail::read_le<std::uint32_t>(in);
  const auto v = detail::read_le<std::uint32_t>(in);
  const auto count = detail::read_le<std::uint64_t>(in);
  std::vector<LensStack> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    LensStack s;
    s.prompt_id = detail::read_le<std::int64_t>(in);
    s.layers.assign(n, std::vector<double>(v));
    for (auto& layer : s.layers) {
      for (auto& x : layer) x = detail::read_le<double>(in);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace unlab
