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

// Binary checkpoint format (version 1), all integers and reals
// little-endian:
//
//   offset  size  field
//   0       4     magic "UNLB"
//   4       4     u32 format version
//   8       4     i32 vocab_size
//   12      4     i32 width
//   16      4     i32 layers
//   20      4     i32 heads
//   24      4     i32 mlp_factor
//   28      4     i32 image_dim
//   32      4     i32 prefix_len
//   36      4     i32 max_seq_len
//   40      8     u64 init seed
//   48      4     u32 parameter count P
//   then P records:
//           4     u32 name length n, followed by n bytes of name
//           4     u32 rank r, followed by r u64 dimensions
//           8*k   f64 values, row-major, k = product of dimensions
//   then the adapter section:
//           1     u8 present flag (0 or 1)
//   if present:
//           1     u8 target (0 = llm_mlp, 1 = projector_mlp)
//           4     i32 layer
//           8     f64 alpha
//           8     u64 length of b, then f64 values
//           8     u64 length of a, then f64 values
//
// Parameters appear in layout order and are checked against the layout
// implied by the config on load.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "unlab/error.hpp"
#include "unlab/lens.hpp"
#include "unlab/model.hpp"

namespace unlab {

inline constexpr char kCheckpointMagic[4] = {'U', 'N', 'L', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Real>
void write_checkpoint(const ModelState<Real>& s, std::ostream& out) {
  using detail::write_le;
  const ModelConfig& c = s.config;
  const ParamLayout& L = s.layout();
  out.write(kCheckpointMagic, 4);
  write_le(out, kCheckpointVersion);
  for (int v : {c.vocab_size, c.width, c.layers, c.heads, c.mlp_factor, c.image_dim, c.prefix_len, c.max_seq_len}) {
    write_le(out, static_cast<std::int32_t>(v));
  }
  write_le(out, static_cast<std::uint64_t>(c.seed));
  write_le(out, static_cast<std::uint32_t>(L.size()));
  for (std::size_t i = 0; i < L.size(); ++i) {
    write_le(out, static_cast<std::uint32_t>(L.names[i].size()));
    out.write(L.names[i].data(), static_cast<std::streamsize>(L.names[i].size()));
    const auto& shape = s.params[i].shape();
    write_le(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) write_le(out, static_cast<std::uint64_t>(d));
    for (Real x : s.params[i].values()) write_le(out, static_cast<double>(x));
  }
  write_le(out, static_cast<std::uint8_t>(s.adapter ? 1 : 0));
  if (s.adapter) {
    const auto& a = *s.adapter;
    write_le(out, static_cast<std::uint8_t>(a.target == EditTarget::kProjectorMlp ? 1 : 0));
    write_le(out, static_cast<std::int32_t>(a.layer));
    write_le(out, static_cast<double>(a.alpha));
    for (const auto* t : {&a.b, &a.a}) {
      write_le(out, static_cast<std::uint64_t>(t->size()));
      for (Real x : t->values()) write_le(out, static_cast<double>(x));
    }
  }
}

template <typename Real = double>
ModelState<Real> read_checkpoint(std::istream& in) {
  using detail::read_le;
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw VersionError("not a checkpoint (bad magic)", 0, static_cast<int>(kCheckpointVersion));
  }
  const auto version = read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version", static_cast<int>(version),
                       static_cast<int>(kCheckpointVersion));
  }
  ModelConfig c;
  for (int* f : {&c.vocab_size, &c.width, &c.layers, &c.heads, &c.mlp_factor, &c.image_dim, &c.prefix_len,
                 &c.max_seq_len}) {
    *f = read_le<std::int32_t>(in);
  }
  c.seed = read_le<std::uint64_t>(in);
  try {
    c.validate();
  } catch (const ConfigurationError& e) {
    throw VersionError(std::string("corrupted checkpoint header: ") + e.what(), static_cast<int>(version),
                       static_cast<int>(kCheckpointVersion));
  }
  ModelState<Real> s(c);
  const ParamLayout& L = s.layout();
  const auto count = read_le<std::uint32_t>(in);
  if (count != L.size()) throw InvalidInput("checkpoint parameter count does not match its config");
  for (std::size_t i = 0; i < L.size(); ++i) {
    const auto n = read_le<std::uint32_t>(in);
    if (n > 4096) throw InvalidInput("checkpoint parameter name too long");
    std::string name(n, '\0');
    in.read(name.data(), n);
    if (!in || name != L.names[i]) throw InvalidInput("checkpoint parameter out of order: " + name);
    const auto rank = read_le<std::uint32_t>(in);
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank && r < 8; ++r) shape.push_back(read_le<std::uint64_t>(in));
    if (shape != L.shapes[i]) throw InvalidInput("checkpoint shape mismatch for " + name);
    Tensor<Real> t(shape);
    for (auto& x : t.values()) x = static_cast<Real>(read_le<double>(in));
    s.params.push_back(std::move(t));
  }
  if (read_le<std::uint8_t>(in)) {
    LoraAdapter<Real> a;
    a.target = read_le<std::uint8_t>(in) ? EditTarget::kProjectorMlp : EditTarget::kLlmMlpDown;
    a.layer = read_le<std::int32_t>(in);
    a.alpha = static_cast<Real>(read_le<double>(in));
    for (auto* t : {&a.b, &a.a}) {
      const auto len = read_le<std::uint64_t>(in);
      if (len > (1u << 24)) throw InvalidInput("checkpoint adapter too large");
      std::vector<Real> v(len);
      for (auto& x : v) x = static_cast<Real>(read_le<double>(in));
      *t = Tensor<Real>::vector(std::move(v));
    }
    s.adapter = std::move(a);
  }
  return s;
}

template <typename Real>
void save_checkpoint(const ModelState<Real>& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write checkpoint: " + path);
  write_checkpoint(s, out);
  if (!out) throw InvalidInput("failed writing checkpoint: " + path);
}

template <typename Real = double>
ModelState<Real> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read checkpoint: " + path);
  return read_checkpoint<Real>(in);
}

template <typename Real>
std::string checkpoint_bytes(const ModelState<Real>& s) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(s, out);
  return out.str();
}

// FNV-1a over the serialized checkpoint; used to assert isolation between
// per-fact edits.
template <typename Real>
std::uint64_t checkpoint_hash(const ModelState<Real>& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : checkpoint_bytes(s)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace unlab
