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

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "unlab/error.hpp"
#include "unlab/tensor.hpp"

namespace unlab {

// Reserved vocabulary. Everything at or above kFirstFreeToken belongs to the
// world generator.
namespace tokens {
inline constexpr int kPad = 0;
inline constexpr int kEmpty = 1;  // the "I don't know" response
inline constexpr int kJailbreak[4] = {2, 3, 4, 5};
inline constexpr int kFirstFreeToken = 6;
}  // namespace tokens

struct ModelConfig {
  int vocab_size = 256;
  int width = 64;
  int layers = 4;
  int heads = 4;
  int mlp_factor = 4;
  int image_dim = 32;
  int prefix_len = 2;
  int max_seq_len = 32;
  std::uint64_t seed = 1;

  int head_dim() const { return width / heads; }
  int hidden_width() const { return width * mlp_factor; }

  void validate() const {
    if (vocab_size <= tokens::kFirstFreeToken) {
      throw ConfigurationError("vocab_size must leave room for the reserved tokens");
    }
    if (width <= 0 || layers <= 0 || heads <= 0 || mlp_factor <= 0 || image_dim <= 0 ||
        prefix_len <= 0 || max_seq_len <= prefix_len) {
      throw ConfigurationError("model dimensions must be positive");
    }
    if (width % heads != 0) throw ConfigurationError("width must be divisible by heads");
  }

  // The 2x model of the scaling study: double width and depth.
  ModelConfig scaled() const {
    ModelConfig out = *this;
    out.width *= 2;
    out.layers *= 2;
    return out;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Indices of every base parameter inside ModelState::params.
struct ParamLayout {
  struct Layer {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_g, ln2_b, up_w, up_b, down_w, down_b;
  };

  std::size_t proj_w1, proj_b1, proj_w2, proj_b2, tok_emb, pos_emb;
  std::vector<Layer> layers;
  std::size_t lnf_g, lnf_b, unembed;
  std::vector<std::string> names;
  std::vector<std::vector<std::size_t>> shapes;

  explicit ParamLayout(const ModelConfig& c) {
    const auto d = static_cast<std::size_t>(c.width);
    const auto h = static_cast<std::size_t>(c.hidden_width());
    const auto pd = static_cast<std::size_t>(c.prefix_len) * d;
    proj_w1 = add("proj.w1", {static_cast<std::size_t>(c.image_dim), d});
    proj_b1 = add("proj.b1", {d});
    proj_w2 = add("proj.w2", {d, pd});
    proj_b2 = add("proj.b2", {pd});
    tok_emb = add("tok_emb", {static_cast<std::size_t>(c.vocab_size), d});
    pos_emb = add("pos_emb", {static_cast<std::size_t>(c.max_seq_len), d});
    for (int l = 1; l <= c.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_g = add(p + "ln1.g", {d});
      L.ln1_b = add(p + "ln1.b", {d});
      L.wq = add(p + "attn.wq", {d, d});
      L.bq = add(p + "attn.bq", {d});
      L.wk = add(p + "attn.wk", {d, d});
      L.bk = add(p + "attn.bk", {d});
      L.wv = add(p + "attn.wv", {d, d});
      L.bv = add(p + "attn.bv", {d});
      L.wo = add(p + "attn.wo", {d, d});
      L.bo = add(p + "attn.bo", {d});
      L.ln2_g = add(p + "ln2.g", {d});
      L.ln2_b = add(p + "ln2.b", {d});
      L.up_w = add(p + "mlp.up.w", {d, h});
      L.up_b = add(p + "mlp.up.b", {h});
      L.down_w = add(p + "mlp.down.w", {h, d});
      L.down_b = add(p + "mlp.down.b", {d});
      layers.push_back(L);
    }
    lnf_g = add("ln_f.g", {d});
    lnf_b = add("ln_f.b", {d});
    unembed = add("unembed", {d, static_cast<std::size_t>(c.vocab_size)});
  }

  std::size_t size() const { return names.size(); }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw InvalidInput("unknown parameter: " + std::string(name));
  }

 private:
  std::size_t add(std::string name, std::vector<std::size_t> shape) {
    names.push_back(std::move(name));
    shapes.push_back(std::move(shape));
    return names.size() - 1;
  }
};

enum class EditTarget { kLlmMlpDown, kProjectorMlp };

inline std::string to_string(EditTarget t) {
  return t == EditTarget::kLlmMlpDown ? "llm_mlp" : "projector_mlp";
}

inline EditTarget edit_target_from_string(std::string_view s) {
  if (s == "llm_mlp" || s == "llm_mlp_down") return EditTarget::kLlmMlpDown;
  if (s == "projector_mlp" || s == "projector") return EditTarget::kProjectorMlp;
  throw ConfigurationError("unknown edit target: " + std::string(s));
}

inline constexpr const char* kAdapterB = "adapter.b";
inline constexpr const char* kAdapterA = "adapter.a";

// Rank-1 adapter: the target weight W (in x out, row-vector convention)
// behaves as W + alpha * a b^T while attached.
template <typename Real>
struct LoraAdapter {
  EditTarget target = EditTarget::kLlmMlpDown;
  int layer = 0;  // 1-based block index; 0 for the projector
  Real alpha = 1;
  Tensor<Real> b;  // output dimension
  Tensor<Real> a;  // input dimension
};

template <typename Real>
struct ModelState {
  ModelConfig config;
  std::vector<Tensor<Real>> params;  // ordered as layout()
  std::optional<LoraAdapter<Real>> adapter;

  ModelState() = default;
  explicit ModelState(const ModelConfig& c)
      : config(c), layout_(std::make_shared<const ParamLayout>(c)) {}

  const ParamLayout& layout() const {
    if (!layout_) throw StateError("model state has no configuration");
    return *layout_;
  }

  const Tensor<Real>& param(std::string_view name) const {
    return params[layout().index_of(name)];
  }
  Tensor<Real>& param(std::string_view name) { return params[layout().index_of(name)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

 private:
  std::shared_ptr<const ParamLayout> layout_;
};

// Deterministic init: N(0, 0.02) weights and embeddings, zero biases, unit
// layer-norm gains.
template <typename Real = double>
ModelState<Real> init_model(const ModelConfig& config) {
  config.validate();
  ModelState<Real> state(config);
  const ParamLayout& layout = state.layout();
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    Tensor<Real> t(layout.shapes[i]);
    const std::string& name = layout.names[i];
    const bool is_gain = name.ends_with(".g");
    const bool is_bias = layout.shapes[i].size() == 1 && !is_gain;
    if (is_gain) {
      t.fill(Real(1));
    } else if (!is_bias) {
      for (auto& x : t.values()) x = static_cast<Real>(normal(rng));
    }
    state.params.push_back(std::move(t));
  }
  return state;
}

// Copy of a state in another precision; the adapter is converted too.
template <typename To, typename From>
ModelState<To> cast_state(const ModelState<From>& s) {
  ModelState<To> out(s.config);
  for (const auto& p : s.params) out.params.push_back(p.template cast<To>());
  if (s.adapter) {
    out.adapter = LoraAdapter<To>{s.adapter->target, s.adapter->layer, static_cast<To>(s.adapter->alpha),
                                  s.adapter->b.template cast<To>(), s.adapter->a.template cast<To>()};
  }
  return out;
}

// One multimodal knowledge item: image features, question tokens, single
// answer token.
struct Fact {
  int id = 0;
  std::vector<double> image;
  std::vector<int> question;
  int answer = 0;
  bool operator==(const Fact&) const = default;
};

// A model input without a label.
struct Query {
  std::vector<double> image;
  std::vector<int> tokens;
  bool operator==(const Query&) const = default;
};

inline Query query_of(const Fact& f) { return {f.image, f.question}; }

// A model input plus the token its objective refers to.
struct Example {
  Query query;
  int target = 0;
};

}  // namespace unlab
