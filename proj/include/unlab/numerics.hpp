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

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "unlab/engine.hpp"
#include "unlab/model.hpp"
#include "unlab/tensor.hpp"

namespace unlab {

enum class ObjectiveKind {
  kCrossEntropy,
  kEmptyResponse,
  kFactErasure,
  kErrorInjection,
  kHeadProjection,
  kMaxEntropy,
  kInputRephrasing,
};

inline std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::kCrossEntropy: return "cross_entropy";
    case ObjectiveKind::kEmptyResponse: return "empty";
    case ObjectiveKind::kFactErasure: return "fact_erasure";
    case ObjectiveKind::kErrorInjection: return "error_injection";
    case ObjectiveKind::kHeadProjection: return "head_projection";
    case ObjectiveKind::kMaxEntropy: return "max_entropy";
    case ObjectiveKind::kInputRephrasing: return "input_rephrasing";
  }
  return "unknown";
}

// A differentiable objective over the readouts of one example. The meaning
// of Example::target depends on the kind:
//   cross_entropy, error_injection: the token to promote;
//   fact_erasure, input_rephrasing, head_projection: the answer to suppress;
//   empty, max_entropy: ignored.
struct Objective {
  ObjectiveKind kind = ObjectiveKind::kCrossEntropy;
  std::vector<int> layers;  // 1-based readout layers for the lens kinds
  int top_k = 20;
  double margin = 0.1;
  double label_smoothing = 0;  // cross_entropy only

  bool uses_lens() const {
    return kind == ObjectiveKind::kHeadProjection || kind == ObjectiveKind::kMaxEntropy;
  }
};

// The (top_k)-th largest logit among tokens other than `excluded`; ties go
// to the lower token index.
template <typename Real>
int kth_competitor(std::span<const Real> logits, int excluded, int k) {
  std::vector<int> order;
  order.reserve(logits.size());
  for (int t = 0; t < static_cast<int>(logits.size()); ++t) {
    if (t != excluded) order.push_back(t);
  }
  if (k < 1 || k > static_cast<int>(order.size())) {
    throw InvalidInput("top_k outside the competitor range");
  }
  std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), [&](int x, int y) {
    return logits[x] != logits[y] ? logits[x] > logits[y] : x < y;
  });
  return order[static_cast<std::size_t>(k - 1)];
}

namespace detail {

template <typename Real>
void check_layers(const Objective& obj, int n_layers) {
  if (obj.layers.empty()) throw ConfigurationError("lens objective needs a layer set");
  for (int l : obj.layers) {
    if (l < 1 || l > n_layers) throw ConfigurationError("objective layer outside 1..n_layers");
  }
}

// Loss of one example plus the logit seeds it induces, unscaled.
template <typename Real>
Real example_loss(const Objective& obj, const engine::Tape<Real>& tp, std::size_t seq,
                  int target, int n_layers, std::vector<std::vector<Real>>* seeds) {
  const auto vocab = static_cast<int>(tp.output(seq).probs.size());
  auto seed_at = [&](int layer0) -> std::vector<Real>* {
    if (!seeds) return nullptr;
    auto& v = (*seeds)[static_cast<std::size_t>(layer0)];
    if (v.empty()) v.assign(static_cast<std::size_t>(vocab), Real(0));
    return &v;
  };
  const int final0 = n_layers - 1;
  switch (obj.kind) {
    case ObjectiveKind::kCrossEntropy:
      if (obj.label_smoothing > 0) {
        // Target mixes the one-hot answer with the uniform distribution.
        const auto& p = tp.output(seq).probs;
        const auto logp = log_softmax<Real>(tp.output(seq).logits);
        const Real eps = static_cast<Real>(obj.label_smoothing);
        const Real u = eps / static_cast<Real>(vocab);
        Real loss = 0;
        for (int j = 0; j < vocab; ++j) loss -= (j == target ? Real(1) - eps + u : u) * logp[j];
        if (auto* g = seed_at(final0)) {
          for (int j = 0; j < vocab; ++j) (*g)[j] += p[j] - u;
          (*g)[target] -= Real(1) - eps;
        }
        return loss;
      }
      [[fallthrough]];
    case ObjectiveKind::kEmptyResponse:
    case ObjectiveKind::kErrorInjection: {
      const int t = obj.kind == ObjectiveKind::kEmptyResponse ? tokens::kEmpty : target;
      const auto& p = tp.output(seq).probs;
      if (auto* g = seed_at(final0)) {
        for (int j = 0; j < vocab; ++j) (*g)[j] += p[j];
        (*g)[t] -= Real(1);
      }
      return -std::log(p[static_cast<std::size_t>(t)]);
    }
    case ObjectiveKind::kFactErasure:
    case ObjectiveKind::kInputRephrasing: {
      const auto& p = tp.output(seq).probs;
      if (auto* g = seed_at(final0)) {
        for (int j = 0; j < vocab; ++j) (*g)[j] -= p[j];
        (*g)[target] += Real(1);
      }
      return std::log(p[static_cast<std::size_t>(target)]);
    }
    case ObjectiveKind::kHeadProjection: {
      Real loss = 0;
      for (int l : obj.layers) {
        const auto& z = tp.head(seq, static_cast<std::size_t>(l - 1)).logits;
        const int comp = kth_competitor<Real>(z, target, obj.top_k);
        const Real hinge = static_cast<Real>(obj.margin) + z[target] - z[comp];
        if (hinge > 0) {
          loss += hinge;
          if (auto* g = seed_at(l - 1)) {
            (*g)[target] += Real(1);
            (*g)[comp] -= Real(1);
          }
        }
      }
      return loss;
    }
    case ObjectiveKind::kMaxEntropy: {
      Real loss = 0;
      for (int l : obj.layers) {
        const auto& p = tp.head(seq, static_cast<std::size_t>(l - 1)).probs;
        Real h = 0;
        for (Real pj : p) {
          if (pj > 0) h -= pj * std::log(pj);
        }
        loss -= h;
        if (auto* g = seed_at(l - 1)) {
          for (int j = 0; j < vocab; ++j) {
            const Real pj = p[j];
            if (pj > 0) (*g)[j] += pj * (std::log(pj) + h);
          }
        }
      }
      return loss;
    }
  }
  throw ConfigurationError("unrecognized objective kind");
}

inline std::vector<const Query*> query_ptrs(const std::vector<Example>& batch) {
  std::vector<const Query*> out;
  out.reserve(batch.size());
  for (const auto& e : batch) out.push_back(&e.query);
  return out;
}

}  // namespace detail

// The adapter when one is attached, otherwise every base parameter.
template <typename Real>
engine::Trainable default_trainable(const ModelState<Real>& s) {
  engine::Trainable t;
  t.base.assign(s.layout().size(), !s.adapter.has_value());
  t.adapter = s.adapter.has_value();
  return t;
}

template <typename Real>
engine::Trainable all_base_trainable(const ModelState<Real>& s) {
  engine::Trainable t;
  t.base.assign(s.layout().size(), true);
  return t;
}

template <typename Real>
Real evaluate_loss(const ModelState<Real>& state, const std::vector<Example>& batch,
                   const Objective& obj) {
  if (batch.empty()) throw InvalidInput("batch is empty");
  if (obj.uses_lens()) detail::check_layers<Real>(obj, state.config.layers);
  const auto tp = engine::forward(state, detail::query_ptrs(batch), obj.uses_lens());
  Real total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    total += detail::example_loss<Real>(obj, tp, i, batch[i].target, state.config.layers, nullptr);
  }
  return total / static_cast<Real>(batch.size());
}

template <typename Real>
struct LossAndGrads {
  Real loss = 0;
  GradientSet<Real> grads;
};

// Mean objective over the batch and its exact gradient w.r.t. `trainable`.
template <typename Real>
LossAndGrads<Real> forward_backward(const ModelState<Real>& state,
                                    const std::vector<Example>& batch, const Objective& obj,
                                    const engine::Trainable& trainable) {
  if (batch.empty()) throw InvalidInput("batch is empty");
  if (!trainable.any()) throw InvalidInput("trainable set is empty");
  if (trainable.adapter && !state.adapter) throw StateError("no adapter attached");
  if (obj.uses_lens()) detail::check_layers<Real>(obj, state.config.layers);
  const int n = state.config.layers;
  const auto tp = engine::forward(state, detail::query_ptrs(batch), obj.uses_lens());
  engine::HeadSeeds<Real> seeds(batch.size(), std::vector<std::vector<Real>>(static_cast<std::size_t>(n)));
  LossAndGrads<Real> out;
  const Real inv = Real(1) / static_cast<Real>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.loss += detail::example_loss<Real>(obj, tp, i, batch[i].target, n, &seeds[i]);
    for (auto& s : seeds[i]) {
      for (Real& x : s) x *= inv;
    }
  }
  out.loss *= inv;
  auto gb = engine::backward(state, tp, seeds, trainable);
  const ParamLayout& L = state.layout();
  for (std::size_t i = 0; i < L.size(); ++i) {
    if (!trainable.base[i]) continue;
    const auto& m = gb.base[i];
    out.grads.emplace(L.names[i], Tensor<Real>(L.shapes[i], std::vector<Real>(m.data(), m.data() + m.size())));
  }
  if (trainable.adapter) {
    const auto& a = state.adapter->a;
    const auto& b = state.adapter->b;
    out.grads.emplace(kAdapterA, Tensor<Real>(a.shape(), std::vector<Real>(gb.adapter_a.data(), gb.adapter_a.data() + gb.adapter_a.size())));
    out.grads.emplace(kAdapterB, Tensor<Real>(b.shape(), std::vector<Real>(gb.adapter_b.data(), gb.adapter_b.data() + gb.adapter_b.size())));
  }
  return out;
}

template <typename Real>
LossAndGrads<Real> forward_backward(const ModelState<Real>& state,
                                    const std::vector<Example>& batch, const Objective& obj) {
  return forward_backward(state, batch, obj, default_trainable(state));
}

// Mutable access to a parameter by name, including the adapter vectors.
template <typename Real>
Tensor<Real>& parameter_ref(ModelState<Real>& s, const std::string& name) {
  if (name == kAdapterA || name == kAdapterB) {
    if (!s.adapter) throw StateError("no adapter attached");
    return name == kAdapterA ? s.adapter->a : s.adapter->b;
  }
  return s.param(name);
}

// Largest relative error between analytic and central finite-difference
// gradients over a random subsample of coordinates. Relative error uses the
// denominator max(|analytic|, |numeric|, abs_floor); the floor sits above the
// ~1e-10 round-off of a central difference at step 1e-5, so structurally
// zero gradients (e.g. attention key biases) do not read as failures.
template <typename Real>
double grad_check(const ModelState<Real>& state, const std::vector<Example>& batch,
                  const Objective& obj, double step, const engine::Trainable& trainable,
                  std::size_t coordinates = 200, std::uint64_t seed = 0,
                  double abs_floor = 1e-5) {
  if constexpr (!std::is_same_v<Real, double>) {
    throw InvalidInput("grad_check requires 64-bit precision");
  } else {
    if (!(step > 0)) throw InvalidInput("grad_check step must be positive");
    const auto analytic = forward_backward(state, batch, obj, trainable);
    std::vector<std::pair<std::string, std::size_t>> coords;
    for (const auto& [name, g] : analytic.grads) {
      for (std::size_t i = 0; i < g.size(); ++i) coords.emplace_back(name, i);
    }
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    if (coords.size() > coordinates) coords.resize(coordinates);
    ModelState<Real> probe = state;
    double worst = 0;
    for (const auto& [name, i] : coords) {
      Tensor<Real>& p = parameter_ref(probe, name);
      const Real orig = p[i];
      p[i] = orig + step;
      const double up = evaluate_loss(probe, batch, obj);
      p[i] = orig - step;
      const double down = evaluate_loss(probe, batch, obj);
      p[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic.grads.at(name)[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    return worst;
  }
}

template <typename Real>
double grad_check(const ModelState<Real>& state, const std::vector<Example>& batch,
                  const Objective& obj, double step, std::size_t coordinates = 200,
                  std::uint64_t seed = 0) {
  return grad_check(state, batch, obj, step, default_trainable(state), coordinates, seed);
}

}  // namespace unlab
