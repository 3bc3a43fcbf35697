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

// Rank-1 adapter editing driven by a defense objective, with stopping on
// rewrite score plus the objective's own success condition.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlab/error.hpp"
#include "unlab/lens.hpp"
#include "unlab/model.hpp"
#include "unlab/numerics.hpp"
#include "unlab/world.hpp"

namespace unlab {

// Upper half of the stack: {ceil(n/2), ..., n}.
inline std::vector<int> default_lens_layers(int n_layers) {
  std::vector<int> out;
  for (int l = (n_layers + 1) / 2; l <= n_layers; ++l) out.push_back(l);
  return out;
}

// The same absolute layer at every depth, so scaled models are edited at
// the matching position.
inline int default_edit_layer(int /*n_layers*/) { return 1; }

inline bool is_defense(ObjectiveKind k) { return k != ObjectiveKind::kCrossEntropy; }

inline ObjectiveKind defense_from_string(const std::string& s) {
  for (auto k : {ObjectiveKind::kEmptyResponse, ObjectiveKind::kFactErasure, ObjectiveKind::kErrorInjection,
                 ObjectiveKind::kHeadProjection, ObjectiveKind::kMaxEntropy, ObjectiveKind::kInputRephrasing}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigurationError("unknown defense: " + s);
}

inline const std::vector<ObjectiveKind>& all_defenses() {
  static const std::vector<ObjectiveKind> kinds{
      ObjectiveKind::kEmptyResponse,  ObjectiveKind::kFactErasure, ObjectiveKind::kErrorInjection,
      ObjectiveKind::kHeadProjection, ObjectiveKind::kMaxEntropy,  ObjectiveKind::kInputRephrasing};
  return kinds;
}

struct DefenseSpec {
  ObjectiveKind kind = ObjectiveKind::kFactErasure;
  std::vector<int> layers;  // lens layers; empty = default upper half
  int top_k = 20;
  double margin = 0.1;
  int false_target = -1;  // error injection; -1 = the bundle's alternative answer
  EditTarget target = EditTarget::kLlmMlpDown;
  int edit_layer = 0;  // 0 = default for the model depth
  double alpha = 1;
  double init_scale = 1;  // expected norm of the initial input vector
  double learning_rate = 0.1;
  int max_steps = 500;
  double tau = 0.85;
  bool merge = true;

  bool operator==(const DefenseSpec&) const = default;

  std::vector<int> resolved_layers(int n_layers) const {
    std::vector<int> l = layers.empty() ? default_lens_layers(n_layers) : layers;
    for (int x : l) {
      if (x < 1 || x > n_layers) throw ConfigurationError("defense layer outside 1..n_layers");
    }
    if ((kind == ObjectiveKind::kHeadProjection || kind == ObjectiveKind::kMaxEntropy) &&
        std::find(l.begin(), l.end(), n_layers) == l.end()) {
      l.push_back(n_layers);
    }
    return l;
  }

  int resolved_edit_layer(int n_layers) const {
    if (target == EditTarget::kProjectorMlp) return 0;
    const int l = edit_layer == 0 ? default_edit_layer(n_layers) : edit_layer;
    if (l < 1 || l > n_layers) throw ConfigurationError("edit layer outside 1..n_layers");
    return l;
  }

  void validate(int n_layers, int vocab) const {
    if (!is_defense(kind)) throw ConfigurationError("cross_entropy is not a defense");
    if (top_k < 1 || top_k >= vocab) throw ConfigurationError("top_k must lie in 1..V-1");
    if (!(learning_rate > 0) || max_steps < 0) throw ConfigurationError("bad edit optimizer settings");
    if (!(tau <= 1)) throw ConfigurationError("tau must not exceed 1");
    resolved_layers(n_layers);
    resolved_edit_layer(n_layers);
  }
};

// Attaches a zero-effect rank-1 adapter: b = 0, a ~ N(0, init_scale^2 / in).
template <typename Real>
ModelState<Real> attach_lora(ModelState<Real> state, EditTarget target, int layer, double alpha,
                             std::uint64_t seed, double init_scale = 1) {
  if (state.adapter) throw StateError("an adapter is already attached");
  const ModelConfig& c = state.config;
  std::size_t in = 0, out = 0;
  if (target == EditTarget::kProjectorMlp) {
    layer = 0;
    in = static_cast<std::size_t>(c.width);
    out = static_cast<std::size_t>(c.prefix_len * c.width);
  } else {
    if (layer < 1 || layer > c.layers) throw ConfigurationError("adapter layer outside 1..n_layers");
    in = static_cast<std::size_t>(c.hidden_width());
    out = static_cast<std::size_t>(c.width);
  }
  LoraAdapter<Real> ad{target, layer, static_cast<Real>(alpha), Tensor<Real>({out}), Tensor<Real>({in})};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, init_scale / std::sqrt(static_cast<double>(in)));
  for (auto& x : ad.a.values()) x = static_cast<Real>(n(rng));
  state.adapter = std::move(ad);
  return state;
}

template <typename Real>
const std::string& adapter_weight_name(const ModelState<Real>& s) {
  const auto& ad = *s.adapter;
  const ParamLayout& L = s.layout();
  return L.names[ad.target == EditTarget::kProjectorMlp ? L.proj_w2
                                                        : L.layers[static_cast<std::size_t>(ad.layer - 1)].down_w];
}

// Folds the adapter into its weight: W <- W + alpha a b^T.
template <typename Real>
ModelState<Real> merge_lora(ModelState<Real> state) {
  if (!state.adapter) throw StateError("no adapter to merge");
  const auto& ad = *state.adapter;
  auto w = state.param(adapter_weight_name(state)).matrix();
  w.noalias() += ad.alpha * ad.a.row_vector().transpose() * ad.b.row_vector();
  state.adapter.reset();
  return state;
}

struct DefenseReport {
  int fact_id = 0;
  ObjectiveKind kind = ObjectiveKind::kFactErasure;
  EditTarget target = EditTarget::kLlmMlpDown;
  int edit_layer = 0;
  double p_pre = 0;
  double p_post = 0;
  int steps = 0;
  bool success = false;
  std::vector<double> loss_trace;

  double rewrite_score() const {
    if (!(p_pre > 0)) throw InvalidInput("rewrite score undefined for p_pre = 0");
    return (p_pre - p_post) / p_pre;
  }
};

inline nlohmann::json to_json(const DefenseReport& r) {
  return {{"fact_id", r.fact_id},
          {"defense", to_string(r.kind)},
          {"target", to_string(r.target)},
          {"edit_layer", r.edit_layer},
          {"p_pre", r.p_pre},
          {"p_post", r.p_post},
          {"rewrite_score", r.rewrite_score()},
          {"steps", r.steps},
          {"success", r.success},
          {"loss_trace", r.loss_trace}};
}

inline DefenseReport defense_report_from_json(const nlohmann::json& j) {
  DefenseReport r;
  r.fact_id = j.at("fact_id");
  r.kind = defense_from_string(j.at("defense"));
  r.target = edit_target_from_string(j.at("target").get<std::string>());
  r.edit_layer = j.at("edit_layer");
  r.p_pre = j.at("p_pre");
  r.p_post = j.at("p_post");
  r.steps = j.at("steps");
  r.success = j.at("success");
  r.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  return r;
}

// The batch a defense descends on, and its objective.
inline std::pair<std::vector<Example>, Objective> defense_batch(const Fact& fact, const EvalBundle* bundle,
                                                                const DefenseSpec& spec, int n_layers) {
  Objective obj{spec.kind, {}, spec.top_k, spec.margin};
  if (obj.uses_lens()) obj.layers = spec.resolved_layers(n_layers);
  std::vector<Example> batch;
  const Query q = query_of(fact);
  switch (spec.kind) {
    case ObjectiveKind::kErrorInjection: {
      int t = spec.false_target;
      if (t < 0) {
        if (!bundle) throw ConfigurationError("error injection needs a false target or a bundle");
        t = bundle->alternative_answer;
      }
      if (t == fact.answer) throw ConfigurationError("false target equals the true answer");
      batch.push_back({q, t});
      break;
    }
    case ObjectiveKind::kInputRephrasing: {
      if (!bundle) throw ConfigurationError("input rephrasing needs the fact's bundle");
      const auto& rv = bundle->image(Level::kEasy);
      const auto& rq = bundle->question(Level::kEasy);
      batch = {{q, fact.answer},
               {{rv, fact.question}, fact.answer},
               {{fact.image, rq}, fact.answer},
               {{rv, rq}, fact.answer}};
      break;
    }
    default:
      batch.push_back({q, fact.answer});
  }
  return {std::move(batch), obj};
}

template <typename Real>
LossAndGrads<Real> defense_loss(const ModelState<Real>& state, const Fact& fact, const EvalBundle* bundle,
                                const DefenseSpec& spec) {
  if (!state.adapter) throw StateError("defense loss needs an attached adapter");
  const auto [batch, obj] = defense_batch(fact, bundle, spec, state.config.layers);
  return forward_backward(state, batch, obj);
}

namespace detail {

// Whether the kind's own success condition holds on the fact's lens stack.
inline bool defense_condition(const DefenseSpec& spec, const LensStack& lens, int answer, int false_target,
                              const std::vector<int>& layers) {
  const auto& out = lens.output();
  switch (spec.kind) {
    case ObjectiveKind::kEmptyResponse:
      return static_cast<int>(argmax<double>(out)) == tokens::kEmpty;
    case ObjectiveKind::kErrorInjection:
      return static_cast<int>(argmax<double>(out)) == false_target;
    case ObjectiveKind::kHeadProjection:
      for (int l : layers) {
        if (token_rank(lens.layers[static_cast<std::size_t>(l - 1)], answer) <= spec.top_k) return false;
      }
      return true;
    default:
      return true;
  }
}

}  // namespace detail

template <typename Real>
struct EditResult {
  ModelState<Real> state;
  DefenseReport report;
};

// Gradient descent on the adapter until rewrite >= tau and the success
// condition holds, or max_steps. Base parameters are never modified.
template <typename Real>
EditResult<Real> edit(const ModelState<Real>& base, const Fact& fact, const EvalBundle* bundle,
                      const DefenseSpec& spec, std::uint64_t seed) {
  const int n = base.config.layers;
  spec.validate(n, base.config.vocab_size);
  if (base.adapter) throw StateError("edit expects a model without an adapter");
  const auto [batch, obj] = defense_batch(fact, bundle, spec, n);
  const int false_target = spec.kind == ObjectiveKind::kErrorInjection ? batch.front().target : -1;
  const auto layers = spec.resolved_layers(n);
  const Query q = query_of(fact);
  DefenseReport rep;
  rep.fact_id = fact.id;
  rep.kind = spec.kind;
  rep.target = spec.target;
  rep.edit_layer = spec.resolved_edit_layer(n);
  {
    const auto lens = lens_distributions(base, q);
    rep.p_pre = lens.output()[static_cast<std::size_t>(fact.answer)];
  }
  if (!(rep.p_pre > 0)) throw InvalidInput("model assigns zero probability to the answer");
  ModelState<Real> st = attach_lora(base, spec.target, rep.edit_layer, spec.alpha, seed, spec.init_scale);
  const auto lr = static_cast<Real>(spec.learning_rate);
  for (int step = 0;; ++step) {
    const auto lens = lens_distributions(st, q);
    rep.p_post = lens.output()[static_cast<std::size_t>(fact.answer)];
    rep.steps = step;
    if (rep.rewrite_score() >= spec.tau && detail::defense_condition(spec, lens, fact.answer, false_target, layers)) {
      rep.success = true;
      break;
    }
    if (step == spec.max_steps) break;
    auto lg = forward_backward(st, batch, obj);
    rep.loss_trace.push_back(static_cast<double>(lg.loss));
    st.adapter->a.row_vector() -= lr * lg.grads.at(kAdapterA).row_vector();
    st.adapter->b.row_vector() -= lr * lg.grads.at(kAdapterB).row_vector();
  }
  if (spec.merge) st = merge_lora(std::move(st));
  return {std::move(st), std::move(rep)};
}

}  // namespace unlab
