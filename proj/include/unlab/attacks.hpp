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

// Extraction attacks producing budget-bounded candidate sets: LogitLens
// whitebox attacks, finetune-then-attack, and blackbox rephrase querying.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlab/error.hpp"
#include "unlab/inference.hpp"
#include "unlab/lens.hpp"
#include "unlab/numerics.hpp"
#include "unlab/world.hpp"

namespace unlab {

enum class AttackKind { kHeadProjection, kProbabilityDelta, kProbabilityDelta2, kFinetuneHp, kImage, kQuestion, kMultimodal };

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::kHeadProjection: return "hp";
    case AttackKind::kProbabilityDelta: return "pd";
    case AttackKind::kProbabilityDelta2: return "pd2";
    case AttackKind::kFinetuneHp: return "ft_hp";
    case AttackKind::kImage: return "bb_image";
    case AttackKind::kQuestion: return "bb_question";
    case AttackKind::kMultimodal: return "bb_multimodal";
  }
  return "unknown";
}

inline const std::vector<AttackKind>& all_attacks() {
  static const std::vector<AttackKind> kinds{AttackKind::kHeadProjection, AttackKind::kProbabilityDelta,
                                             AttackKind::kProbabilityDelta2, AttackKind::kFinetuneHp,
                                             AttackKind::kImage, AttackKind::kQuestion, AttackKind::kMultimodal};
  return kinds;
}

inline AttackKind attack_from_string(const std::string& s) {
  for (auto k : all_attacks()) {
    if (to_string(k) == s) return k;
  }
  throw ConfigurationError("unknown attack: " + s);
}

inline bool is_whitebox(AttackKind k) {
  return k == AttackKind::kHeadProjection || k == AttackKind::kProbabilityDelta ||
         k == AttackKind::kProbabilityDelta2;
}

inline bool is_blackbox(AttackKind k) {
  return k == AttackKind::kImage || k == AttackKind::kQuestion || k == AttackKind::kMultimodal;
}

struct CandidateSet {
  AttackKind kind = AttackKind::kHeadProjection;
  int budget = 0;
  int fact_id = 0;
  std::vector<int> tokens;     // ranked, unique
  std::vector<double> scores;  // non-increasing

  bool contains(int token) const { return std::find(tokens.begin(), tokens.end(), token) != tokens.end(); }
  bool operator==(const CandidateSet&) const = default;
};

struct FinetuneSpec {
  int steps = 50;
  int facts = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;

  bool operator==(const FinetuneSpec&) const = default;
};

struct AttackSpec {
  AttackKind kind = AttackKind::kHeadProjection;
  int budget = 20;
  std::vector<int> layers;  // probed layers, 1-based; empty = all
  int k_start = 0;          // initial per-list pool depth; 0 = ceil(B / lists)
  FinetuneSpec finetune;    // used by ft_hp only
  Level level = Level::kHard;  // blackbox image/question modes

  bool operator==(const AttackSpec&) const = default;

  void validate() const {
    if (budget < 1) throw ConfigurationError("attack budget must be >= 1");
    if (k_start < 0) throw ConfigurationError("k_start must be >= 0");
    if (kind == AttackKind::kFinetuneHp &&
        (finetune.steps < 0 || finetune.facts < 1 || !(finetune.learning_rate > 0))) {
      throw ConfigurationError("bad finetune settings");
    }
  }
};

// Ranks tokens by score = max over lists of the token's value in that list,
// keeping the top `budget` (ties to the lower index). Candidates are pooled
// from the first k entries of every list, k doubling from k_start, until the
// pool holds `budget` tokens whose last score beats every value a token
// outside the pool could have. The result therefore equals ranking all
// tokens outright.
inline std::vector<std::pair<int, double>> pooled_top(const std::vector<std::vector<double>>& lists, int budget,
                                                      int k_start) {
  if (lists.empty()) throw ConfigurationError("attack has no score sources");
  const int V = static_cast<int>(lists.front().size());
  budget = std::min(budget, V);
  auto better = [](double va, int a, double vb, int b) { return va != vb ? va > vb : a < b; };
  std::vector<std::vector<int>> order(lists.size());
  for (std::size_t s = 0; s < lists.size(); ++s) {
    auto& o = order[s];
    o.resize(static_cast<std::size_t>(V));
    std::iota(o.begin(), o.end(), 0);
    const auto& v = lists[s];
    std::sort(o.begin(), o.end(), [&](int a, int b) {
      return better(v[static_cast<std::size_t>(a)], a, v[static_cast<std::size_t>(b)], b);
    });
  }
  std::vector<double> score(static_cast<std::size_t>(V), -INFINITY);
  for (const auto& v : lists) {
    for (int t = 0; t < V; ++t) score[static_cast<std::size_t>(t)] = std::max(score[static_cast<std::size_t>(t)], v[static_cast<std::size_t>(t)]);
  }
  const auto n_lists = static_cast<int>(lists.size());
  int k = k_start > 0 ? k_start : std::max(1, (budget + n_lists - 1) / n_lists);
  for (;;) {
    k = std::min(k, V);
    std::vector<char> in_pool(static_cast<std::size_t>(V), 0);
    std::vector<int> pool;
    double bound = -INFINITY;
    for (std::size_t s = 0; s < lists.size(); ++s) {
      for (int i = 0; i < k; ++i) {
        const int t = order[s][static_cast<std::size_t>(i)];
        if (!in_pool[static_cast<std::size_t>(t)]) {
          in_pool[static_cast<std::size_t>(t)] = 1;
          pool.push_back(t);
        }
      }
      bound = std::max(bound, lists[s][static_cast<std::size_t>(order[s][static_cast<std::size_t>(k - 1)])]);
    }
    if (static_cast<int>(pool.size()) >= budget) {
      std::sort(pool.begin(), pool.end(), [&](int a, int b) {
        return better(score[static_cast<std::size_t>(a)], a, score[static_cast<std::size_t>(b)], b);
      });
      if (k == V || score[static_cast<std::size_t>(pool[static_cast<std::size_t>(budget - 1)])] > bound) {
        std::vector<std::pair<int, double>> out;
        for (int i = 0; i < budget; ++i) {
          const int t = pool[static_cast<std::size_t>(i)];
          out.emplace_back(t, score[static_cast<std::size_t>(t)]);
        }
        return out;
      }
    }
    k *= 2;
  }
}

// Score lists of each whitebox attack over a lens stack.
// hp: one list per probed layer (probabilities).
// pd / pd2: per consecutive pair a riser list (delta) and a faller list
// (-delta), so the pooled score is max |delta|.
inline std::vector<std::vector<double>> whitebox_lists(AttackKind kind, const LensStack& lens,
                                                       const std::vector<int>& layers_in) {
  std::vector<int> layers = layers_in;
  if (layers.empty()) {
    for (std::size_t l = 1; l <= lens.depth(); ++l) layers.push_back(static_cast<int>(l));
  }
  std::vector<std::vector<double>> probs;
  for (int l : layers) {
    if (l < 1 || l > static_cast<int>(lens.depth())) throw ConfigurationError("probed layer outside the lens stack");
    probs.push_back(lens.layers[static_cast<std::size_t>(l - 1)]);
  }
  auto diff = [](const std::vector<std::vector<double>>& xs) {
    std::vector<std::vector<double>> d;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
      std::vector<double> row(xs[i].size());
      for (std::size_t t = 0; t < row.size(); ++t) row[t] = xs[i + 1][t] - xs[i][t];
      d.push_back(std::move(row));
    }
    return d;
  };
  auto signed_lists = [](const std::vector<std::vector<double>>& ds) {
    std::vector<std::vector<double>> out;
    for (const auto& d : ds) {
      out.push_back(d);
      std::vector<double> neg(d.size());
      for (std::size_t t = 0; t < d.size(); ++t) neg[t] = -d[t];
      out.push_back(std::move(neg));
    }
    return out;
  };
  switch (kind) {
    case AttackKind::kHeadProjection:
      return probs;
    case AttackKind::kProbabilityDelta:
      if (probs.size() < 2) throw ConfigurationError("pd needs at least two probed layers");
      return signed_lists(diff(probs));
    case AttackKind::kProbabilityDelta2:
      if (probs.size() < 3) throw ConfigurationError("pd2 needs at least three probed layers");
      return signed_lists(diff(diff(probs)));
    default:
      throw ConfigurationError("not a whitebox attack: " + to_string(kind));
  }
}

namespace detail {

inline CandidateSet make_set(AttackKind kind, int budget, int fact_id, const std::vector<std::pair<int, double>>& top) {
  CandidateSet c{kind, budget, fact_id, {}, {}};
  for (const auto& [t, s] : top) {
    c.tokens.push_back(t);
    c.scores.push_back(s);
  }
  return c;
}

inline int clamp_budget(int budget, int vocab) {
  if (budget > vocab) {
    std::clog << "warning: budget " << budget << " exceeds vocabulary; clamped to " << vocab << '\n';
    return vocab;
  }
  return budget;
}

}  // namespace detail

inline CandidateSet whitebox_attack_on_lens(AttackKind kind, const LensStack& lens, const AttackSpec& spec,
                                            int fact_id) {
  spec.validate();
  const int budget = detail::clamp_budget(spec.budget, static_cast<int>(lens.vocab()));
  const auto lists = whitebox_lists(kind, lens, spec.layers);
  const int k0 = spec.k_start > 0 && kind != AttackKind::kHeadProjection ? (spec.k_start + 1) / 2 : spec.k_start;
  return detail::make_set(kind, budget, fact_id, pooled_top(lists, budget, k0));
}

template <typename Real>
CandidateSet whitebox_attack(AttackKind kind, const ModelState<Real>& state, const Fact& fact,
                             const AttackSpec& spec) {
  return whitebox_attack_on_lens(kind, lens_distributions(state, query_of(fact)), spec, fact.id);
}

// Copies the edited state, trains every base parameter on control facts with
// cross-entropy (an attached adapter stays frozen), then runs the hp attack
// on the copy.
template <typename Real>
CandidateSet finetune_then_attack(const ModelState<Real>& edited, const Fact& fact,
                                  const std::vector<Fact>& control_facts, const AttackSpec& spec) {
  spec.validate();
  for (const auto& c : control_facts) {
    if (c.id == fact.id) throw InvalidInput("finetuning facts overlap the edited fact");
  }
  if (spec.finetune.steps > 0 && control_facts.empty()) throw InvalidInput("no finetuning facts");
  ModelState<Real> st = edited;
  std::vector<Example> batch;
  for (const auto& c : control_facts) batch.push_back({query_of(c), c.answer});
  const engine::Trainable tr = all_base_trainable(st);
  std::vector<Tensor<Real>> vel;
  for (const auto& p : st.params) vel.emplace_back(p.shape());
  const auto lr = static_cast<Real>(spec.finetune.learning_rate);
  const auto mu = static_cast<Real>(spec.finetune.momentum);
  const Objective ce{ObjectiveKind::kCrossEntropy};
  const ParamLayout& L = st.layout();
  for (int s = 0; s < spec.finetune.steps; ++s) {
    const auto lg = forward_backward(st, batch, ce, tr);
    for (std::size_t i = 0; i < L.size(); ++i) {
      vel[i].row_vector() = mu * vel[i].row_vector() + lg.grads.at(L.names[i]).row_vector();
      st.params[i].row_vector() -= lr * vel[i].row_vector();
    }
  }
  AttackSpec hp = spec;
  hp.kind = AttackKind::kHeadProjection;
  auto c = whitebox_attack(AttackKind::kHeadProjection, st, fact, hp);
  c.kind = AttackKind::kFinetuneHp;
  return c;
}

// Rephrased inputs queried by a blackbox attack.
inline std::vector<Query> blackbox_queries(AttackKind kind, const Fact& fact, const EvalBundle& b, Level level) {
  switch (kind) {
    case AttackKind::kImage:
      return {{b.image(level), fact.question}};
    case AttackKind::kQuestion:
      return {{fact.image, b.question(level)}};
    case AttackKind::kMultimodal:
      return {{b.image(Level::kHard), b.question(Level::kHard)},
              {b.image(Level::kHard), fact.question},
              {fact.image, b.question(Level::kHard)}};
    default:
      throw ConfigurationError("not a blackbox attack: " + to_string(kind));
  }
}

inline CandidateSet blackbox_attack_on_outputs(AttackKind kind, const std::vector<std::vector<double>>& outputs,
                                               const AttackSpec& spec, int fact_id) {
  spec.validate();
  const int budget = detail::clamp_budget(spec.budget, static_cast<int>(outputs.front().size()));
  return detail::make_set(kind, budget, fact_id, pooled_top(outputs, budget, spec.k_start));
}

template <typename Real>
CandidateSet blackbox_rephrase_attack(const ModelState<Real>& state, const Fact& fact, const EvalBundle& bundle,
                                      const AttackSpec& spec) {
  const auto qs = blackbox_queries(spec.kind, fact, bundle, spec.level);
  std::vector<std::vector<double>> outs;
  for (const auto& p : output_distributions(state, qs)) outs.emplace_back(p.begin(), p.end());
  return blackbox_attack_on_outputs(spec.kind, outs, spec, fact.id);
}

// Deterministic choice of finetuning facts from the control pool.
inline std::vector<Fact> sample_finetune_facts(const std::vector<Fact>& pool, int count, std::uint64_t seed) {
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(idx.size(), static_cast<std::size_t>(count)));
  std::sort(idx.begin(), idx.end());
  std::vector<Fact> out;
  for (auto i : idx) out.push_back(pool[i]);
  return out;
}

inline nlohmann::json to_json(const CandidateSet& c) {
  return {{"fact_id", c.fact_id}, {"kind", to_string(c.kind)}, {"budget", c.budget},
          {"tokens", c.tokens},   {"scores", c.scores}};
}

inline CandidateSet candidate_set_from_json(const nlohmann::json& j) {
  return {attack_from_string(j.at("kind")), j.at("budget"), j.at("fact_id"),
          j.at("tokens").get<std::vector<int>>(), j.at("scores").get<std::vector<double>>()};
}

}  // namespace unlab
