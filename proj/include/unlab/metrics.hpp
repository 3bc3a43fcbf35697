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

// Evaluation quantities: attack success at budget B, rewrite score, and
// accuracy damage on control sets (pre minus post, positive = damage).

#include <string>
#include <vector>

#include "unlab/attacks.hpp"
#include "unlab/error.hpp"
#include "unlab/inference.hpp"
#include "unlab/world.hpp"

namespace unlab {

inline double attack_success(const std::vector<CandidateSet>& candidates, const std::vector<int>& answers) {
  if (candidates.size() != answers.size()) throw InvalidInput("candidate and answer counts differ");
  if (candidates.empty()) throw InvalidInput("no candidate sets");
  for (const auto& c : candidates) {
    if (c.budget != candidates.front().budget) throw InvalidInput("candidate sets differ in budget");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) hits += candidates[i].contains(answers[i]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(candidates.size());
}

inline double rewrite_score(double p_pre, double p_post) {
  if (!(p_pre > 0 && p_pre <= 1) || !(p_post >= 0 && p_post <= 1)) {
    throw InvalidInput("rewrite score needs 0 < p_pre <= 1 and 0 <= p_post <= 1");
  }
  return (p_pre - p_post) / p_pre;
}

enum class ControlKind { kRandom, kQuestionNeighborhood, kImageNeighborhood };

inline std::string to_string(ControlKind k) {
  switch (k) {
    case ControlKind::kRandom: return "random";
    case ControlKind::kQuestionNeighborhood: return "question_neighborhood";
    case ControlKind::kImageNeighborhood: return "image_neighborhood";
  }
  return "unknown";
}

struct ControlSet {
  ControlKind kind = ControlKind::kRandom;
  std::vector<Example> items;  // input and expected answer
};

template <typename Real>
double accuracy(const ModelState<Real>& state, const ControlSet& control) {
  if (control.items.empty()) throw InvalidInput("control set is empty");
  std::vector<Query> qs;
  for (const auto& e : control.items) qs.push_back(e.query);
  const auto pred = greedy_answers(state, qs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == control.items[i].target ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

template <typename Real>
double delta_accuracy(const ModelState<Real>& pre, const ModelState<Real>& post, const ControlSet& control) {
  if (!(pre.config == post.config)) throw InvalidInput("states differ in configuration");
  return accuracy(pre, control) - accuracy(post, control);
}

// Control sets of one fact. Image-neighborhood levels: 0 easy, 1 hard,
// -1 both.
inline ControlSet random_controls(const World& w, std::size_t fact_index) {
  ControlSet c{ControlKind::kRandom, {}};
  for (int i : w.bundles[fact_index].random_controls) {
    const Fact& f = w.controls[static_cast<std::size_t>(i)];
    c.items.push_back({query_of(f), f.answer});
  }
  return c;
}

inline ControlSet question_neighborhood(const World& w, std::size_t fact_index) {
  ControlSet c{ControlKind::kQuestionNeighborhood, {}};
  const Fact& f = w.facts[fact_index];
  for (const auto& n : w.bundles[fact_index].question_neighbors) c.items.push_back({{f.image, n.question}, n.answer});
  return c;
}

inline ControlSet image_neighborhood(const World& w, std::size_t fact_index, int level = -1) {
  ControlSet c{ControlKind::kImageNeighborhood, {}};
  const Fact& f = w.facts[fact_index];
  const auto& b = w.bundles[fact_index];
  for (int l = 0; l < 2; ++l) {
    if (level < 0 || level == l) {
      c.items.push_back({{b.image_neighbors[static_cast<std::size_t>(l)], f.question}, b.image_neighbor_answer});
    }
  }
  return c;
}

}  // namespace unlab
