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

// Automated quality filter: a fact is retained only if the pretrained model
// answers it, every rephrase elicits the same answer, every neighbor elicits
// its own answer, and no lens layer ranks another token above the answer.

#include <array>
#include <vector>

#include "unlab/inference.hpp"
#include "unlab/lens.hpp"
#include "unlab/world.hpp"

namespace unlab {

// True when the answer's final probability is at least every other token's
// probability at every lens layer (ties resolved toward the lower index).
inline bool answer_dominates(const LensStack& lens, int answer) {
  const double pa = lens.output()[static_cast<std::size_t>(answer)];
  for (const auto& layer : lens.layers) {
    for (std::size_t t = 0; t < layer.size(); ++t) {
      const int ti = static_cast<int>(t);
      if (ti != answer && (layer[t] > pa || (layer[t] == pa && ti < answer))) return false;
    }
  }
  return true;
}

struct FilterReport {
  std::vector<std::size_t> retained;  // indices into World::facts
  double original = 0;                // pass rates over all facts
  std::array<double, 3> image_rephrase{};
  std::array<double, 3> question_rephrase{};
  std::array<double, 2> image_neighbor{};
  double question_neighbor = 0;
  double control = 0;
  double all_rephrases = 0;    // every rephrase variant correct
  double all_neighbors = 0;    // both image neighbors correct
  double lens_dominant = 0;    // answer is the top lens score across all layers
  double retained_fraction = 0;
};

// Queries probing one fact, in a fixed order: original, 3 image rephrases,
// 3 question rephrases, 2 image neighbors, then the question neighbors.
inline std::vector<Example> probe_examples(const Fact& f, const EvalBundle& b) {
  std::vector<Example> out;
  out.push_back({query_of(f), f.answer});
  for (const auto& img : b.image_rephrases) out.push_back({{img, f.question}, f.answer});
  for (const auto& q : b.question_rephrases) out.push_back({{f.image, q}, f.answer});
  for (const auto& img : b.image_neighbors) out.push_back({{img, f.question}, b.image_neighbor_answer});
  for (const auto& n : b.question_neighbors) out.push_back({{f.image, n.question}, n.answer});
  return out;
}

template <typename Real>
FilterReport filter_facts(const ModelState<Real>& state, const World& w) {
  FilterReport r;
  std::vector<Query> queries;
  std::vector<int> targets;
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    for (auto& e : probe_examples(w.facts[i], w.bundles[i])) {
      queries.push_back(std::move(e.query));
      targets.push_back(e.target);
    }
  }
  const auto pred = greedy_answers(state, queries);
  std::vector<Query> originals;
  for (const auto& f : w.facts) originals.push_back(query_of(f));
  const auto lenses = lens_distributions(state, originals);
  std::size_t k = 0;
  auto ok = [&]() {
    const bool hit = pred[k] == targets[k];
    ++k;
    return hit;
  };
  const double n = static_cast<double>(w.facts.size());
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    bool keep = ok();
    r.original += keep;
    bool reph = true;
    for (std::size_t l = 0; l < 3; ++l) {
      const bool h = ok();
      r.image_rephrase[l] += h;
      reph = reph && h;
    }
    for (std::size_t l = 0; l < 3; ++l) {
      const bool h = ok();
      r.question_rephrase[l] += h;
      reph = reph && h;
    }
    bool neigh = true;
    for (std::size_t l = 0; l < 2; ++l) {
      const bool h = ok();
      r.image_neighbor[l] += h;
      neigh = neigh && h;
    }
    bool qn = true;
    for (std::size_t j = 0; j < w.bundles[i].question_neighbors.size(); ++j) qn = ok() && qn;
    r.question_neighbor += qn;
    r.all_rephrases += reph;
    r.all_neighbors += neigh;
    const bool dom = answer_dominates(lenses[i], w.facts[i].answer);
    r.lens_dominant += dom;
    if (keep && reph && neigh && qn && dom) r.retained.push_back(i);
  }
  r.original /= n;
  for (auto& x : r.image_rephrase) x /= n;
  for (auto& x : r.question_rephrase) x /= n;
  for (auto& x : r.image_neighbor) x /= n;
  r.question_neighbor /= n;
  r.all_rephrases /= n;
  r.all_neighbors /= n;
  r.lens_dominant /= n;
  r.retained_fraction = static_cast<double>(r.retained.size()) / n;
  std::vector<Query> cq;
  for (const auto& c : w.controls) cq.push_back(query_of(c));
  const auto cp = greedy_answers(state, cq);
  for (std::size_t i = 0; i < cp.size(); ++i) r.control += cp[i] == w.controls[i].answer;
  r.control /= static_cast<double>(w.controls.size());
  return r;
}

}  // namespace unlab
