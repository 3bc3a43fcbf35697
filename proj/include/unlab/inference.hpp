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

#include <utility>
#include <vector>

#include "unlab/engine.hpp"
#include "unlab/model.hpp"

namespace unlab {

template <typename Real>
struct ForwardResult {
  std::vector<Tensor<Real>> hidden;  // post-block residual at the final position, per layer
  Tensor<Real> out_dist;
};

template <typename Real>
ForwardResult<Real> forward(const ModelState<Real>& state, const Query& query) {
  const auto tp = engine::forward(state, {&query}, false);
  ForwardResult<Real> r;
  const auto last = tp.last_row(0);
  for (const auto& lc : tp.layers) {
    const auto row = lc.x_out.row(last);
    r.hidden.push_back(Tensor<Real>::vector(std::vector<Real>(row.data(), row.data() + row.size())));
  }
  r.out_dist = Tensor<Real>::vector(tp.output(0).probs);
  return r;
}

// Output distributions for many queries in one packed pass.
template <typename Real>
std::vector<std::vector<Real>> output_distributions(const ModelState<Real>& state,
                                                     const std::vector<Query>& queries,
                                                     std::size_t chunk = 64) {
  std::vector<std::vector<Real>> out;
  out.reserve(queries.size());
  for (std::size_t start = 0; start < queries.size(); start += chunk) {
    std::vector<const Query*> ptrs;
    for (std::size_t i = start; i < std::min(queries.size(), start + chunk); ++i) {
      ptrs.push_back(&queries[i]);
    }
    const auto tp = engine::forward(state, ptrs, false);
    for (std::size_t b = 0; b < ptrs.size(); ++b) out.push_back(tp.output(b).probs);
  }
  return out;
}

struct Answer {
  int token = 0;
  double probability = 0;
};

template <typename Real>
Answer answer(const ModelState<Real>& state, const Query& query) {
  const auto tp = engine::forward(state, {&query}, false);
  const auto& p = tp.output(0).probs;
  const auto t = argmax<Real>(p);
  return {static_cast<int>(t), static_cast<double>(p[t])};
}

template <typename Real>
std::vector<int> greedy_answers(const ModelState<Real>& state, const std::vector<Query>& queries) {
  std::vector<int> out;
  for (const auto& p : output_distributions(state, queries)) {
    out.push_back(static_cast<int>(argmax<Real>(p)));
  }
  return out;
}

}  // namespace unlab
