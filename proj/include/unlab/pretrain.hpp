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

// Pretraining: shuffled minibatch cross-entropy on the answer position with
// momentum SGD until corpus exact-match accuracy reaches the target.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "unlab/error.hpp"
#include "unlab/inference.hpp"
#include "unlab/model.hpp"
#include "unlab/numerics.hpp"

namespace unlab {

struct PretrainConfig {
  int max_steps = 20000;
  int batch_size = 64;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;  // global gradient norm cap; <= 0 disables
  double label_smoothing = 0.05;
  int eval_every = 250;
  double target_accuracy = 0.99;
  std::uint64_t seed = 1;

  bool operator==(const PretrainConfig&) const = default;

  void validate() const {
    if (max_steps < 1 || batch_size < 1 || eval_every < 1) {
      throw ConfigurationError("pretrain steps, batch and eval interval must be positive");
    }
    if (!(learning_rate > 0) || momentum < 0 || momentum >= 1) {
      throw ConfigurationError("pretrain needs lr > 0 and momentum in [0, 1)");
    }
    if (label_smoothing < 0 || label_smoothing >= 1) {
      throw ConfigurationError("label smoothing must lie in [0, 1)");
    }
    if (!(target_accuracy > 0 && target_accuracy <= 1)) {
      throw ConfigurationError("target accuracy must lie in (0, 1]");
    }
  }
};

struct PretrainReport {
  int steps = 0;  // steps taken when the target was first met
  double accuracy = 0;
  std::vector<std::pair<int, double>> history;  // (step, accuracy)
};

template <typename Real>
double corpus_accuracy(const ModelState<Real>& state, const std::vector<Fact>& corpus) {
  if (corpus.empty()) throw InvalidInput("corpus is empty");
  std::vector<Query> qs;
  qs.reserve(corpus.size());
  for (const auto& f : corpus) qs.push_back(query_of(f));
  const auto pred = greedy_answers(state, qs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) hits += pred[i] == corpus[i].answer ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(corpus.size());
}

// Trains all base parameters in place. Throws ConvergenceError with the final
// accuracy if the target is not met within max_steps.
template <typename Real>
PretrainReport pretrain(ModelState<Real>& state, const std::vector<Fact>& corpus, const PretrainConfig& cfg,
                        const std::function<void(int, double)>& on_eval = {}) {
  cfg.validate();
  if (corpus.empty()) throw InvalidInput("corpus is empty");
  for (const auto& f : corpus) {
    if (f.answer < 0 || f.answer >= state.config.vocab_size) {
      throw InvalidInput("corpus answer outside vocabulary");
    }
  }
  if (state.adapter) throw StateError("pretraining expects a model without an adapter");
  const ParamLayout& L = state.layout();
  std::vector<Tensor<Real>> velocity;
  for (const auto& p : state.params) velocity.emplace_back(p.shape());
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  Objective ce{ObjectiveKind::kCrossEntropy};
  ce.label_smoothing = cfg.label_smoothing;
  const auto trainable = all_base_trainable(state);
  PretrainReport report;
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), corpus.size());
  std::vector<Example> examples;
  for (int step = 1; step <= cfg.max_steps; ++step) {
    examples.clear();
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Fact& f = corpus[order[cursor++]];
      examples.push_back({query_of(f), f.answer});
    }
    auto lg = forward_backward(state, examples, ce, trainable);
    Real scale = 1;
    if (cfg.clip_norm > 0) {
      Real sq = 0;
      for (const auto& [name, g] : lg.grads) sq += g.row_vector().squaredNorm();
      const Real norm = std::sqrt(sq);
      if (norm > static_cast<Real>(cfg.clip_norm)) scale = static_cast<Real>(cfg.clip_norm) / norm;
    }
    for (std::size_t i = 0; i < L.size(); ++i) {
      auto v = velocity[i].row_vector();
      v = static_cast<Real>(cfg.momentum) * v + scale * lg.grads.at(L.names[i]).row_vector();
      state.params[i].row_vector() -= static_cast<Real>(cfg.learning_rate) * v;
    }
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double acc = corpus_accuracy(state, corpus);
      report.history.emplace_back(step, acc);
      report.accuracy = acc;
      if (on_eval) on_eval(step, acc);
      if (acc >= cfg.target_accuracy) {
        report.steps = step;
        return report;
      }
    }
  }
  throw ConvergenceError("pretraining did not reach the target accuracy", report.accuracy);
}

}  // namespace unlab
