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

#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "test_util.hpp"
#include "unlab/checkpoint.hpp"
#include "unlab/inference.hpp"
#include "unlab/pretrain.hpp"

namespace unlab {
namespace {

TEST(Model, DefaultParameterCountMatchesShapeSum) {
  // Hand-derived: projector (32*64 + 64 + 64*128 + 128), embeddings
  // (256*64 + 32*64), per block 2 LN (4*64) + 4 attention maps (4*(64*64+64))
  // + MLP (64*256 + 256 + 256*64 + 64), final LN (128), unembedding (64*256).
  const std::size_t proj = 32 * 64 + 64 + 64 * 128 + 128;
  const std::size_t emb = 256 * 64 + 32 * 64;
  const std::size_t block = 4 * 64 + 4 * (64 * 64 + 64) + (64 * 256 + 256 + 256 * 64 + 64);
  const std::size_t expected = proj + emb + 4 * block + 128 + 64 * 256;
  EXPECT_EQ(expected, 245312u);
  EXPECT_EQ(init_model(ModelConfig{}).parameter_count(), expected);
}

TEST(Model, SameSeedSameBytes) {
  ModelConfig c;
  EXPECT_EQ(checkpoint_bytes(init_model(c)), checkpoint_bytes(init_model(c)));
  ModelConfig d = c;
  d.seed = 2;
  EXPECT_NE(checkpoint_bytes(init_model(c)), checkpoint_bytes(init_model(d)));
}

TEST(Model, ConfigGuards) {
  ModelConfig c;
  c.heads = 5;
  EXPECT_THROW(init_model(c), ConfigurationError);
  c = ModelConfig{};
  c.vocab_size = 4;
  EXPECT_THROW(init_model(c), ConfigurationError);
}

TEST(Model, ScaledDoublesWidthAndDepth) {
  const auto s = ModelConfig{}.scaled();
  EXPECT_EQ(s.width, 128);
  EXPECT_EQ(s.layers, 8);
}

TEST(Model, InitScalesAndBiases) {
  const auto s = init_model(ModelConfig{});
  EXPECT_EQ(s.param("layer1.ln1.g")[0], 1.0);
  EXPECT_EQ(s.param("layer1.mlp.up.b")[3], 0.0);
  const auto& w = s.param("layer1.attn.wq");
  double sq = 0;
  for (double x : w.values()) sq += x * x;
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(w.size())), 0.02, 0.002);
}

Query default_query() {
  Query q;
  q.image.assign(32, 0.5);
  q.tokens = {7, 8, 9, 10};
  return q;
}

TEST(Forward, DistributionSumsToOneAndHiddenPerLayer) {
  const auto s = init_model(ModelConfig{});
  const auto r = forward(s, default_query());
  EXPECT_EQ(r.hidden.size(), 4u);
  EXPECT_EQ(r.hidden[0].size(), 64u);
  const auto p = r.out_dist.values();
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
}

TEST(Forward, ZeroUnembedIsUniform) {
  auto s = init_model(ModelConfig{});
  s.param("unembed").fill(0.0);
  for (double p : forward(s, default_query()).out_dist.values()) EXPECT_DOUBLE_EQ(p, 1.0 / 256);
  const auto a = answer(s, default_query());
  EXPECT_DOUBLE_EQ(a.probability, 1.0 / 256);
}

TEST(Forward, AnswerMatchesDistribution) {
  auto s = init_model(ModelConfig{});
  testing::randomize(s, 0.2, 4);
  const auto r = forward(s, default_query());
  const auto a = answer(s, default_query());
  EXPECT_EQ(a.probability, r.out_dist[static_cast<std::size_t>(a.token)]);
  for (double p : r.out_dist.values()) EXPECT_LE(p, a.probability);
}

TEST(Forward, Deterministic) {
  auto s = init_model(ModelConfig{});
  testing::randomize(s, 0.2, 5);
  EXPECT_EQ(forward(s, default_query()).out_dist, forward(s, default_query()).out_dist);
}

TEST(Forward, BatchedMatchesSingle) {
  auto s = init_model(ModelConfig{});
  testing::randomize(s, 0.2, 6);
  Query a = default_query(), b = default_query();
  b.tokens = {11, 12};
  b.image[3] = -1;
  const auto batch = output_distributions(s, {a, b});
  const auto single = forward(s, b).out_dist;
  for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(batch[1][i], single[i], 1e-12);
}

TEST(Forward, InputGuards) {
  const auto s = init_model(ModelConfig{});
  Query q = default_query();
  q.tokens.assign(31, 7);
  EXPECT_THROW(forward(s, q), InvalidInput);
  q = default_query();
  q.tokens = {300};
  EXPECT_THROW(forward(s, q), InvalidInput);
  q = default_query();
  q.image.pop_back();
  EXPECT_THROW(forward(s, q), ConfigurationError);
}

TEST(Pretrain, EmptyCorpusRejected) {
  auto s = init_model(testing::small_config());
  EXPECT_THROW(pretrain(s, {}, PretrainConfig{}), InvalidInput);
}

TEST(Pretrain, SingleFactWithin200Steps) {
  auto s = init_model(ModelConfig{});
  Fact f{0, std::vector<double>(32, 0.3), {7, 8, 9}, 42};
  PretrainConfig pc;
  pc.max_steps = 200;
  pc.eval_every = 10;
  pc.target_accuracy = 1.0;
  const auto r = pretrain(s, {f}, pc);
  EXPECT_LE(r.steps, 200);
  EXPECT_EQ(corpus_accuracy(s, {f}), 1.0);
  EXPECT_EQ(answer(s, query_of(f)).token, 42);
}

TEST(Pretrain, ConvergenceErrorReportsAccuracy) {
  auto s = init_model(testing::small_config());
  std::mt19937_64 rng(2);
  std::vector<Fact> corpus;
  for (int i = 0; i < 20; ++i) {
    const auto e = testing::random_example(s.config, rng);
    corpus.push_back({i, e.query.image, e.query.tokens, e.target});
  }
  PretrainConfig pc;
  pc.max_steps = 2;
  pc.eval_every = 1;
  try {
    pretrain(s, corpus, pc);
    FAIL() << "expected a convergence error";
  } catch (const ConvergenceError& e) {
    EXPECT_GE(e.final_accuracy(), 0.0);
    EXPECT_LT(e.final_accuracy(), 0.99);
  }
}

TEST(Pretrain, AnswersOutsideVocabRejected) {
  auto s = init_model(testing::small_config());
  Fact f{0, std::vector<double>(6, 0.0), {7}, 99};
  EXPECT_THROW(pretrain(s, {f}, PretrainConfig{}), InvalidInput);
}

}  // namespace
}  // namespace unlab
