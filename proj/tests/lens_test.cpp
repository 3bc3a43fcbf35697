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

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "test_util.hpp"
#include "unlab/inference.hpp"
#include "unlab/lens.hpp"

namespace unlab {
namespace {

ModelState<double> random_model(std::uint64_t seed) {
  auto s = init_model(ModelConfig{});
  testing::randomize(s, 0.15, seed);
  return s;
}

Query sample_query(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Query q;
  for (int i = 0; i < 32; ++i) q.image.push_back(n(rng));
  q.tokens = {7, 20, 33, 9};
  return q;
}

TEST(Lens, FinalLayerIsOutputBitwise) {
  const auto s = random_model(1);
  const auto q = sample_query(2);
  const auto lens = lens_distributions(s, q);
  const auto out = forward(s, q).out_dist;
  ASSERT_EQ(lens.depth(), 4u);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(lens.output()[i], out[i]);
}

TEST(Lens, EveryLayerSumsToOne) {
  const auto s = random_model(3);
  for (const auto& layer : lens_distributions(s, sample_query(4)).layers) {
    EXPECT_NEAR(std::accumulate(layer.begin(), layer.end(), 0.0), 1.0, 1e-9);
  }
}

TEST(Lens, MatchesManualReadoutOfHiddenStates) {
  // Independent path: final norm and unembedding applied by hand.
  const auto s = random_model(5);
  const auto q = sample_query(6);
  const auto r = forward(s, q);
  const auto lens = lens_distributions(s, q);
  const auto& g = s.param("ln_f.g");
  const auto& b = s.param("ln_f.b");
  for (std::size_t l = 0; l < r.hidden.size(); ++l) {
    const auto h = r.hidden[l].values();
    const double mean = std::accumulate(h.begin(), h.end(), 0.0) / static_cast<double>(h.size());
    double var = 0;
    for (double x : h) var += (x - mean) * (x - mean);
    var /= static_cast<double>(h.size());
    std::vector<double> normed(h.size());
    for (std::size_t i = 0; i < h.size(); ++i) normed[i] = (h[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
    std::vector<double> z(256, 0.0);
    const auto& W = s.param("unembed");
    for (std::size_t i = 0; i < normed.size(); ++i) {
      for (std::size_t t = 0; t < 256; ++t) z[t] += normed[i] * W.at(i, t);
    }
    const auto p = softmax<double>(z);
    for (std::size_t t = 0; t < 256; ++t) EXPECT_NEAR(lens.layers[l][t], p[t], 1e-12);
  }
}

TEST(Lens, BatchedMatchesSingle) {
  const auto s = random_model(7);
  const std::vector<Query> qs{sample_query(8), sample_query(9), sample_query(10)};
  const auto many = lens_distributions(s, qs);
  ASSERT_EQ(many.size(), 3u);
  const auto one = lens_distributions(s, qs[2]);
  for (std::size_t l = 0; l < 4; ++l) {
    for (std::size_t t = 0; t < 256; ++t) EXPECT_NEAR(many[2].layers[l][t], one.layers[l][t], 1e-12);
  }
  EXPECT_EQ(many[2].prompt_id, 2);
}

TEST(TokenRank, TiesGoToLowerIndex) {
  const std::vector<double> p{0.1, 0.3, 0.3, 0.2, 0.1};
  EXPECT_EQ(token_rank(p, 1), 1);
  EXPECT_EQ(token_rank(p, 2), 2);
  EXPECT_EQ(token_rank(p, 3), 3);
  EXPECT_EQ(token_rank(p, 0), 4);
  EXPECT_EQ(token_rank(p, 4), 5);
}

class LensDump : public ::testing::Test {
 protected:
  std::string path = (std::filesystem::temp_directory_path() / "unlab_lens_test.bin").string();
  void TearDown() override { std::filesystem::remove(path); }
};

TEST_F(LensDump, RoundTripAndSize) {
  const auto s = random_model(11);
  const auto stacks = lens_distributions(s, std::vector<Query>{sample_query(1), sample_query(2)});
  save_lens_dump(stacks, path);
  EXPECT_EQ(std::filesystem::file_size(path), 24u + 2 * (8 + 4 * 256 * 8));
  EXPECT_EQ(load_lens_dump(path), stacks);
}

TEST_F(LensDump, BadMagicAndVersion) {
  {
    std::ofstream out(path, std::ios::binary);
    out << "JUNKJUNKJUNK";
  }
  EXPECT_THROW(load_lens_dump(path), InvalidInput);
  {
    std::ofstream out(path, std::ios::binary);
    out.write("ULNS", 4);
    const std::uint32_t v = 7;
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  EXPECT_THROW(load_lens_dump(path), VersionError);
}

}  // namespace
}  // namespace unlab
