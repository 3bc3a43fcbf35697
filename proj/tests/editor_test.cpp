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

#include <Eigen/SVD>
#include <cmath>
#include <random>

#include "test_util.hpp"
#include "unlab/editor.hpp"
#include "unlab/inference.hpp"

namespace unlab {
namespace {

ModelState<double> random_model(std::uint64_t seed) {
  auto s = init_model(ModelConfig{});
  testing::randomize(s, 0.12, seed);
  return s;
}

// A fact the random model already answers: its answer is the model's argmax.
Fact known_fact(const ModelState<double>& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Fact f;
  f.id = static_cast<int>(seed);
  for (int i = 0; i < 32; ++i) f.image.push_back(n(rng));
  f.question = {7, 12, 40, 9};
  f.answer = answer(s, query_of(f)).token;
  return f;
}

EvalBundle bundle_for(const Fact& f, int alternative) {
  EvalBundle b;
  b.fact_id = f.id;
  for (auto& img : b.image_rephrases) {
    img = f.image;
    img.back() += 0.3;
  }
  b.question_rephrases = {std::vector<int>{14, 7, 12, 40, 9}, std::vector<int>{7, 13, 41, 9},
                          std::vector<int>{2, 3, 4, 5, 7, 12, 40, 9}};
  b.alternative_answer = alternative;
  b.image_neighbor_answer = alternative;
  return b;
}

TEST(Lora, FreshAttachIsBitwiseNoOp) {
  const auto s = random_model(1);
  const auto f = known_fact(s, 2);
  for (auto target : {EditTarget::kLlmMlpDown, EditTarget::kProjectorMlp}) {
    const auto a = attach_lora(s, target, 2, 1.0, 3);
    EXPECT_EQ(forward(a, query_of(f)).out_dist, forward(s, query_of(f)).out_dist);
    const auto m = merge_lora(a);
    EXPECT_EQ(m.params, s.params);
  }
}

TEST(Lora, GuardsOnAttachAndMerge) {
  const auto s = random_model(1);
  const auto a = attach_lora(s, EditTarget::kLlmMlpDown, 1, 1.0, 3);
  EXPECT_THROW(attach_lora(a, EditTarget::kLlmMlpDown, 1, 1.0, 3), StateError);
  const auto m = merge_lora(a);
  EXPECT_THROW(merge_lora(m), StateError);
  EXPECT_THROW(attach_lora(s, EditTarget::kLlmMlpDown, 5, 1.0, 3), ConfigurationError);
}

TEST(Lora, MergedMatchesAttachedAndDeltaIsRankOne) {
  const auto s = random_model(4);
  const auto f = known_fact(s, 5);
  for (auto target : {EditTarget::kLlmMlpDown, EditTarget::kProjectorMlp}) {
    auto a = attach_lora(s, target, 3, 0.7, 6);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0.0, 0.5);
    for (auto& x : a.adapter->b.values()) x = n(rng);
    const auto attached = forward(a, query_of(f)).out_dist;
    const std::string wname = adapter_weight_name(a);
    const auto m = merge_lora(a);
    const auto merged = forward(m, query_of(f)).out_dist;
    for (std::size_t i = 0; i < merged.size(); ++i) EXPECT_NEAR(merged[i], attached[i], 1e-10);
    const RowMatrix<double> delta = m.param(wname).matrix() - s.param(wname).matrix();
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(delta);
    const auto sv = svd.singularValues();
    EXPECT_GT(sv[0], 0.0);
    EXPECT_LE(sv[1], 1e-8 * sv[0]) << to_string(target);
  }
}

TEST(DefenseLoss, HingeInactiveWhenAnswerAlreadyBuried) {
  const auto s = random_model(8);
  auto f = known_fact(s, 9);
  const auto out = forward(s, query_of(f)).out_dist.values();
  f.answer = static_cast<int>(std::min_element(out.begin(), out.end()) - out.begin());
  DefenseSpec spec;
  spec.kind = ObjectiveKind::kHeadProjection;
  spec.layers = {4};
  spec.margin = 1e-3;
  const auto a = attach_lora(s, EditTarget::kLlmMlpDown, 2, 1.0, 1);
  const auto lg = defense_loss(a, f, nullptr, spec);
  EXPECT_EQ(lg.loss, 0.0);
  for (double g : lg.grads.at(kAdapterB).values()) EXPECT_EQ(g, 0.0);
}

TEST(DefenseLoss, MaxEntropyAtUniformLens) {
  auto s = random_model(10);
  s.param("unembed").fill(0.0);
  const auto f = known_fact(s, 11);
  DefenseSpec spec;
  spec.kind = ObjectiveKind::kMaxEntropy;
  const auto a = attach_lora(s, EditTarget::kLlmMlpDown, 2, 1.0, 1);
  const auto lg = defense_loss(a, f, nullptr, spec);
  EXPECT_NEAR(lg.loss, -3.0 * std::log(256.0), 1e-9);  // L = {2, 3, 4}
}

TEST(DefenseLoss, KindSpecificValues) {
  const auto s = random_model(12);
  const auto f = known_fact(s, 13);
  const auto p = forward(s, query_of(f)).out_dist;
  const auto a = attach_lora(s, EditTarget::kLlmMlpDown, 2, 1.0, 1);
  const auto b = bundle_for(f, (f.answer + 1) % 256);
  DefenseSpec spec;
  spec.kind = ObjectiveKind::kFactErasure;
  EXPECT_NEAR(defense_loss(a, f, &b, spec).loss, std::log(p[static_cast<std::size_t>(f.answer)]), 1e-12);
  spec.kind = ObjectiveKind::kEmptyResponse;
  EXPECT_NEAR(defense_loss(a, f, &b, spec).loss, -std::log(p[tokens::kEmpty]), 1e-12);
  spec.kind = ObjectiveKind::kErrorInjection;
  EXPECT_NEAR(defense_loss(a, f, &b, spec).loss, -std::log(p[static_cast<std::size_t>(b.alternative_answer)]), 1e-12);
  spec.kind = ObjectiveKind::kInputRephrasing;
  const auto& rv = b.image(Level::kEasy);
  const auto& rq = b.question(Level::kEasy);
  const std::vector<Query> qs{query_of(f), {rv, f.question}, {f.image, rq}, {rv, rq}};
  double mean = 0;
  for (const auto& q : qs) mean += std::log(forward(s, q).out_dist[static_cast<std::size_t>(f.answer)]) / 4;
  EXPECT_NEAR(defense_loss(a, f, &b, spec).loss, mean, 1e-12);
  EXPECT_THROW(defense_loss(a, f, nullptr, spec), ConfigurationError);
  EXPECT_THROW(defense_loss(s, f, &b, spec), StateError);
}

TEST(DefenseSpec, DefaultLayers) {
  EXPECT_EQ(default_lens_layers(4), std::vector<int>({2, 3, 4}));
  EXPECT_EQ(default_lens_layers(8), std::vector<int>({4, 5, 6, 7, 8}));
  EXPECT_EQ(default_edit_layer(2), 1);
  EXPECT_EQ(default_edit_layer(4), 1);
  EXPECT_EQ(default_edit_layer(8), 1);
  DefenseSpec spec;
  spec.kind = ObjectiveKind::kHeadProjection;
  spec.layers = {1, 2};
  EXPECT_EQ(spec.resolved_layers(4), std::vector<int>({1, 2, 4}));
  spec.layers = {5};
  EXPECT_THROW(spec.resolved_layers(4), ConfigurationError);
}

class EditPerDefense : public ::testing::TestWithParam<ObjectiveKind> {};

TEST_P(EditPerDefense, PostconditionsHold) {
  const auto s = random_model(20);
  const auto f = known_fact(s, 21);
  const auto b = bundle_for(f, (f.answer + 7) % 250 + 6);
  DefenseSpec spec;
  spec.kind = GetParam();
  spec.learning_rate = 0.05;
  const auto r = edit(s, f, &b, spec, 5);
  ASSERT_TRUE(r.report.success) << to_string(spec.kind);
  EXPECT_GE(r.report.rewrite_score(), spec.tau);
  EXPECT_LE(r.report.rewrite_score(), 1.0);
  EXPECT_EQ(r.report.loss_trace.size(), static_cast<std::size_t>(r.report.steps));
  const auto lens = lens_distributions(r.state, query_of(f));
  EXPECT_NEAR(lens.output()[static_cast<std::size_t>(f.answer)], r.report.p_post, 1e-12);
  // Locality: only the edited matrix moved, and by a rank-1 delta.
  const std::string wname = "layer" + std::to_string(default_edit_layer(4)) + ".mlp.down.w";
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    if (s.layout().names[i] != wname) {
      EXPECT_EQ(r.state.params[i], s.params[i]) << s.layout().names[i];
    }
  }
  const RowMatrix<double> delta = r.state.param(wname).matrix() - s.param(wname).matrix();
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(delta);
  EXPECT_LE(svd.singularValues()[1], 1e-8 * svd.singularValues()[0]);
  switch (spec.kind) {
    case ObjectiveKind::kHeadProjection:
      for (int l : spec.resolved_layers(4)) {
        EXPECT_GT(token_rank(lens.layers[static_cast<std::size_t>(l - 1)], f.answer), spec.top_k);
      }
      break;
    case ObjectiveKind::kErrorInjection:
      EXPECT_EQ(static_cast<int>(argmax<double>(lens.output())), b.alternative_answer);
      break;
    case ObjectiveKind::kEmptyResponse:
      EXPECT_EQ(static_cast<int>(argmax<double>(lens.output())), tokens::kEmpty);
      break;
    case ObjectiveKind::kMaxEntropy: {
      const auto before = lens_distributions(s, query_of(f));
      double h0 = 0, h1 = 0;
      for (int l : spec.resolved_layers(4)) {
        h0 += entropy<double>(before.layers[static_cast<std::size_t>(l - 1)]);
        h1 += entropy<double>(lens.layers[static_cast<std::size_t>(l - 1)]);
      }
      EXPECT_GT(h1, h0);
      break;
    }
    default:
      break;
  }
}

INSTANTIATE_TEST_SUITE_P(AllDefenses, EditPerDefense, ::testing::ValuesIn(all_defenses()),
                         [](const auto& info) { return to_string(info.param); });

TEST(Edit, NoOpEditHasZeroRewrite) {
  const auto s = random_model(30);
  const auto f = known_fact(s, 31);
  DefenseSpec spec;
  spec.max_steps = 0;
  const auto r = edit(s, f, nullptr, spec, 1);
  EXPECT_FALSE(r.report.success);
  EXPECT_EQ(r.report.rewrite_score(), 0.0);
  EXPECT_EQ(r.state.params, s.params);
}

TEST(Edit, ProjectorTargetEditsOnlyProjector) {
  const auto s = random_model(32);
  const auto f = known_fact(s, 33);
  DefenseSpec spec;
  spec.target = EditTarget::kProjectorMlp;
  spec.learning_rate = 0.05;
  const auto r = edit(s, f, nullptr, spec, 2);
  EXPECT_TRUE(r.report.success);
  EXPECT_EQ(r.report.edit_layer, 0);
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    if (s.layout().names[i] != "proj.w2") {
      EXPECT_EQ(r.state.params[i], s.params[i]);
    }
  }
}

TEST(Edit, AttachedResultWhenNotMerging) {
  const auto s = random_model(34);
  const auto f = known_fact(s, 35);
  DefenseSpec spec;
  spec.merge = false;
  spec.learning_rate = 0.05;
  const auto r = edit(s, f, nullptr, spec, 2);
  ASSERT_TRUE(r.state.adapter.has_value());
  EXPECT_EQ(r.state.params, s.params);
}

TEST(DefenseReport, JsonRoundTrip) {
  DefenseReport r;
  r.fact_id = 4;
  r.kind = ObjectiveKind::kHeadProjection;
  r.p_pre = 0.8;
  r.p_post = 0.08;
  r.steps = 3;
  r.success = true;
  r.loss_trace = {1.5, 0.25, 0.0};
  const auto j = to_json(r);
  EXPECT_NEAR(j.at("rewrite_score").get<double>(), 0.9, 1e-15);
  const auto back = defense_report_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.loss_trace, r.loss_trace);
  EXPECT_EQ(back.p_post, r.p_post);
  EXPECT_EQ(back.kind, r.kind);
}

}  // namespace
}  // namespace unlab
