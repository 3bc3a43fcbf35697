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

// Acceptance gate: one PASS/FAIL line per criterion. Tolerances and run
// sizes are fixed below; the exit status is nonzero if any criterion fails.
//
//   acceptance [--only 1,5,12] [--workers N]
//
// Artifacts and per-fact records go to $UNLAB_OUTPUT_DIR (default
// ./acceptance_out) and are reused by later runs.

#include <Eigen/SVD>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "test_util.hpp"
#include "unlab/unlab.hpp"

namespace unlab {
namespace {

// Pinned tolerances and sizes.
constexpr double kGradTolerance = 1e-4;
constexpr int kGradSeeds = 5;
constexpr std::size_t kGradCoordinates = 300;
constexpr double kMemorizationFloor = 0.99;
constexpr double kRewriteFloor = 0.85;
constexpr double kRewriteFraction = 0.95;
constexpr double kRandomDamageCeiling = 0.05;
constexpr int kHpTopK = 20;
constexpr int kOracleStacks = 100;
constexpr double kRankOneRatio = 1e-8;
constexpr double kMatchedRewrite = 0.95;
constexpr int kStructuralFacts = 20;
constexpr double kC1Seconds = 120, kC2Seconds = 600, kC3Seconds = 1800, kSuiteSeconds = 4 * 3600;

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;

void report(int id, const std::string& name, const Outcome& o, double seconds) {
  std::printf("[%s] C%-2d %-34s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), seconds);
  std::fflush(stdout);
  if (!o.pass) ++g_failures;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

ExperimentConfig base_config(int workers) {
  ExperimentConfig c;
  c.output_dir = "acceptance_out";
  c.workers = workers;
  return c;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity(const World& w) {
  double worst = 0;
  std::string where;
  for (int seed = 1; seed <= kGradSeeds; ++seed) {
    auto s = init_model<double>(ModelConfig{});
    testing::randomize(s, 0.3, static_cast<std::uint64_t>(seed));
    s.adapter = testing::random_adapter(s, EditTarget::kLlmMlpDown, 1, static_cast<std::uint64_t>(50 + seed));
    const std::size_t fi = static_cast<std::size_t>(seed) * 37 % w.facts.size();
    for (auto kind : all_defenses()) {
      const auto spec = tuned_defense(kind);
      const auto [batch, obj] = defense_batch(w.facts[fi], &w.bundles[fi], spec, s.config.layers);
      const double adapter_err = grad_check(s, batch, obj, 1e-5, kGradCoordinates, static_cast<std::uint64_t>(seed));
      const double base_err = grad_check(s, batch, obj, 1e-5, all_base_trainable(s), kGradCoordinates,
                                         static_cast<std::uint64_t>(seed));
      const double e = std::max(adapter_err, base_err);
      if (e > worst) {
        worst = e;
        where = to_string(kind) + " seed " + std::to_string(seed);
      }
    }
  }
  return {worst <= kGradTolerance, fmt("max rel err %.2e", worst) + " at " + where + " (<= 1e-4)"};
}

// Brute-force top-B: score every token, stable sort, cut.
std::vector<int> brute_force(AttackKind kind, const LensStack& lens, int budget) {
  const std::size_t V = lens.vocab(), n = lens.depth();
  std::vector<double> score(V, -1e300);
  for (std::size_t t = 0; t < V; ++t) {
    auto p = [&](std::size_t l) { return lens.layers[l][t]; };
    for (std::size_t l = 0; l < n; ++l) {
      if (kind == AttackKind::kHeadProjection) score[t] = std::max(score[t], p(l));
      if (kind == AttackKind::kProbabilityDelta && l + 1 < n) score[t] = std::max(score[t], std::abs(p(l + 1) - p(l)));
      if (kind == AttackKind::kProbabilityDelta2 && l + 2 < n) {
        score[t] = std::max(score[t], std::abs(p(l + 2) - 2 * p(l + 1) + p(l)));
      }
    }
  }
  std::vector<int> idx(V);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });
  idx.resize(std::min<std::size_t>(static_cast<std::size_t>(budget), V));
  return idx;
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> vocab(2, 16), depth(2, 3), coarse(0, 1);
  std::gamma_distribution<double> g(0.5, 1.0);
  int checked = 0, mismatches = 0;
  for (int trial = 0; trial < kOracleStacks; ++trial) {
    const int V = vocab(rng), n = depth(rng);
    const bool tie = coarse(rng) == 1;
    LensStack s;
    for (int l = 0; l < n; ++l) {
      std::vector<double> p(static_cast<std::size_t>(V));
      for (auto& x : p) x = tie ? std::round(g(rng) * 4) + 0.5 : g(rng);
      const double z = std::accumulate(p.begin(), p.end(), 0.0);
      for (auto& x : p) x /= z;
      s.layers.push_back(std::move(p));
    }
    for (auto kind : {AttackKind::kHeadProjection, AttackKind::kProbabilityDelta, AttackKind::kProbabilityDelta2}) {
      if (kind == AttackKind::kProbabilityDelta2 && n < 3) continue;
      for (int b = 1; b <= V; ++b) {
        AttackSpec spec;
        spec.kind = kind;
        spec.budget = b;
        const auto c = whitebox_attack_on_lens(kind, s, spec, trial);
        const auto o = brute_force(kind, s, b);
        // Exact set equality; order may differ only among equal PD scores.
        ++checked;
        if (std::set<int>(c.tokens.begin(), c.tokens.end()) != std::set<int>(o.begin(), o.end())) ++mismatches;
      }
    }
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in " + std::to_string(checked) +
                               " (kind, stack, B) checks over " + std::to_string(kOracleStacks) + " stacks"};
}

Outcome metric_fixtures(const ModelState<double>& base, const World& w) {
  auto set_of = [](std::vector<int> t) {
    CandidateSet c;
    c.budget = 3;
    c.tokens = std::move(t);
    c.scores.assign(c.tokens.size(), 0.0);
    return c;
  };
  std::vector<int> all(8);
  std::iota(all.begin(), all.end(), 0);
  auto full = set_of(all);
  full.budget = 8;
  int bad = 0;
  bad += attack_success({set_of({1, 2}), set_of({3}), set_of({4, 5}), set_of({})}, {2, 9, 5, 1}) != 0.5;
  bad += attack_success({set_of({}), set_of({})}, {1, 2}) != 0.0;
  bad += attack_success({full, full}, {3, 7}) != 1.0;
  bad += rewrite_score(0.8, 0.08) != (0.8 - 0.08) / 0.8;
  bad += std::abs(rewrite_score(0.8, 0.08) - 0.9) > 1e-15;
  bad += rewrite_score(0.37, 0.37) != 0.0;
  bad += rewrite_score(0.37, 0.0) != 1.0;
  int identity_nonzero = 0;
  for (std::size_t i = 0; i < 25; ++i) {
    const ModelState<double> same = base;
    identity_nonzero += delta_accuracy(base, same, random_controls(w, i)) != 0.0;
    identity_nonzero += delta_accuracy(base, same, question_neighborhood(w, i)) != 0.0;
    identity_nonzero += delta_accuracy(base, same, image_neighborhood(w, i)) != 0.0;
  }
  return {bad == 0 && identity_nonzero == 0, std::to_string(7 - bad) + "/7 fixtures exact; identity-edit dAcc nonzero in " +
                                                 std::to_string(identity_nonzero) + "/75 control sets"};
}

Outcome memorization(const ModelState<double>& base, const World& w, const FilterReport& fr) {
  const double acc = corpus_accuracy(base, w.facts);
  int hits = 0;
  AttackSpec spec;
  spec.kind = AttackKind::kHeadProjection;
  spec.budget = 1;
  for (auto i : fr.retained) hits += whitebox_attack(spec.kind, base, w.facts[i], spec).contains(w.facts[i].answer);
  const double success = static_cast<double>(hits) / static_cast<double>(fr.retained.size());
  return {acc >= kMemorizationFloor && success == 1.0,
          fmt("exact match %.4f (>= 0.99)", acc) + fmt(", unedited hp@1 success %.4f (= 1)", success) + " on " +
              std::to_string(fr.retained.size()) + " retained"};
}

Outcome edit_quality(const ExperimentResult& r, const std::vector<std::uint64_t>& seeds) {
  bool ok = true;
  double worst_fraction = 1, worst_damage = 0;
  std::string where;
  for (auto kind : all_defenses()) {
    for (auto seed : seeds) {
      int n = 0, good = 0;
      double damage = 0;
      int edited = 0;
      for (const auto& rec : r.records) {
        if (rec.edit.kind != kind || rec.seed != seed) continue;
        ++n;
        good += rec.edit.rewrite_score() >= kRewriteFloor;
        if (rec.edit.success) {
          damage += rec.d_random;
          ++edited;
        }
      }
      const double frac = n ? static_cast<double>(good) / n : 0;
      const double dmg = edited ? damage / edited : 1;
      if (frac < kRewriteFraction || dmg > kRandomDamageCeiling) {
        ok = false;
        where += " " + to_string(kind) + "/s" + std::to_string(seed);
      }
      worst_fraction = std::min(worst_fraction, frac);
      worst_damage = std::max(worst_damage, dmg);
    }
  }
  return {ok, fmt("worst rewrite>=0.85 fraction %.3f (>= 0.95)", worst_fraction) +
                  fmt(", worst Rand dAcc %.4f (<= 0.05)", worst_damage) + (ok ? "" : "; failing:" + where)};
}

Outcome hp_postcondition(const ModelState<double>& base, const World& w, const FilterReport& fr,
                         const std::vector<std::uint64_t>& seeds, int facts) {
  const auto spec = tuned_defense(ObjectiveKind::kHeadProjection);
  const auto layers = spec.resolved_layers(base.config.layers);
  int edited = 0, violations = 0;
  for (auto seed : seeds) {
    for (auto i : select_facts(fr.retained, facts, seed)) {
      const Fact& f = w.facts[i];
      const auto r = edit(base, f, &w.bundles[i], spec, derived_seed(seed, kEditStream, static_cast<std::uint64_t>(f.id)));
      if (!r.report.success) continue;
      ++edited;
      const auto lens = lens_distributions(r.state, query_of(f));
      for (int l : layers) violations += token_rank(lens.layers[static_cast<std::size_t>(l - 1)], f.answer) <= kHpTopK;
    }
  }
  return {violations == 0 && edited > 0, std::to_string(violations) + " (layer, fact) pairs inside top-20 over " +
                                             std::to_string(edited) + " successful edits"};
}

Outcome structural(const ModelState<double>& base, const World& w, const FilterReport& fr) {
  const std::vector<int> budgets{1, 5, 10, 20};
  int size_bad = 0, nest_bad = 0, mono_bad = 0, lens_bad = 0, rank_bad = 0, sets = 0;
  double worst_ratio = 0;
  std::vector<std::vector<int>> hits_at(all_attacks().size(), std::vector<int>(budgets.size(), 0));
  const auto facts = select_facts(fr.retained, kStructuralFacts, 0);
  for (std::size_t k = 0; k < facts.size(); ++k) {
    const std::size_t i = facts[k];
    const Fact& f = w.facts[i];
    const EvalBundle& b = w.bundles[i];
    // Alternate targets so both adapter placements are covered.
    auto spec = tuned_defense(k % 2 ? ObjectiveKind::kFactErasure : ObjectiveKind::kHeadProjection);
    spec.target = k % 4 == 3 ? EditTarget::kProjectorMlp : EditTarget::kLlmMlpDown;
    const auto r = edit(base, f, &b, spec, derived_seed(0, kEditStream, static_cast<std::uint64_t>(f.id)));
    const auto& post = r.state;

    const auto lens = lens_distributions(post, query_of(f));
    const auto out = output_distributions(post, {query_of(f)}).front();
    for (std::size_t t = 0; t < out.size(); ++t) lens_bad += lens.output()[t] != out[t];

    const ParamLayout& L = base.layout();
    const std::size_t pi = spec.target == EditTarget::kProjectorMlp ? L.proj_w2 : L.layers[static_cast<std::size_t>(spec.resolved_edit_layer(base.config.layers) - 1)].down_w;
    const Eigen::MatrixXd delta = post.params[pi].matrix() - base.params[pi].matrix();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(delta);
    const auto sv = svd.singularValues();
    const double ratio = sv(0) > 0 ? sv(1) / sv(0) : 0;
    worst_ratio = std::max(worst_ratio, ratio);
    rank_bad += ratio > kRankOneRatio;

    for (std::size_t a = 0; a < all_attacks().size(); ++a) {
      const auto kind = all_attacks()[a];
      std::vector<CandidateSet> cs;
      for (int bgt : budgets) {
        AttackSpec s;
        s.kind = kind;
        s.budget = bgt;
        if (kind == AttackKind::kFinetuneHp) {
          s.finetune.steps = 10;
          cs.push_back(finetune_then_attack(post, f, sample_finetune_facts(w.controls, 32, f.id), s));
        } else if (is_whitebox(kind)) {
          cs.push_back(whitebox_attack(kind, post, f, s));
        } else {
          cs.push_back(blackbox_rephrase_attack(post, f, b, s));
        }
      }
      for (std::size_t j = 0; j < budgets.size(); ++j) {
        ++sets;
        size_bad += static_cast<int>(cs[j].tokens.size()) > budgets[j];
        hits_at[a][j] += cs[j].contains(f.answer);
        if (j > 0) {
          for (int t : cs[j - 1].tokens) nest_bad += !cs[j].contains(t);
        }
      }
    }
  }
  for (const auto& h : hits_at) {
    for (std::size_t j = 1; j < h.size(); ++j) mono_bad += h[j] < h[j - 1];
  }
  const bool ok = size_bad == 0 && nest_bad == 0 && mono_bad == 0 && lens_bad == 0 && rank_bad == 0;
  std::ostringstream d;
  d << sets << " sets: |C|>B " << size_bad << ", nesting " << nest_bad << ", success@B drops " << mono_bad
    << ", lens!=output " << lens_bad << ", sigma2/sigma1 max " << fmt("%.1e", worst_ratio) << " (<= 1e-8)";
  return {ok, d.str()};
}

double mean_attack_success(const SummaryTable& s, const SummaryRow& row, const std::vector<AttackKind>& attacks) {
  double m = 0;
  for (auto k : attacks) m += s.value(row, to_string(k));
  return m / static_cast<double>(attacks.size());
}

// ---------------------------------------------------------------------------

bool selected(const std::set<int>& only, int id) { return only.empty() || only.count(id) > 0; }

int run(int argc, char** argv) {
  std::set<int> only;
  int workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      for (auto& t : detail::split_list(argv[++i])) only.insert(std::stoi(t));
    } else if (a == "--workers" && i + 1 < argc) {
      workers = std::stoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: acceptance [--only 1,5,12] [--workers N]\n");
      return 2;
    }
  }
  const auto suite_start = Clock::now();
  const ExperimentConfig cfg = base_config(workers);
  std::printf("acceptance: %d facts x %zu seeds, budget %d, output %s\n", cfg.facts, cfg.seeds.size(), cfg.attack.budget,
              resolve_output_dir(cfg).string().c_str());

  const World world = generate_world(cfg.world);

  if (selected(only, 1)) {
    const auto t = Clock::now();
    auto o = gradient_fidelity(world);
    const double s = since(t);
    o.pass = o.pass && s < kC1Seconds;
    report(1, "gradient fidelity", o, s);
  }

  // Shared artifacts: world file and the base checkpoint.
  std::optional<Artifacts> art;
  double pretrain_seconds = 0;
  bool pretrained_now = false;
  auto artifacts = [&]() -> const Artifacts& {
    if (!art) {
      const auto t = Clock::now();
      pretrained_now = !std::filesystem::exists(checkpoint_path(resolve_output_dir(cfg), 1));
      art = prepare_artifacts(cfg, log_line);
      pretrain_seconds = since(t);
    }
    return *art;
  };

  if (selected(only, 2)) {
    const auto& a = artifacts();
    const auto t = Clock::now();
    auto o = memorization(a.models.at(1), a.world, a.filters.at(1));
    const double s = since(t) + pretrain_seconds;
    o.detail += pretrained_now ? "; pretrained this run" : "; checkpoint reused";
    o.pass = o.pass && s < kC2Seconds;
    report(2, "memorization baseline", o, s);
  }

  if (selected(only, 3)) {
    artifacts();
    const auto t = Clock::now();
    auto c = preset("table3");
    c.output_dir = cfg.output_dir;
    c.workers = workers;
    const auto r = run_experiment(c, log_line, {"source=acceptance C3"});
    const double s = since(t);
    auto o = edit_quality(r, c.seeds);
    o.pass = o.pass && s < kC3Seconds;
    report(3, "edit quality floor", o, s);
  }

  if (selected(only, 4)) {
    const auto& a = artifacts();
    const auto t = Clock::now();
    const auto o = hp_postcondition(a.models.at(1), a.world, a.filters.at(1), cfg.seeds, cfg.facts);
    report(4, "hp postcondition", o, since(t));
  }

  if (selected(only, 5)) {
    const auto t = Clock::now();
    const auto o = oracle_equivalence();
    report(5, "attack oracle equivalence", o, since(t));
  }

  if (selected(only, 6)) {
    const auto& a = artifacts();
    const auto t = Clock::now();
    const auto o = structural(a.models.at(1), a.world, a.filters.at(1));
    report(6, "structural invariants", o, since(t));
  }

  if (selected(only, 7)) {
    artifacts();
    const auto t = Clock::now();
    auto c = preset("table2");
    c.name = "table2_fact_erasure";
    c.defenses = {tuned_defense(ObjectiveKind::kFactErasure)};
    c.output_dir = cfg.output_dir;
    c.workers = workers;
    const auto r = grid(c, log_line, {"source=acceptance C7"});
    auto v = [&](const char* level, const char* col) {
      return r.summary.value(r.summary.find("fact_erasure", "llm_mlp", 1, level), col);
    };
    const double mm = v("hard", "bb_multimodal"), img = v("hard", "bb_image"), q = v("hard", "bb_question");
    const double img_easy = v("easy", "bb_image"), q_easy = v("easy", "bb_question");
    const bool ok = mm > std::max(img, q) && img > img_easy && q > q_easy;
    std::ostringstream d;
    d << fmt("MM %.3f", mm) << fmt(" > max(image %.3f", img) << fmt(", question %.3f)", q)
      << fmt("; image hard %.3f", img) << fmt(" > easy %.3f", img_easy) << fmt("; question hard %.3f", q)
      << fmt(" > easy %.3f", q_easy);
    report(7, "trend A: modality and difficulty", {ok, d.str()}, since(t));
  }

  if (selected(only, 8) || selected(only, 11)) {
    artifacts();
    const auto t = Clock::now();
    auto c = preset("table1");
    c.output_dir = cfg.output_dir;
    c.workers = workers;
    const auto r = run_experiment(c, log_line, {"source=acceptance C8 C11"});
    const double s = since(t);
    if (selected(only, 8)) {
      std::string lowest;
      double best = 2, hp = 0;
      std::ostringstream d;
      for (const auto& row : r.summary.rows) {
        const double m = mean_attack_success(r.summary, row, c.attacks);
        d << row.key.defense << fmt(" %.3f ", m);
        if (m < best) {
          best = m;
          lowest = row.key.defense;
        }
        if (row.key.defense == "head_projection") hp = m;
      }
      int ties = 0;
      for (const auto& row : r.summary.rows) ties += mean_attack_success(r.summary, row, c.attacks) == best;
      report(8, "trend B: hp defense lowest", {lowest == "head_projection" && ties == 1 && hp == best,
                                               "mean success over 7 attacks: " + d.str()}, s);
    }
    if (selected(only, 11)) {
      bool ok = true;
      std::ostringstream d;
      for (const auto& row : r.summary.rows) {
        const double ft = r.summary.value(row, "ft_hp"), hp = r.summary.value(row, "hp");
        ok = ok && ft >= hp;
        d << row.key.defense << fmt(" %.3f", ft) << fmt(">=%.3f ", hp);
      }
      report(11, "trend E: ft_hp >= hp", {ok, d.str()}, s);
    }
  }

  if (selected(only, 9)) {
    artifacts();
    const auto t = Clock::now();
    auto c = preset("table5");
    c.output_dir = cfg.output_dir;
    c.workers = workers;
    const auto r = grid(c, log_line, {"source=acceptance C9"});
    const auto& llm = r.summary.find("head_projection", "llm_mlp", 1, "hard");
    const auto& proj = r.summary.find("head_projection", "projector_mlp", 1, "hard");
    const double rw_l = r.summary.value(llm, "rewrite_score"), rw_p = r.summary.value(proj, "rewrite_score");
    const double s_l = mean_attack_success(r.summary, llm, c.attacks);
    const double s_p = mean_attack_success(r.summary, proj, c.attacks);
    const bool ok = rw_l >= kMatchedRewrite && rw_p >= kMatchedRewrite && s_l < s_p;
    std::ostringstream d;
    d << fmt("llm_mlp success %.4f", s_l) << fmt(" < projector_mlp %.4f", s_p) << fmt("; rewrite %.3f", rw_l)
      << fmt(" / %.3f (>= 0.95)", rw_p);
    report(9, "trend C: llm edit beats projector", {ok, d.str()}, since(t));
  }

  if (selected(only, 10)) {
    artifacts();
    const auto t = Clock::now();
    auto c = preset("fig5");
    c.output_dir = cfg.output_dir;
    c.workers = workers;
    const auto r = grid(c, log_line, {"source=acceptance C10"});
    const auto& x1 = r.summary.find("fact_erasure", "llm_mlp", 1, "hard");
    const auto& x2 = r.summary.find("fact_erasure", "llm_mlp", 2, "hard");
    const double hp1 = r.summary.value(x1, "hp"), hp2 = r.summary.value(x2, "hp");
    const double mm1 = r.summary.value(x1, "bb_multimodal"), mm2 = r.summary.value(x2, "bb_multimodal");
    std::ostringstream d;
    d << fmt("hp %.3f", hp2) << fmt(" < %.3f", hp1) << fmt("; MM %.3f", mm2) << fmt(" < %.3f (2x vs base)", mm1);
    report(10, "trend D: scaled model resilience", {hp2 < hp1 && mm2 < mm1, d.str()}, since(t));
  }

  if (selected(only, 12)) {
    const auto& a = artifacts();
    const auto t = Clock::now();
    const auto o = metric_fixtures(a.models.at(1), a.world);
    report(12, "metric unit fixtures", o, since(t));
  }

  const double total = since(suite_start);
  std::printf("suite runtime %.1f s (target 4 h on a multicore desktop, %u hardware threads here, %s); %d criterion failure(s)\n",
              total, std::thread::hardware_concurrency(), total < kSuiteSeconds ? "met" : "not met", g_failures);
  return g_failures == 0 ? 0 : 1;
}

}  // namespace
}  // namespace unlab

int main(int argc, char** argv) {
  try {
    return unlab::run(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
    return 2;
  }
}
