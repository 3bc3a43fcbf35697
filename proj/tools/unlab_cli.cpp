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

// Command-line front end: gen-world, pretrain, edit, attack, eval, grid, report.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "unlab/unlab.hpp"

namespace fs = std::filesystem;
using namespace unlab;

namespace {

struct Common {
  std::string config;
  std::string preset_name;
  std::vector<std::string> sets;
  std::string output_dir;
  int workers = 0;
  int facts = 0;
  std::string seeds;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "INI config file");
  app->add_option("-p,--preset", c.preset_name, "Preset: table1, table2, table3, table5, fig5");
  app->add_option("-s,--set", c.sets, "Override as section.key=value (repeatable)");
  app->add_option("-o,--output-dir", c.output_dir, "Output directory");
  app->add_option("-w,--workers", c.workers, "Worker threads");
  app->add_option("-n,--facts", c.facts, "Facts per seed");
  app->add_option("--seeds", c.seeds, "Comma-separated seeds");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.preset_name.empty() ? ExperimentConfig{} : preset(c.preset_name);
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw ConfigurationError("cannot read config: " + c.config);
    boost::property_tree::ptree t;
    try {
      boost::property_tree::ini_parser::read_ini(in, t);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigurationError(std::string("malformed config: ") + e.what());
    }
    cfg = config_from_ptree(t, cfg);
  }
  if (!c.sets.empty()) {
    boost::property_tree::ptree t;
    for (const auto& s : c.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || s.find('.') > eq) throw ConfigurationError("--set expects section.key=value");
      const auto dot = s.rfind('.', eq);
      const auto path = s.substr(0, dot) + "/" + s.substr(dot + 1, eq - dot - 1);
      t.put(boost::property_tree::ptree::path_type(path, '/'), s.substr(eq + 1));
    }
    cfg = config_from_ptree(t, cfg);
  }
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  if (c.workers > 0) cfg.workers = c.workers;
  if (c.facts > 0) cfg.facts = c.facts;
  if (!c.seeds.empty()) cfg = config_from_ini("[experiment]\nseeds=" + c.seeds + "\n", cfg);
  return cfg;
}

std::vector<std::string> echo_header(int argc, char** argv, const ExperimentConfig& cfg) {
  std::string cmd = "argv=";
  for (int i = 0; i < argc; ++i) cmd += (i ? " " : "") + std::string(argv[i]);
  std::vector<std::string> h{cmd, "output_dir=" + resolve_output_dir(cfg).string()};
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) h.push_back(std::string(kOutputDirEnv) + "=" + env);
  return h;
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

std::size_t fact_position(const World& w, int fact_id) {
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    if (w.facts[i].id == fact_id) return i;
  }
  throw InvalidInput("no fact with id " + std::to_string(fact_id));
}

void print_summary(const SummaryTable& s) {
  std::printf("%-17s %-14s %5s %-6s", "defense", "target", "scale", "level");
  for (const auto& c : s.columns) std::printf(" %10s", c.substr(0, 10).c_str());
  std::printf("\n");
  for (const auto& r : s.rows) {
    std::printf("%-17s %-14s %5d %-6s", r.key.defense.c_str(), r.key.target.c_str(), r.key.scale, r.key.level.c_str());
    for (double v : r.mean) std::printf(" %10.4f", v);
    std::printf("\n");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal unlearning attack and defense laboratory"};
  app.require_subcommand(1);

  Common gen_c, pre_c, edit_c, atk_c, eval_c, grid_c;

  auto* gen = app.add_subcommand("gen-world", "Generate the synthetic world as JSONL");
  add_common(gen, gen_c);
  std::string gen_out;
  gen->add_option("--out", gen_out, "World file (default <output>/world.jsonl)");

  auto* pre = app.add_subcommand("pretrain", "Pretrain (or load) the checkpoint of a model scale");
  add_common(pre, pre_c);
  int pre_scale = 1;
  bool pre_force = false;
  pre->add_option("--scale", pre_scale, "Model scale: 1 or 2");
  pre->add_flag("--force", pre_force, "Retrain even if a checkpoint exists");

  auto* ed = app.add_subcommand("edit", "Edit one fact with one defense");
  add_common(ed, edit_c);
  int ed_fact = -1, ed_scale = 1;
  std::string ed_defense = "head_projection", ed_target = "llm_mlp", ed_out, ed_report;
  std::uint64_t ed_seed = 0;
  ed->add_option("--fact", ed_fact, "Fact id")->required();
  ed->add_option("--defense", ed_defense, "Defense name");
  ed->add_option("--target", ed_target, "llm_mlp or projector_mlp");
  ed->add_option("--scale", ed_scale, "Model scale: 1 or 2");
  ed->add_option("--seed", ed_seed, "Adapter seed");
  ed->add_option("--out", ed_out, "Edited checkpoint path")->required();
  ed->add_option("--report", ed_report, "DefenseReport JSONL path (appended)");

  auto* atk = app.add_subcommand("attack", "Run extraction attacks on a checkpoint");
  add_common(atk, atk_c);
  int atk_fact = -1;
  std::string atk_ckpt, atk_out, atk_level = "hard", atk_lens;
  std::vector<std::string> atk_kinds;
  int atk_budget = 0;
  atk->add_option("--checkpoint", atk_ckpt, "Checkpoint to attack")->required();
  atk->add_option("--fact", atk_fact, "Fact id")->required();
  atk->add_option("--attack", atk_kinds, "Attack kinds (default all)");
  atk->add_option("--budget", atk_budget, "Candidate budget B");
  atk->add_option("--level", atk_level, "Blackbox rephrase level");
  atk->add_option("--out", atk_out, "Candidate-set JSONL path (default stdout)");
  atk->add_option("--lens-dump", atk_lens, "Also write the fact's lens distributions");

  auto* ev = app.add_subcommand("eval", "Run a single-cell experiment");
  add_common(ev, eval_c);

  auto* gr = app.add_subcommand("grid", "Run the cross product of scales, targets and levels");
  add_common(gr, grid_c);

  auto* rep = app.add_subcommand("report", "Rebuild tables from per-fact records");
  std::string rep_records, rep_out;
  rep->add_option("records", rep_records, "records.jsonl")->required();
  rep->add_option("--out", rep_out, "Directory for results.csv and summary.csv (default: print)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto cfg = resolve(gen_c);
      cfg.world.validate();
      const fs::path path = gen_out.empty() ? world_path(resolve_output_dir(cfg)) : fs::path(gen_out);
      if (path.has_parent_path()) fs::create_directories(path.parent_path());
      const World w = generate_world(cfg.world);
      save_world(w, path.string());
      std::printf("world: %zu facts, %zu controls, %zu dropped -> %s\n", w.facts.size(), w.controls.size(),
                  w.dropped.size(), path.string().c_str());
    } else if (*pre) {
      auto cfg = resolve(pre_c);
      cfg.scales = {pre_scale};
      cfg.validate();
      const auto dir = resolve_output_dir(cfg);
      if (pre_force) fs::remove(checkpoint_path(dir, pre_scale));
      const World w = prepare_world(cfg, dir, log_line);
      const auto s = prepare_checkpoint(cfg, w, pre_scale, dir, log_line);
      const auto fr = filter_facts(s, w);
      std::printf("checkpoint %s\nparameters %zu\ncorpus accuracy %.4f\nretained %zu/%zu (%.3f)\n",
                  checkpoint_path(dir, pre_scale).string().c_str(), s.parameter_count(),
                  corpus_accuracy(s, w.facts), fr.retained.size(), w.facts.size(), fr.retained_fraction);
    } else if (*ed) {
      auto cfg = resolve(edit_c);
      cfg.scales = {ed_scale};
      cfg.validate();
      const auto a = prepare_artifacts(cfg, log_line);
      const auto idx = fact_position(a.world, ed_fact);
      const auto kind = defense_from_string(ed_defense);
      auto it = std::find_if(cfg.defenses.begin(), cfg.defenses.end(), [&](const DefenseSpec& d) { return d.kind == kind; });
      DefenseSpec spec = it != cfg.defenses.end() ? *it : tuned_defense(kind);
      spec.target = edit_target_from_string(ed_target);
      const auto r = edit(a.models.at(ed_scale), a.world.facts[idx], &a.world.bundles[idx], spec, ed_seed);
      save_checkpoint(r.state, ed_out);
      const auto j = to_json(r.report);
      if (!ed_report.empty()) {
        std::ofstream out(ed_report, std::ios::app);
        out << j.dump() << '\n';
      }
      std::printf("%s\n", j.dump().c_str());
      return r.report.success ? 0 : 3;
    } else if (*atk) {
      auto cfg = resolve(atk_c);
      const auto dir = resolve_output_dir(cfg);
      const World w = prepare_world(cfg, dir, log_line);
      const auto idx = fact_position(w, atk_fact);
      const auto state = load_checkpoint<double>(atk_ckpt);
      const Fact& f = w.facts[idx];
      const EvalBundle& b = w.bundles[idx];
      std::vector<AttackKind> kinds;
      for (const auto& k : atk_kinds) kinds.push_back(attack_from_string(k));
      if (kinds.empty()) {
        for (auto k : all_attacks()) {
          if (k != AttackKind::kProbabilityDelta2 || state.config.layers >= 3) kinds.push_back(k);
        }
      }
      std::ofstream file;
      if (!atk_out.empty()) file.open(atk_out);
      std::ostream& out = atk_out.empty() ? std::cout : file;
      for (auto k : kinds) {
        AttackSpec s = cfg.attack;
        s.kind = k;
        if (atk_budget > 0) s.budget = atk_budget;
        s.level = level_from_string(atk_level);
        CandidateSet c;
        if (k == AttackKind::kFinetuneHp) {
          c = finetune_then_attack(state, f, sample_finetune_facts(w.controls, s.finetune.facts, f.id), s);
        } else if (is_whitebox(k)) {
          c = whitebox_attack(k, state, f, s);
        } else {
          c = blackbox_rephrase_attack(state, f, b, s);
        }
        auto j = to_json(c);
        j["success"] = c.contains(f.answer);
        out << j.dump() << '\n';
      }
      if (!atk_lens.empty()) save_lens_dump({{f.id, lens_distributions(state, query_of(f)).layers}}, atk_lens);
    } else if (*ev || *gr) {
      const auto cfg = resolve(*ev ? eval_c : grid_c);
      const auto header = echo_header(argc, argv, cfg);
      for (const auto& h : header) log_line("# " + h);
      const auto r = *ev ? run_experiment(cfg, log_line, header) : grid(cfg, log_line, header);
      print_summary(r.summary);
      std::printf("outputs: %s\n", r.dir.string().c_str());
    } else if (*rep) {
      std::ifstream in(rep_records);
      if (!in) throw InvalidInput("cannot read " + rep_records);
      const auto f = read_records_jsonl(in);
      const auto t = aggregate(f.records, f.attacks, f.lambda);
      const auto s = summarize(t);
      std::vector<std::string> header{"records=" + rep_records};
      if (rep_out.empty()) {
        write_table_csv(t, std::cout, header);
        print_summary(s);
      } else {
        fs::create_directories(rep_out);
        write_text(fs::path(rep_out) / "results.csv", [&](std::ostream& o) { write_table_csv(t, o, header); });
        write_text(fs::path(rep_out) / "summary.csv", [&](std::ostream& o) { write_summary_csv(s, o, header); });
        print_summary(s);
      }
    }
  } catch (const ConvergenceError& e) {
    std::fprintf(stderr, "error: %s (final accuracy %.4f)\n", e.what(), e.final_accuracy());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
