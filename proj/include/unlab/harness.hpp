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

// Experiment configuration, presets, orchestration and report emission.

#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "unlab/attacks.hpp"
#include "unlab/checkpoint.hpp"
#include "unlab/editor.hpp"
#include "unlab/error.hpp"
#include "unlab/filter.hpp"
#include "unlab/metrics.hpp"
#include "unlab/model.hpp"
#include "unlab/pretrain.hpp"
#include "unlab/world.hpp"

namespace unlab {

inline constexpr const char* kOutputDirEnv = "UNLAB_OUTPUT_DIR";
inline constexpr int kRecordSchemaVersion = 1;

// Tuned defense settings. The step size is per defense: the hinge and
// error-injection objectives overshoot at 0.1 and damage controls, while
// fact erasure and input rephrasing need it to converge within 500 steps.
inline DefenseSpec tuned_defense(ObjectiveKind kind) {
  DefenseSpec d;
  d.kind = kind;
  switch (kind) {
    case ObjectiveKind::kFactErasure:
    case ObjectiveKind::kInputRephrasing:
      d.learning_rate = 0.1;
      break;
    case ObjectiveKind::kMaxEntropy:
      d.learning_rate = 0.03;
      break;
    default:
      d.learning_rate = 0.01;
      break;
  }
  return d;
}

struct ExperimentConfig {
  std::string name = "table1";
  WorldConfig world;
  ModelConfig model;
  PretrainConfig pretrain;
  // Grid axes. Scale 1 is `model`, scale 2 is `model.scaled()`.
  std::vector<int> scales{1};
  std::vector<EditTarget> targets{EditTarget::kLlmMlpDown};
  std::vector<Level> levels{Level::kHard};
  std::vector<DefenseSpec> defenses;  // target is set per cell
  std::vector<AttackKind> attacks;
  AttackSpec attack;  // shared settings; kind and level are set per run
  int facts = 100;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  double lambda = 0;  // weight of mean damage in the combined score
  std::string output_dir = "unlab_out";
  int workers = 1;
  bool generate = true;  // create missing world and checkpoints
  long cell_cap = 2000;

  ExperimentConfig() {
    pretrain.target_accuracy = 0.999;
    for (auto k : all_defenses()) defenses.push_back(tuned_defense(k));
    attacks = all_attacks();
  }

  bool operator==(const ExperimentConfig&) const = default;

  ModelConfig model_at(int scale) const {
    if (scale == 1) return model;
    if (scale == 2) return model.scaled();
    throw ConfigurationError("model scale must be 1 or 2");
  }

  // Rows of the merged table: one per (scale, target, level, defense, seed).
  long cell_count() const {
    return static_cast<long>(scales.size() * targets.size() * levels.size() * defenses.size() * seeds.size());
  }

  void validate() const {
    world.validate();
    pretrain.validate();
    if (seeds.empty()) throw ConfigurationError("seeds must be nonempty");
    if (scales.empty() || targets.empty() || levels.empty()) throw ConfigurationError("grid axes must be nonempty");
    if (defenses.empty()) throw ConfigurationError("at least one defense is required");
    if (facts < 1) throw ConfigurationError("facts must be >= 1");
    if (workers < 1) throw ConfigurationError("workers must be >= 1");
    if (lambda < 0) throw ConfigurationError("lambda must be >= 0");
    if (model.vocab_size != world.vocab_size) throw ConfigurationError("model and world vocab sizes differ");
    if (model.image_dim != world.image_dim()) throw ConfigurationError("model image_dim must match the world");
    for (int s : scales) {
      const ModelConfig m = model_at(s);
      m.validate();
      for (const auto& d : defenses) d.validate(m.layers, m.vocab_size);
    }
    AttackSpec a = attack;
    for (auto k : attacks) {
      a.kind = k;
      a.validate();
      for (int s : scales) {
        const int probed = attack.layers.empty() ? model_at(s).layers : static_cast<int>(attack.layers.size());
        if (k == AttackKind::kProbabilityDelta2 && probed < 3) {
          throw ConfigurationError("pd2 needs at least three probed layers");
        }
      }
    }
    if (cell_count() > cell_cap) {
      throw ConfigurationError("grid has " + std::to_string(cell_count()) + " cells, above the cap of " +
                               std::to_string(cell_cap));
    }
  }
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> n{"table1", "table2", "table3", "table5", "fig5"};
  return n;
}

inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  if (name == "table1") return c;
  if (name == "table2") {
    c.levels = {Level::kEasy, Level::kMedium, Level::kHard};
    c.attacks = {AttackKind::kImage, AttackKind::kQuestion, AttackKind::kMultimodal};
    return c;
  }
  if (name == "table3") {
    c.attacks.clear();
    return c;
  }
  if (name == "table5") {
    DefenseSpec d = tuned_defense(ObjectiveKind::kHeadProjection);
    d.tau = 0.95;
    c.defenses = {d};
    c.targets = {EditTarget::kLlmMlpDown, EditTarget::kProjectorMlp};
    return c;
  }
  if (name == "fig5") {
    c.defenses = {tuned_defense(ObjectiveKind::kFactErasure)};
    c.scales = {1, 2};
    c.attacks = {AttackKind::kHeadProjection, AttackKind::kMultimodal};
    return c;
  }
  throw ConfigurationError("unknown preset: " + name);
}

// ---------------------------------------------------------------------------
// INI configuration.

namespace detail {

inline std::string fmt_double(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double x = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigurationError("not a number: '" + s + "'");
  return x;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  return join(v, [](int x) { return std::to_string(x); });
}

inline std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  for (auto& t : split_list(s)) out.push_back(std::stoi(t));
  return out;
}

using Tree = boost::property_tree::ptree;

// Reads `key` into `x` when present; a malformed value is a configuration error.
template <typename T>
void read_key(const Tree& t, const std::string& key, T& x) {
  const auto v = t.get_optional<std::string>(key);
  if (!v) return;
  try {
    if constexpr (std::is_same_v<T, double>) {
      x = parse_double(*v);
    } else if constexpr (std::is_same_v<T, bool>) {
      if (*v == "true" || *v == "1") {
        x = true;
      } else if (*v == "false" || *v == "0") {
        x = false;
      } else {
        throw ConfigurationError("not a boolean");
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      x = *v;
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      x = std::stoull(*v);
    } else if constexpr (std::is_same_v<T, long>) {
      x = std::stol(*v);
    } else {
      x = std::stoi(*v);
    }
  } catch (const std::exception&) {
    throw ConfigurationError("bad value for " + key + ": '" + *v + "'");
  }
}

inline std::string defense_section(ObjectiveKind k) { return "defense." + to_string(k); }

}  // namespace detail

inline boost::property_tree::ptree to_ptree(const ExperimentConfig& c) {
  using detail::fmt_double;
  detail::Tree t;
  t.put("experiment.name", c.name);
  t.put("experiment.facts", c.facts);
  t.put("experiment.seeds", detail::join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }));
  t.put("experiment.lambda", fmt_double(c.lambda));
  t.put("experiment.output_dir", c.output_dir);
  t.put("experiment.workers", c.workers);
  t.put("experiment.generate", c.generate ? "true" : "false");
  t.put("experiment.cell_cap", c.cell_cap);
  t.put("experiment.scales", detail::join_ints(c.scales));
  t.put("experiment.targets", detail::join(c.targets, [](EditTarget x) { return to_string(x); }));
  t.put("experiment.levels", detail::join(c.levels, [](Level x) { return to_string(x); }));
  t.put("experiment.defenses", detail::join(c.defenses, [](const DefenseSpec& d) { return to_string(d.kind); }));
  t.put("experiment.attacks", detail::join(c.attacks, [](AttackKind k) { return to_string(k); }));

  const auto& w = c.world;
  t.put("world.categories", w.categories);
  t.put("world.concepts_per_category", w.concepts_per_category);
  t.put("world.relations", w.relations);
  t.put("world.semantic_dim", w.semantic_dim);
  t.put("world.nuisance_dim", w.nuisance_dim);
  t.put("world.category_spread", fmt_double(w.category_spread));
  t.put("world.concept_spread", fmt_double(w.concept_spread));
  t.put("world.nuisance_std", fmt_double(w.nuisance_std));
  t.put("world.level_amplitude", fmt_double(w.level_amplitude[0]) + "," + fmt_double(w.level_amplitude[1]) + "," +
                                     fmt_double(w.level_amplitude[2]));
  t.put("world.salt_pepper_coords", w.salt_pepper_coords);
  t.put("world.hard_semantic_jitter", fmt_double(w.hard_semantic_jitter));
  t.put("world.neutral_prefixes", w.neutral_prefixes);
  t.put("world.question_neighbors", w.question_neighbors);
  t.put("world.controls_per_fact", w.controls_per_fact);
  t.put("world.fact_count", w.fact_count);
  t.put("world.control_count", w.control_count);
  t.put("world.vocab_size", w.vocab_size);
  t.put("world.seed", w.seed);

  const auto& m = c.model;
  t.put("model.vocab_size", m.vocab_size);
  t.put("model.width", m.width);
  t.put("model.layers", m.layers);
  t.put("model.heads", m.heads);
  t.put("model.mlp_factor", m.mlp_factor);
  t.put("model.image_dim", m.image_dim);
  t.put("model.prefix_len", m.prefix_len);
  t.put("model.max_seq_len", m.max_seq_len);
  t.put("model.seed", m.seed);

  const auto& p = c.pretrain;
  t.put("pretrain.max_steps", p.max_steps);
  t.put("pretrain.batch_size", p.batch_size);
  t.put("pretrain.learning_rate", fmt_double(p.learning_rate));
  t.put("pretrain.momentum", fmt_double(p.momentum));
  t.put("pretrain.clip_norm", fmt_double(p.clip_norm));
  t.put("pretrain.label_smoothing", fmt_double(p.label_smoothing));
  t.put("pretrain.eval_every", p.eval_every);
  t.put("pretrain.target_accuracy", fmt_double(p.target_accuracy));
  t.put("pretrain.seed", p.seed);

  const auto& a = c.attack;
  t.put("attack.budget", a.budget);
  t.put("attack.layers", detail::join_ints(a.layers));
  t.put("attack.k_start", a.k_start);
  t.put("attack.finetune_steps", a.finetune.steps);
  t.put("attack.finetune_facts", a.finetune.facts);
  t.put("attack.finetune_learning_rate", fmt_double(a.finetune.learning_rate));
  t.put("attack.finetune_momentum", fmt_double(a.finetune.momentum));

  for (const auto& d : c.defenses) {
    detail::Tree s;
    s.put("layers", detail::join_ints(d.layers));
    s.put("top_k", d.top_k);
    s.put("margin", fmt_double(d.margin));
    s.put("false_target", d.false_target);
    s.put("edit_layer", d.edit_layer);
    s.put("alpha", fmt_double(d.alpha));
    s.put("init_scale", fmt_double(d.init_scale));
    s.put("learning_rate", fmt_double(d.learning_rate));
    s.put("max_steps", d.max_steps);
    s.put("tau", fmt_double(d.tau));
    s.put("merge", d.merge ? "true" : "false");
    t.add_child(boost::property_tree::ptree::path_type(detail::defense_section(d.kind), '/'), s);
  }
  return t;
}

// Keys absent from the tree keep the values of `base`; `experiment.preset`
// selects a preset as the base.
inline ExperimentConfig config_from_ptree(const boost::property_tree::ptree& t,
                                          std::optional<ExperimentConfig> base = std::nullopt) {
  using detail::read_key;
  ExperimentConfig c = base ? *base : ExperimentConfig{};
  if (auto p = t.get_optional<std::string>("experiment.preset")) c = preset(*p);
  auto sec = [&](const std::string& name) -> const detail::Tree& {
    static const detail::Tree empty;
    auto it = t.find(name);
    return it == t.not_found() ? empty : it->second;
  };
  const auto& e = sec("experiment");
  read_key(e, "name", c.name);
  read_key(e, "facts", c.facts);
  read_key(e, "lambda", c.lambda);
  read_key(e, "output_dir", c.output_dir);
  read_key(e, "workers", c.workers);
  read_key(e, "generate", c.generate);
  read_key(e, "cell_cap", c.cell_cap);
  try {
    if (auto v = e.get_optional<std::string>("seeds")) {
      c.seeds.clear();
      for (auto& s : detail::split_list(*v)) c.seeds.push_back(std::stoull(s));
    }
    if (auto v = e.get_optional<std::string>("scales")) c.scales = detail::parse_ints(*v);
  } catch (const std::logic_error&) {
    throw ConfigurationError("bad integer list in [experiment]");
  }
  if (auto v = e.get_optional<std::string>("targets")) {
    c.targets.clear();
    for (auto& s : detail::split_list(*v)) c.targets.push_back(edit_target_from_string(s));
  }
  if (auto v = e.get_optional<std::string>("levels")) {
    c.levels.clear();
    for (auto& s : detail::split_list(*v)) c.levels.push_back(level_from_string(s));
  }
  if (auto v = e.get_optional<std::string>("attacks")) {
    c.attacks.clear();
    for (auto& s : detail::split_list(*v)) c.attacks.push_back(attack_from_string(s));
  }
  if (auto v = e.get_optional<std::string>("defenses")) {
    std::vector<DefenseSpec> ds;
    for (auto& s : detail::split_list(*v)) {
      const auto k = defense_from_string(s);
      auto it = std::find_if(c.defenses.begin(), c.defenses.end(), [&](const DefenseSpec& d) { return d.kind == k; });
      ds.push_back(it != c.defenses.end() ? *it : tuned_defense(k));
    }
    c.defenses = ds;
  }

  auto& w = c.world;
  const auto& ws = sec("world");
  read_key(ws, "categories", w.categories);
  read_key(ws, "concepts_per_category", w.concepts_per_category);
  read_key(ws, "relations", w.relations);
  read_key(ws, "semantic_dim", w.semantic_dim);
  read_key(ws, "nuisance_dim", w.nuisance_dim);
  read_key(ws, "category_spread", w.category_spread);
  read_key(ws, "concept_spread", w.concept_spread);
  read_key(ws, "nuisance_std", w.nuisance_std);
  if (auto v = ws.get_optional<std::string>("level_amplitude")) {
    const auto parts = detail::split_list(*v);
    if (parts.size() != 3) throw ConfigurationError("world.level_amplitude needs 3 values");
    for (int i = 0; i < 3; ++i) w.level_amplitude[static_cast<std::size_t>(i)] = detail::parse_double(parts[static_cast<std::size_t>(i)]);
  }
  read_key(ws, "salt_pepper_coords", w.salt_pepper_coords);
  read_key(ws, "hard_semantic_jitter", w.hard_semantic_jitter);
  read_key(ws, "neutral_prefixes", w.neutral_prefixes);
  read_key(ws, "question_neighbors", w.question_neighbors);
  read_key(ws, "controls_per_fact", w.controls_per_fact);
  read_key(ws, "fact_count", w.fact_count);
  read_key(ws, "control_count", w.control_count);
  read_key(ws, "vocab_size", w.vocab_size);
  read_key(ws, "seed", w.seed);

  auto& m = c.model;
  const auto& ms = sec("model");
  read_key(ms, "vocab_size", m.vocab_size);
  read_key(ms, "width", m.width);
  read_key(ms, "layers", m.layers);
  read_key(ms, "heads", m.heads);
  read_key(ms, "mlp_factor", m.mlp_factor);
  read_key(ms, "image_dim", m.image_dim);
  read_key(ms, "prefix_len", m.prefix_len);
  read_key(ms, "max_seq_len", m.max_seq_len);
  read_key(ms, "seed", m.seed);

  auto& p = c.pretrain;
  const auto& ps = sec("pretrain");
  read_key(ps, "max_steps", p.max_steps);
  read_key(ps, "batch_size", p.batch_size);
  read_key(ps, "learning_rate", p.learning_rate);
  read_key(ps, "momentum", p.momentum);
  read_key(ps, "clip_norm", p.clip_norm);
  read_key(ps, "label_smoothing", p.label_smoothing);
  read_key(ps, "eval_every", p.eval_every);
  read_key(ps, "target_accuracy", p.target_accuracy);
  read_key(ps, "seed", p.seed);

  auto& a = c.attack;
  const auto& as = sec("attack");
  read_key(as, "budget", a.budget);
  if (auto v = as.get_optional<std::string>("layers")) a.layers = detail::parse_ints(*v);
  read_key(as, "k_start", a.k_start);
  read_key(as, "finetune_steps", a.finetune.steps);
  read_key(as, "finetune_facts", a.finetune.facts);
  read_key(as, "finetune_learning_rate", a.finetune.learning_rate);
  read_key(as, "finetune_momentum", a.finetune.momentum);

  for (auto& d : c.defenses) {
    const auto& ds = sec(detail::defense_section(d.kind));
    if (auto v = ds.get_optional<std::string>("layers")) d.layers = detail::parse_ints(*v);
    read_key(ds, "top_k", d.top_k);
    read_key(ds, "margin", d.margin);
    read_key(ds, "false_target", d.false_target);
    read_key(ds, "edit_layer", d.edit_layer);
    read_key(ds, "alpha", d.alpha);
    read_key(ds, "init_scale", d.init_scale);
    read_key(ds, "learning_rate", d.learning_rate);
    read_key(ds, "max_steps", d.max_steps);
    read_key(ds, "tau", d.tau);
    read_key(ds, "merge", d.merge);
  }
  return c;
}

inline std::string config_to_ini(const ExperimentConfig& c) {
  std::ostringstream out;
  boost::property_tree::ini_parser::write_ini(out, to_ptree(c));
  return out.str();
}

inline ExperimentConfig config_from_ini(const std::string& text, std::optional<ExperimentConfig> base = std::nullopt) {
  std::istringstream in(text);
  detail::Tree t;
  try {
    boost::property_tree::ini_parser::read_ini(in, t);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigurationError(std::string("malformed config: ") + e.what());
  }
  return config_from_ptree(t, std::move(base));
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot read config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_ini(ss.str());
}

inline void save_config(const ExperimentConfig& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write config: " + path);
  out << config_to_ini(c);
}

// The output directory, unless overridden by the environment.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& c) {
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return c.output_dir;
}

// ---------------------------------------------------------------------------
// Artifacts shared by every cell: the world and one checkpoint per scale.

using Log = std::function<void(const std::string&)>;

struct Artifacts {
  World world;
  std::map<int, ModelState<double>> models;
  std::map<int, std::uint64_t> hashes;
  std::map<int, FilterReport> filters;
};

inline std::filesystem::path world_path(const std::filesystem::path& dir) { return dir / "world.jsonl"; }

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int scale) {
  return dir / ("model_x" + std::to_string(scale) + ".ckpt");
}

inline World prepare_world(const ExperimentConfig& c, const std::filesystem::path& dir, const Log& log) {
  const auto path = world_path(dir);
  if (std::filesystem::exists(path)) {
    World w = load_world(path.string());
    if (!(w.config == c.world)) throw ConfigurationError("world file " + path.string() + " has a different config");
    return w;
  }
  if (!c.generate) throw ConfigurationError("missing world file " + path.string() + " and generation is disabled");
  if (log) log("generating world -> " + path.string());
  World w = generate_world(c.world);
  std::filesystem::create_directories(dir);
  save_world(w, path.string());
  return w;
}

inline ModelState<double> prepare_checkpoint(const ExperimentConfig& c, const World& w, int scale,
                                             const std::filesystem::path& dir, const Log& log) {
  const auto path = checkpoint_path(dir, scale);
  const ModelConfig mc = c.model_at(scale);
  if (std::filesystem::exists(path)) {
    auto s = load_checkpoint<double>(path.string());
    if (!(s.config == mc)) throw ConfigurationError("checkpoint " + path.string() + " has a different model config");
    return s;
  }
  if (!c.generate) throw ConfigurationError("missing checkpoint " + path.string() + " and generation is disabled");
  if (log) log("pretraining scale " + std::to_string(scale) + " model -> " + path.string());
  auto s = init_model<double>(mc);
  pretrain(s, pretraining_corpus(w, 8), c.pretrain, [&](int step, double acc) {
    if (log) log("  step " + std::to_string(step) + " accuracy " + detail::fmt_double(acc));
  });
  std::filesystem::create_directories(dir);
  save_checkpoint(s, path.string());
  return s;
}

inline Artifacts prepare_artifacts(const ExperimentConfig& c, const Log& log = {}) {
  const auto dir = resolve_output_dir(c);
  Artifacts a;
  a.world = prepare_world(c, dir, log);
  for (int s : c.scales) {
    if (a.models.count(s)) continue;
    auto m = prepare_checkpoint(c, a.world, s, dir, log);
    a.hashes[s] = checkpoint_hash(m);
    a.filters[s] = filter_facts(m, a.world);
    a.models.emplace(s, std::move(m));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Per-fact records.

inline constexpr std::uint64_t kSelectStream = 101;
inline constexpr std::uint64_t kEditStream = 102;
inline constexpr std::uint64_t kFinetuneStream = 103;

inline std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
  return stream_rng(seed, purpose, index)();
}

// The seed's fact subset: a deterministic sample of the retained facts,
// returned in ascending index order.
inline std::vector<std::size_t> select_facts(const std::vector<std::size_t>& retained, int count, std::uint64_t seed) {
  std::vector<std::size_t> idx = retained;
  auto rng = stream_rng(seed, kSelectStream, 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(idx.size(), static_cast<std::size_t>(count)));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct FactRecord {
  std::uint64_t seed = 0;
  int scale = 1;
  Level level = Level::kHard;
  std::size_t fact_index = 0;
  std::uint64_t base_hash = 0;
  DefenseReport edit;
  // Filled for successful edits only, aligned with the experiment's attacks.
  std::vector<CandidateSet> candidates;
  std::vector<bool> hits;
  double d_random = std::numeric_limits<double>::quiet_NaN();
  double d_question = std::numeric_limits<double>::quiet_NaN();
  double d_image = std::numeric_limits<double>::quiet_NaN();
  double d_image_easy = std::numeric_limits<double>::quiet_NaN();
  double d_image_hard = std::numeric_limits<double>::quiet_NaN();
};

inline nlohmann::json to_json(const FactRecord& r) {
  nlohmann::json attacks = nlohmann::json::object();
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    auto j = to_json(r.candidates[i]);
    j["success"] = static_cast<bool>(r.hits[i]);
    attacks[to_string(r.candidates[i].kind)] = j;
  }
  nlohmann::json edit = to_json(r.edit);
  edit.erase("loss_trace");
  edit["final_loss"] = r.edit.loss_trace.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.edit.loss_trace.back());
  auto num = [](double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); };
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.base_hash));
  return {{"record", "fact"},
          {"seed", r.seed},
          {"scale", r.scale},
          {"level", to_string(r.level)},
          {"fact_index", r.fact_index},
          {"base_hash", hash},
          {"edit", edit},
          {"attacks", attacks},
          {"delta_acc",
           {{"random", num(r.d_random)},
            {"question", num(r.d_question)},
            {"image", num(r.d_image)},
            {"image_easy", num(r.d_image_easy)},
            {"image_hard", num(r.d_image_hard)}}}};
}

inline FactRecord fact_record_from_json(const nlohmann::json& j, const std::vector<AttackKind>& attacks) {
  FactRecord r;
  r.seed = j.at("seed");
  r.scale = j.at("scale");
  r.level = level_from_string(j.at("level"));
  r.fact_index = j.at("fact_index");
  r.base_hash = std::stoull(j.at("base_hash").get<std::string>(), nullptr, 16);
  auto e = j.at("edit");
  e["loss_trace"] = e.at("final_loss").is_null() ? nlohmann::json::array() : nlohmann::json::array({e.at("final_loss")});
  r.edit = defense_report_from_json(e);
  const auto& a = j.at("attacks");
  if (!a.empty()) {
    for (auto k : attacks) {
      const auto& c = a.at(to_string(k));
      r.candidates.push_back(candidate_set_from_json(c));
      r.hits.push_back(c.at("success").get<bool>());
    }
  }
  auto num = [](const nlohmann::json& x) {
    return x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>();
  };
  const auto& d = j.at("delta_acc");
  r.d_random = num(d.at("random"));
  r.d_question = num(d.at("question"));
  r.d_image = num(d.at("image"));
  r.d_image_easy = num(d.at("image_easy"));
  r.d_image_hard = num(d.at("image_hard"));
  return r;
}

// Edits one fact under one defense from the pristine checkpoint, then runs
// every attack and the damage metrics.
inline FactRecord run_fact(const ModelState<double>& base, std::uint64_t base_hash, const World& w,
                           std::size_t fact_index, DefenseSpec spec, EditTarget target, const ExperimentConfig& c,
                           std::uint64_t seed, int scale, Level level) {
  if (checkpoint_hash(base) != base_hash) throw StateError("pretrained checkpoint changed between edits");
  const Fact& f = w.facts[fact_index];
  const EvalBundle& b = w.bundles[fact_index];
  spec.target = target;
  FactRecord r;
  r.seed = seed;
  r.scale = scale;
  r.level = level;
  r.fact_index = fact_index;
  r.base_hash = base_hash;
  auto er = edit(base, f, &b, spec, derived_seed(seed, kEditStream, static_cast<std::uint64_t>(f.id)));
  r.edit = er.report;
  if (!r.edit.success) return r;
  const auto& post = er.state;
  for (auto k : c.attacks) {
    AttackSpec a = c.attack;
    a.kind = k;
    a.level = level;
    CandidateSet cs;
    if (k == AttackKind::kFinetuneHp) {
      const auto pool = sample_finetune_facts(w.controls, a.finetune.facts,
                                              derived_seed(seed, kFinetuneStream, static_cast<std::uint64_t>(f.id)));
      cs = finetune_then_attack(post, f, pool, a);
    } else if (is_whitebox(k)) {
      cs = whitebox_attack(k, post, f, a);
    } else {
      cs = blackbox_rephrase_attack(post, f, b, a);
    }
    r.hits.push_back(cs.contains(f.answer));
    r.candidates.push_back(std::move(cs));
  }
  r.d_random = delta_accuracy(base, post, random_controls(w, fact_index));
  r.d_question = delta_accuracy(base, post, question_neighborhood(w, fact_index));
  r.d_image = delta_accuracy(base, post, image_neighborhood(w, fact_index));
  r.d_image_easy = delta_accuracy(base, post, image_neighborhood(w, fact_index, 0));
  r.d_image_hard = delta_accuracy(base, post, image_neighborhood(w, fact_index, 1));
  return r;
}

// ---------------------------------------------------------------------------
// Tables.

struct RowKey {
  std::string defense;
  std::string target;
  int scale = 1;
  std::string level;
  std::uint64_t seed = 0;

  auto tie() const { return std::tie(defense, target, scale, level, seed); }
  bool operator==(const RowKey& o) const { return tie() == o.tie(); }
};

struct ResultRow {
  RowKey key;
  std::vector<double> values;  // aligned with ResultsTable::columns
};

inline bool same_value(double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }

struct ResultsTable {
  std::vector<std::string> columns;
  std::vector<ResultRow> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw InvalidInput("no column named " + name);
    return static_cast<std::size_t>(it - columns.begin());
  }

  bool operator==(const ResultsTable& o) const {
    if (columns != o.columns || rows.size() != o.rows.size()) return false;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!(rows[i].key == o.rows[i].key) || rows[i].values.size() != o.rows[i].values.size()) return false;
      for (std::size_t j = 0; j < rows[i].values.size(); ++j) {
        if (!same_value(rows[i].values[j], o.rows[i].values[j])) return false;
      }
    }
    return true;
  }
};

inline std::vector<std::string> table_columns(const std::vector<AttackKind>& attacks) {
  std::vector<std::string> c{"facts", "edited", "edit_failure_rate", "rewrite_score"};
  for (auto k : attacks) c.push_back(to_string(k));
  for (const char* m : {"rand_dacc", "qneigh_dacc", "ineigh_dacc", "ineigh_easy_dacc", "ineigh_hard_dacc", "combined"}) {
    c.emplace_back(m);
  }
  return c;
}

// Aggregates per-fact records into one row per (defense, target, scale,
// level, seed). Attack success and damage average over successfully edited
// facts; rewrite score averages over all facts.
inline ResultsTable aggregate(const std::vector<FactRecord>& records, const std::vector<AttackKind>& attacks,
                              double lambda) {
  ResultsTable t;
  t.columns = table_columns(attacks);
  std::vector<std::pair<RowKey, std::vector<const FactRecord*>>> groups;
  for (const auto& r : records) {
    RowKey k{to_string(r.edit.kind), to_string(r.edit.target), r.scale, to_string(r.level), r.seed};
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == k; });
    if (it == groups.end()) {
      groups.push_back({k, {}});
      it = std::prev(groups.end());
    }
    it->second.push_back(&r);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& [key, rs] : groups) {
    const double n = static_cast<double>(rs.size());
    double edited = 0, rewrite = 0;
    std::vector<double> succ(attacks.size(), 0);
    double dr = 0, dq = 0, di = 0, die = 0, dih = 0;
    for (const auto* r : rs) {
      rewrite += r->edit.rewrite_score();
      if (!r->edit.success) continue;
      edited += 1;
      for (std::size_t a = 0; a < attacks.size(); ++a) succ[a] += r->hits[a] ? 1 : 0;
      dr += r->d_random;
      dq += r->d_question;
      di += r->d_image;
      die += r->d_image_easy;
      dih += r->d_image_hard;
    }
    auto mean = [&](double s) { return edited > 0 ? s / edited : nan; };
    std::vector<double> v{n, edited, 1.0 - edited / n, rewrite / n};
    double mean_success = 0;
    for (double s : succ) {
      v.push_back(mean(s));
      mean_success += mean(s);
    }
    if (!attacks.empty()) mean_success /= static_cast<double>(attacks.size());
    v.insert(v.end(), {mean(dr), mean(dq), mean(di), mean(die), mean(dih)});
    v.push_back(mean_success + lambda * (mean(dr) + mean(dq) + mean(di)) / 3.0);
    t.rows.push_back({key, std::move(v)});
  }
  return t;
}

// Mean and sample standard deviation of every column across seeds.
struct SummaryRow {
  RowKey key;  // seed unused
  int seeds = 0;
  std::vector<double> mean;
  std::vector<double> stdev;
};

struct SummaryTable {
  std::vector<std::string> columns;
  std::vector<SummaryRow> rows;

  const SummaryRow& find(const std::string& defense, const std::string& target, int scale,
                         const std::string& level) const {
    for (const auto& r : rows) {
      if (r.key.defense == defense && r.key.target == target && r.key.scale == scale && r.key.level == level) return r;
    }
    throw InvalidInput("no summary row for " + defense + "/" + target + "/" + std::to_string(scale) + "/" + level);
  }

  double value(const SummaryRow& r, const std::string& column) const {
    auto it = std::find(columns.begin(), columns.end(), column);
    if (it == columns.end()) throw InvalidInput("no column named " + column);
    return r.mean[static_cast<std::size_t>(it - columns.begin())];
  }
};

inline SummaryTable summarize(const ResultsTable& t) {
  SummaryTable s;
  s.columns = t.columns;
  std::vector<std::vector<const ResultRow*>> groups;
  for (const auto& r : t.rows) {
    RowKey k = r.key;
    k.seed = 0;
    auto it = std::find_if(s.rows.begin(), s.rows.end(), [&](const SummaryRow& x) { return x.key == k; });
    if (it == s.rows.end()) {
      s.rows.push_back({k, 0, {}, {}});
      groups.emplace_back();
      it = std::prev(s.rows.end());
    }
    groups[static_cast<std::size_t>(it - s.rows.begin())].push_back(&r);
  }
  for (std::size_t g = 0; g < s.rows.size(); ++g) {
    auto& row = s.rows[g];
    row.seeds = static_cast<int>(groups[g].size());
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
      double sum = 0, sq = 0, n = 0;
      for (const auto* r : groups[g]) {
        const double x = r->values[c];
        if (std::isnan(x)) continue;
        sum += x;
        sq += x * x;
        n += 1;
      }
      const double m = n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
      row.mean.push_back(m);
      row.stdev.push_back(n > 1 ? std::sqrt(std::max(0.0, (sq - n * m * m) / (n - 1))) : 0.0);
    }
  }
  return s;
}

// CSV with '#'-prefixed header lines echoing the run's provenance.
inline void write_table_csv(const ResultsTable& t, std::ostream& out, const std::vector<std::string>& header = {}) {
  for (const auto& h : header) out << "# " << h << '\n';
  out << "defense,target,scale,level,seed";
  for (const auto& c : t.columns) out << ',' << c;
  out << '\n';
  for (const auto& r : t.rows) {
    out << r.key.defense << ',' << r.key.target << ',' << r.key.scale << ',' << r.key.level << ',' << r.key.seed;
    for (double v : r.values) out << ',' << detail::fmt_double(v);
    out << '\n';
  }
}

inline ResultsTable read_table_csv(std::istream& in) {
  ResultsTable t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!have_header) {
      if (f.size() < 5 || f[0] != "defense") throw InvalidInput("not a results table");
      t.columns.assign(f.begin() + 5, f.end());
      have_header = true;
      continue;
    }
    if (f.size() != 5 + t.columns.size()) throw InvalidInput("ragged results row: " + line);
    ResultRow r;
    r.key = {f[0], f[1], std::stoi(f[2]), f[3], std::stoull(f[4])};
    for (std::size_t i = 5; i < f.size(); ++i) r.values.push_back(detail::parse_double(f[i]));
    t.rows.push_back(std::move(r));
  }
  if (!have_header) throw InvalidInput("empty results table");
  return t;
}

inline void write_summary_csv(const SummaryTable& s, std::ostream& out, const std::vector<std::string>& header = {}) {
  for (const auto& h : header) out << "# " << h << '\n';
  out << "defense,target,scale,level,seeds";
  for (const auto& c : s.columns) out << ',' << c << "_mean," << c << "_std";
  out << '\n';
  for (const auto& r : s.rows) {
    out << r.key.defense << ',' << r.key.target << ',' << r.key.scale << ',' << r.key.level << ',' << r.seeds;
    for (std::size_t c = 0; c < s.columns.size(); ++c) {
      out << ',' << detail::fmt_double(r.mean[c]) << ',' << detail::fmt_double(r.stdev[c]);
    }
    out << '\n';
  }
}

// Long format: one line per (row, column).
inline void write_long_csv(const ResultsTable& t, std::ostream& out, const std::vector<std::string>& header = {}) {
  for (const auto& h : header) out << "# " << h << '\n';
  out << "defense,target,scale,level,seed,metric,value\n";
  for (const auto& r : t.rows) {
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
      out << r.key.defense << ',' << r.key.target << ',' << r.key.scale << ',' << r.key.level << ',' << r.key.seed
          << ',' << t.columns[c] << ',' << detail::fmt_double(r.values[c]) << '\n';
    }
  }
}

inline void write_records_jsonl(const std::vector<FactRecord>& records, const ExperimentConfig& c, std::ostream& out,
                                const std::vector<std::string>& header = {}) {
  out << nlohmann::json{{"record", "header"},
                        {"schema_version", kRecordSchemaVersion},
                        {"experiment", c.name},
                        {"attacks", detail::join(c.attacks, [](AttackKind k) { return to_string(k); })},
                        {"lambda", c.lambda},
                        {"provenance", header}}
             .dump()
      << '\n';
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

struct RecordFile {
  std::vector<AttackKind> attacks;
  double lambda = 0;
  std::vector<FactRecord> records;
};

inline RecordFile read_records_jsonl(std::istream& in) {
  RecordFile f;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw InvalidInput("malformed record line");
    if (!have_header) {
      if (j.value("record", "") != "header") throw InvalidInput("records file must start with a header");
      const int v = j.at("schema_version");
      if (v != kRecordSchemaVersion) throw VersionError("unsupported record schema", v, kRecordSchemaVersion);
      for (auto& s : detail::split_list(j.at("attacks").get<std::string>())) f.attacks.push_back(attack_from_string(s));
      f.lambda = j.at("lambda");
      have_header = true;
      continue;
    }
    f.records.push_back(fact_record_from_json(j, f.attacks));
  }
  if (!have_header) throw InvalidInput("empty records file");
  return f;
}

// ---------------------------------------------------------------------------
// Orchestration.

struct ExperimentResult {
  std::vector<FactRecord> records;
  ResultsTable table;
  SummaryTable summary;
  std::filesystem::path dir;  // where outputs were written; empty if not persisted
};

// Runs independent jobs on a bounded pool. Results land in per-job slots so
// the output order never depends on scheduling.
template <typename Job, typename Result>
std::vector<Result> run_pool(const std::vector<Job>& jobs, int workers, const std::function<Result(const Job&)>& fn) {
  std::vector<Result> out(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        out[i] = fn(jobs[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        next = jobs.size();
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

struct Cell {
  int scale = 1;
  EditTarget target = EditTarget::kLlmMlpDown;
  Level level = Level::kHard;

  std::string label() const {
    return "x" + std::to_string(scale) + "_" + to_string(target) + "_" + to_string(level);
  }
};

inline std::vector<Cell> grid_cells(const ExperimentConfig& c) {
  std::vector<Cell> out;
  for (int s : c.scales) {
    for (auto t : c.targets) {
      for (auto l : c.levels) out.push_back({s, t, l});
    }
  }
  return out;
}

// Computes every per-fact record of the experiment from prepared artifacts.
// Records are ordered by cell, seed, defense, then fact.
inline std::vector<FactRecord> compute_records(const ExperimentConfig& c, const Artifacts& a, const Log& log = {}) {
  c.validate();
  struct Job {
    Cell cell;
    std::uint64_t seed;
    std::size_t defense;
    std::size_t fact_index;
  };
  std::vector<Job> jobs;
  for (const auto& cell : grid_cells(c)) {
    const auto& retained = a.filters.at(cell.scale).retained;
    for (auto seed : c.seeds) {
      const auto facts = select_facts(retained, c.facts, seed);
      for (std::size_t d = 0; d < c.defenses.size(); ++d) {
        for (auto i : facts) jobs.push_back({cell, seed, d, i});
      }
    }
  }
  std::atomic<std::size_t> done{0};
  const std::size_t total = jobs.size();
  const std::size_t every = std::max<std::size_t>(1, total / 20);
  std::mutex log_mu;
  return run_pool<Job, FactRecord>(jobs, c.workers, [&](const Job& j) {
    auto r = run_fact(a.models.at(j.cell.scale), a.hashes.at(j.cell.scale), a.world, j.fact_index,
                      c.defenses[j.defense], j.cell.target, c, j.seed, j.cell.scale, j.cell.level);
    const std::size_t k = ++done;
    if (log && (k % every == 0 || k == total)) {
      std::lock_guard<std::mutex> lock(log_mu);
      log("  " + std::to_string(k) + "/" + std::to_string(total) + " fact edits");
    }
    return r;
  });
}

inline std::vector<std::string> provenance_header(const ExperimentConfig& c, const std::vector<std::string>& extra) {
  std::vector<std::string> h{"experiment=" + c.name};
  h.insert(h.end(), extra.begin(), extra.end());
  return h;
}

inline void write_text(const std::filesystem::path& path, const std::function<void(std::ostream&)>& fn) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  fn(out);
  if (!out) throw InvalidInput("failed writing " + path.string());
}

// Writes records.jsonl, results.csv, summary.csv, long.csv, config.ini and
// one results CSV per grid cell under <output>/<name>/.
inline std::filesystem::path persist_results(const ExperimentConfig& c, const ExperimentResult& r,
                                             const std::vector<std::string>& header) {
  const auto dir = resolve_output_dir(c) / c.name;
  std::filesystem::create_directories(dir);
  const auto h = provenance_header(c, header);
  write_text(dir / "config.ini", [&](std::ostream& o) { o << config_to_ini(c); });
  write_text(dir / "records.jsonl", [&](std::ostream& o) { write_records_jsonl(r.records, c, o, h); });
  write_text(dir / "results.csv", [&](std::ostream& o) { write_table_csv(r.table, o, h); });
  write_text(dir / "summary.csv", [&](std::ostream& o) { write_summary_csv(r.summary, o, h); });
  write_text(dir / "long.csv", [&](std::ostream& o) { write_long_csv(r.table, o, h); });
  const auto cells = grid_cells(c);
  if (cells.size() > 1) {
    for (const auto& cell : cells) {
      ResultsTable part{r.table.columns, {}};
      for (const auto& row : r.table.rows) {
        if (row.key.scale == cell.scale && row.key.target == to_string(cell.target) &&
            row.key.level == to_string(cell.level)) {
          part.rows.push_back(row);
        }
      }
      auto hc = h;
      hc.push_back("cell=" + cell.label());
      write_text(dir / ("cell_" + cell.label() + ".csv"), [&](std::ostream& o) { write_table_csv(part, o, hc); });
    }
  }
  return dir;
}

// Runs a single-cell experiment: every grid axis must hold one value.
inline ExperimentResult run_experiment(const ExperimentConfig& c, const Log& log = {},
                                       const std::vector<std::string>& header = {}, bool persist = true) {
  if (c.scales.size() != 1 || c.targets.size() != 1 || c.levels.size() != 1) {
    throw ConfigurationError("list-valued axes need grid()");
  }
  c.validate();
  const Artifacts a = prepare_artifacts(c, log);
  ExperimentResult r;
  r.records = compute_records(c, a, log);
  r.table = aggregate(r.records, c.attacks, c.lambda);
  r.summary = summarize(r.table);
  if (persist) r.dir = persist_results(c, r, header);
  return r;
}

// Cross product over scales, targets and levels with a shared world and one
// checkpoint per scale. Refuses grids above the cell cap.
inline ExperimentResult grid(const ExperimentConfig& c, const Log& log = {},
                             const std::vector<std::string>& header = {}, bool persist = true) {
  c.validate();
  const Artifacts a = prepare_artifacts(c, log);
  ExperimentResult r;
  r.records = compute_records(c, a, log);
  r.table = aggregate(r.records, c.attacks, c.lambda);
  r.summary = summarize(r.table);
  if (persist) r.dir = persist_results(c, r, header);
  return r;
}

}  // namespace unlab
