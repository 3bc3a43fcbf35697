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

// Deterministic synthetic world: concepts grouped into categories, each
// concept carrying one answer per relation. An image is the concept's
// semantic class mean followed by a nuisance block; a question names the
// relation and the object category. Every fact gets graded rephrase and
// neighborhood variants.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unlab/error.hpp"
#include "unlab/model.hpp"

namespace unlab {

enum class Level { kEasy = 0, kMedium = 1, kHard = 2 };

inline std::string to_string(Level l) {
  switch (l) {
    case Level::kEasy: return "easy";
    case Level::kMedium: return "medium";
    case Level::kHard: return "hard";
  }
  return "unknown";
}

inline Level level_from_string(const std::string& s) {
  if (s == "easy") return Level::kEasy;
  if (s == "medium") return Level::kMedium;
  if (s == "hard") return Level::kHard;
  throw ConfigurationError("unknown rephrase level: " + s);
}

struct WorldConfig {
  int categories = 24;
  int concepts_per_category = 5;
  int relations = 5;
  int semantic_dim = 16;
  int nuisance_dim = 16;
  double category_spread = 1.5;
  double concept_spread = 1.0;
  double nuisance_std = 1.0;
  // Per-level perturbation amplitudes, strictly increasing:
  // easy = salt-and-pepper magnitude, medium = nuisance resample std,
  // hard = nuisance std of a fresh class sample.
  std::array<double, 3> level_amplitude{0.8, 1.0, 1.2};
  int salt_pepper_coords = 4;
  double hard_semantic_jitter = 0.3;
  int neutral_prefixes = 8;
  int question_neighbors = 2;
  int controls_per_fact = 20;
  int fact_count = 500;
  int control_count = 100;
  int vocab_size = 256;
  std::uint64_t seed = 17;

  int image_dim() const { return semantic_dim + nuisance_dim; }
  bool operator==(const WorldConfig&) const = default;
  int concepts() const { return categories * concepts_per_category; }

  void validate() const {
    if (categories < 1 || concepts_per_category < 2 || relations < 2) {
      throw ConfigurationError("world needs >= 2 concepts per category and >= 2 relations");
    }
    if (semantic_dim < 1 || nuisance_dim < 1) {
      throw ConfigurationError("feature blocks must be nonempty");
    }
    if (!(level_amplitude[0] < level_amplitude[1] && level_amplitude[1] < level_amplitude[2])) {
      throw ConfigurationError("level amplitudes must satisfy easy < medium < hard");
    }
    if (salt_pepper_coords < 1 || salt_pepper_coords > nuisance_dim) {
      throw ConfigurationError("salt_pepper_coords must lie in 1..nuisance_dim");
    }
    if (fact_count < 1 || control_count < 1) {
      throw ConfigurationError("fact and control counts must be positive");
    }
    if (fact_count + control_count > concepts() * relations) {
      throw ConfigurationError("not enough concept-relation pairs for facts plus controls");
    }
    if (question_neighbors < 1 || question_neighbors > relations - 1) {
      throw ConfigurationError("question_neighbors must lie in 1..relations-1");
    }
    if (controls_per_fact < 1 || controls_per_fact > control_count) {
      throw ConfigurationError("controls_per_fact must lie in 1..control_count");
    }
    if (neutral_prefixes < 1) throw ConfigurationError("need at least one neutral prefix");
    if (answers_per_relation() < concepts_per_category) {
      throw ConfigurationError("vocab too small for concepts x relations");
    }
  }

  // Vocabulary layout above the reserved tokens.
  int question_mark() const { return tokens::kFirstFreeToken; }
  int prefix_token(int i) const { return question_mark() + 1 + i; }
  int relation_token(int r, int slot) const {  // 5 slots per relation
    return prefix_token(neutral_prefixes) + 5 * r + slot;
  }
  int category_token(int g) const { return relation_token(relations, 0) + g; }
  int first_answer_token() const { return category_token(categories); }
  int answers_per_relation() const {
    return (vocab_size - first_answer_token()) / relations;
  }
};

// One generated fact's identity in the latent world.
struct FactMeta {
  int concept_id = 0;
  int relation = 0;
  bool operator==(const FactMeta&) const = default;
};

struct QuestionNeighbor {
  std::vector<int> question;
  int answer = 0;
  bool operator==(const QuestionNeighbor&) const = default;
};

struct EvalBundle {
  int fact_id = 0;
  std::array<std::vector<int>, 3> question_rephrases;   // by Level
  std::array<std::vector<double>, 3> image_rephrases;   // by Level
  std::array<std::vector<double>, 2> image_neighbors;   // easy, hard
  int image_neighbor_answer = 0;
  std::vector<QuestionNeighbor> question_neighbors;
  std::vector<int> random_controls;  // indices into World::controls
  int alternative_answer = 0;        // false target for error injection

  const std::vector<int>& question(Level l) const {
    return question_rephrases[static_cast<std::size_t>(l)];
  }
  const std::vector<double>& image(Level l) const {
    return image_rephrases[static_cast<std::size_t>(l)];
  }
  bool operator==(const EvalBundle&) const = default;
};

struct World {
  WorldConfig config;
  std::vector<std::vector<double>> class_means;    // per concept, semantic block
  std::vector<std::vector<int>> answer_table;      // [concept][relation]
  std::vector<std::vector<double>> answer_latent;  // per answer token offset
  std::vector<Fact> facts;
  std::vector<Fact> controls;
  std::vector<FactMeta> fact_meta;
  std::vector<FactMeta> control_meta;
  std::vector<EvalBundle> bundles;  // parallel to facts
  std::vector<int> dropped;         // fact ids with no usable neighborhood

  int category_of(int concept_id) const { return concept_id / config.concepts_per_category; }

  std::vector<int> question_for(int relation, int category, bool alternate = false) const {
    const WorldConfig& c = config;
    if (alternate) {
      return {c.relation_token(relation, 0), c.relation_token(relation, 3),
              c.relation_token(relation, 4), c.category_token(category), c.question_mark()};
    }
    return {c.relation_token(relation, 0), c.relation_token(relation, 1),
            c.relation_token(relation, 2), c.category_token(category), c.question_mark()};
  }

  bool operator==(const World&) const = default;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

// Independent RNG stream per (seed, purpose, index).
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t index) {
  return std::mt19937_64(detail::splitmix64(detail::splitmix64(seed ^ (purpose << 32)) + index));
}

namespace stream {
inline constexpr std::uint64_t kLatent = 1;
inline constexpr std::uint64_t kNuisance = 2;
inline constexpr std::uint64_t kRephrase = 3;
inline constexpr std::uint64_t kNeighbor = 4;
inline constexpr std::uint64_t kAugment = 5;
inline constexpr std::uint64_t kSplit = 6;
}  // namespace stream

inline std::vector<double> sample_nuisance(const WorldConfig& c, double stdev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stdev);
  std::vector<double> out(static_cast<std::size_t>(c.nuisance_dim));
  for (auto& x : out) x = n(rng);
  return out;
}

inline std::vector<double> compose_image(const std::vector<double>& semantic,
                                         const std::vector<double>& nuisance) {
  std::vector<double> v = semantic;
  v.insert(v.end(), nuisance.begin(), nuisance.end());
  return v;
}

// Image variants shared by rephrase generation and pretraining augmentation.
inline std::vector<double> perturb_image(const World& w, int concept_id, const std::vector<double>& v,
                                         Level level, std::mt19937_64& rng) {
  const WorldConfig& c = w.config;
  const auto sem = static_cast<std::size_t>(c.semantic_dim);
  const auto amp = c.level_amplitude[static_cast<std::size_t>(level)];
  switch (level) {
    case Level::kEasy: {
      std::vector<double> out = v;
      std::vector<int> coords(static_cast<std::size_t>(c.nuisance_dim));
      for (int i = 0; i < c.nuisance_dim; ++i) coords[static_cast<std::size_t>(i)] = i;
      std::shuffle(coords.begin(), coords.end(), rng);
      std::bernoulli_distribution sign(0.5);
      for (int i = 0; i < c.salt_pepper_coords; ++i) {
        out[sem + static_cast<std::size_t>(coords[static_cast<std::size_t>(i)])] = sign(rng) ? amp : -amp;
      }
      return out;
    }
    case Level::kMedium: {
      const std::vector<double> semantic(v.begin(), v.begin() + static_cast<long>(sem));
      return compose_image(semantic, sample_nuisance(c, amp, rng));
    }
    case Level::kHard: {
      std::normal_distribution<double> jitter(0.0, c.hard_semantic_jitter);
      std::vector<double> semantic = w.class_means[static_cast<std::size_t>(concept_id)];
      for (auto& x : semantic) x += jitter(rng);
      return compose_image(semantic, sample_nuisance(c, amp, rng));
    }
  }
  return v;
}

inline std::vector<int> rephrase_question(const World& w, const FactMeta& m, const std::vector<int>& q,
                                          Level level, std::mt19937_64& rng) {
  const WorldConfig& c = w.config;
  switch (level) {
    case Level::kEasy: {
      std::uniform_int_distribution<int> pick(0, c.neutral_prefixes - 1);
      std::vector<int> out{c.prefix_token(pick(rng))};
      out.insert(out.end(), q.begin(), q.end());
      return out;
    }
    case Level::kMedium:
      return w.question_for(m.relation, w.category_of(m.concept_id), true);
    case Level::kHard: {
      std::vector<int> out(std::begin(tokens::kJailbreak), std::end(tokens::kJailbreak));
      out.insert(out.end(), q.begin(), q.end());
      return out;
    }
  }
  return q;
}

namespace detail {

inline void build_latents(World& w) {
  const WorldConfig& c = w.config;
  auto rng = stream_rng(c.seed, stream::kLatent, 0);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(c.categories));
  for (auto& ctr : centers) {
    for (int i = 0; i < c.semantic_dim; ++i) ctr.push_back(c.category_spread * n(rng));
  }
  for (int k = 0; k < c.concepts(); ++k) {
    std::vector<double> mean = centers[static_cast<std::size_t>(k / c.concepts_per_category)];
    for (auto& x : mean) x += c.concept_spread * n(rng);
    w.class_means.push_back(std::move(mean));
  }
  // Relation r owns a disjoint answer slice; concepts sharing a category get
  // distinct answers within each relation.
  const int per_rel = c.answers_per_relation();
  w.answer_table.assign(static_cast<std::size_t>(c.concepts()),
                        std::vector<int>(static_cast<std::size_t>(c.relations)));
  for (int r = 0; r < c.relations; ++r) {
    std::vector<int> slice(static_cast<std::size_t>(per_rel));
    for (int i = 0; i < per_rel; ++i) slice[static_cast<std::size_t>(i)] = c.first_answer_token() + r * per_rel + i;
    for (int g = 0; g < c.categories; ++g) {
      std::shuffle(slice.begin(), slice.end(), rng);
      for (int j = 0; j < c.concepts_per_category; ++j) {
        w.answer_table[static_cast<std::size_t>(g * c.concepts_per_category + j)][static_cast<std::size_t>(r)] =
            slice[static_cast<std::size_t>(j)];
      }
    }
  }
  w.answer_latent.assign(static_cast<std::size_t>(c.vocab_size - c.first_answer_token()), {});
  for (auto& lat : w.answer_latent) {
    for (int i = 0; i < 8; ++i) lat.push_back(n(rng));
  }
}

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline Fact make_fact(const World& w, int id, const FactMeta& m) {
  auto rng = stream_rng(w.config.seed, stream::kNuisance, static_cast<std::uint64_t>(id));
  Fact f;
  f.id = id;
  f.image = compose_image(w.class_means[static_cast<std::size_t>(m.concept_id)],
                          sample_nuisance(w.config, w.config.nuisance_std, rng));
  f.question = w.question_for(m.relation, w.category_of(m.concept_id));
  f.answer = w.answer_table[static_cast<std::size_t>(m.concept_id)][static_cast<std::size_t>(m.relation)];
  return f;
}

}  // namespace detail

// Facts and disjoint controls; bundles are left empty.
inline World gen_corpus(const WorldConfig& config) {
  config.validate();
  World w;
  w.config = config;
  detail::build_latents(w);
  std::vector<int> pairs(static_cast<std::size_t>(config.concepts() * config.relations));
  for (std::size_t i = 0; i < pairs.size(); ++i) pairs[i] = static_cast<int>(i);
  auto rng = stream_rng(config.seed, stream::kSplit, 0);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  for (int i = 0; i < config.fact_count + config.control_count; ++i) {
    const int id = pairs[static_cast<std::size_t>(i)];
    const FactMeta m{id / config.relations, id % config.relations};
    if (i < config.fact_count) {
      w.facts.push_back(detail::make_fact(w, id, m));
      w.fact_meta.push_back(m);
    } else {
      w.controls.push_back(detail::make_fact(w, id, m));
      w.control_meta.push_back(m);
    }
  }
  return w;
}

// Fills the rephrase half of a bundle. Every variant keeps the answer.
inline void gen_rephrases(const World& w, std::size_t fact_index, EvalBundle& b) {
  const Fact& f = w.facts[fact_index];
  const FactMeta& m = w.fact_meta[fact_index];
  auto rng = stream_rng(w.config.seed, stream::kRephrase, static_cast<std::uint64_t>(f.id));
  b.fact_id = f.id;
  for (Level l : {Level::kEasy, Level::kMedium, Level::kHard}) {
    b.image_rephrases[static_cast<std::size_t>(l)] = perturb_image(w, m.concept_id, f.image, l, rng);
    b.question_rephrases[static_cast<std::size_t>(l)] = rephrase_question(w, m, f.question, l, rng);
  }
}

// Fills the neighborhood half of a bundle: two images of an alternative
// concept from the same category, question neighbors about other relations,
// and a sample of random controls.
inline void gen_neighborhoods(const World& w, std::size_t fact_index, EvalBundle& b) {
  const WorldConfig& c = w.config;
  const Fact& f = w.facts[fact_index];
  const FactMeta& m = w.fact_meta[fact_index];
  auto rng = stream_rng(c.seed, stream::kNeighbor, static_cast<std::uint64_t>(f.id));
  const int g = w.category_of(m.concept_id);
  std::vector<int> alternatives;
  for (int j = 0; j < c.concepts_per_category; ++j) {
    const int k = g * c.concepts_per_category + j;
    if (k != m.concept_id && w.answer_table[static_cast<std::size_t>(k)][static_cast<std::size_t>(m.relation)] != f.answer) {
      alternatives.push_back(k);
    }
  }
  if (alternatives.empty()) {
    throw GenerationError("no alternative concept for fact " + std::to_string(f.id));
  }
  std::shuffle(alternatives.begin(), alternatives.end(), rng);
  if (alternatives.size() > 3) alternatives.resize(3);
  const auto& a_lat = w.answer_latent[static_cast<std::size_t>(f.answer - c.first_answer_token())];
  int best = alternatives.front();
  double best_dist = -1;
  for (int k : alternatives) {
    const int ans = w.answer_table[static_cast<std::size_t>(k)][static_cast<std::size_t>(m.relation)];
    const double dist = detail::squared_distance(a_lat, w.answer_latent[static_cast<std::size_t>(ans - c.first_answer_token())]);
    if (dist > best_dist) {
      best_dist = dist;
      best = k;
    }
  }
  b.image_neighbor_answer = w.answer_table[static_cast<std::size_t>(best)][static_cast<std::size_t>(m.relation)];
  b.alternative_answer = b.image_neighbor_answer;
  const auto sem = static_cast<long>(c.semantic_dim);
  const std::vector<double> own_nuisance(f.image.begin() + sem, f.image.end());
  b.image_neighbors[0] = compose_image(w.class_means[static_cast<std::size_t>(best)],
                                       sample_nuisance(c, c.nuisance_std, rng));
  b.image_neighbors[1] = compose_image(w.class_means[static_cast<std::size_t>(best)], own_nuisance);

  std::vector<int> others;
  for (int r = 0; r < c.relations; ++r) {
    if (r != m.relation) others.push_back(r);
  }
  std::shuffle(others.begin(), others.end(), rng);
  b.question_neighbors.clear();
  for (int i = 0; i < c.question_neighbors; ++i) {
    const int r = others[static_cast<std::size_t>(i)];
    b.question_neighbors.push_back(
        {w.question_for(r, g), w.answer_table[static_cast<std::size_t>(m.concept_id)][static_cast<std::size_t>(r)]});
  }
  std::vector<int> ctrl(w.controls.size());
  for (std::size_t i = 0; i < ctrl.size(); ++i) ctrl[i] = static_cast<int>(i);
  std::shuffle(ctrl.begin(), ctrl.end(), rng);
  ctrl.resize(static_cast<std::size_t>(c.controls_per_fact));
  std::sort(ctrl.begin(), ctrl.end());
  b.random_controls = std::move(ctrl);
}

// Full world: corpus plus a bundle for every fact. Facts whose neighborhood
// cannot be built are dropped and their ids recorded.
inline World generate_world(const WorldConfig& config) {
  World w = gen_corpus(config);
  std::vector<Fact> kept;
  std::vector<FactMeta> kept_meta;
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    EvalBundle b;
    try {
      gen_rephrases(w, i, b);
      gen_neighborhoods(w, i, b);
    } catch (const GenerationError&) {
      w.dropped.push_back(w.facts[i].id);
      continue;
    }
    kept.push_back(w.facts[i]);
    kept_meta.push_back(w.fact_meta[i]);
    w.bundles.push_back(std::move(b));
  }
  w.facts = std::move(kept);
  w.fact_meta = std::move(kept_meta);
  return w;
}

// Training views of facts and controls: the plain input plus randomly drawn
// image and question variants. The jailbreak prefix appears here so the model
// learns it as an instruction marker.
inline std::vector<Fact> pretraining_corpus(const World& w, int variants_per_fact) {
  std::vector<Fact> out;
  auto add = [&](const Fact& f, const FactMeta& m) {
    auto rng = stream_rng(w.config.seed, stream::kAugment, static_cast<std::uint64_t>(f.id));
    std::uniform_int_distribution<int> form(0, 3);
    out.push_back(f);
    for (int i = 1; i < variants_per_fact; ++i) {
      Fact v = f;
      const int img = form(rng);
      const int qst = form(rng);
      if (img > 0) v.image = perturb_image(w, m.concept_id, f.image, static_cast<Level>(img - 1), rng);
      if (qst > 0) v.question = rephrase_question(w, m, f.question, static_cast<Level>(qst - 1), rng);
      out.push_back(std::move(v));
    }
  };
  for (std::size_t i = 0; i < w.facts.size(); ++i) add(w.facts[i], w.fact_meta[i]);
  for (std::size_t i = 0; i < w.controls.size(); ++i) add(w.controls[i], w.control_meta[i]);
  return out;
}

// Token-level Levenshtein distance.
inline int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  return std::sqrt(detail::squared_distance(a, b));
}

// World JSON-lines format, schema version kWorldSchemaVersion.
// Line 1: {"record":"header","schema_version":1,"config":{...}}
// Then one {"record":"fact",...} line per fact, carrying its "bundle", then
// one {"record":"control",...} line per control, then an optional
// {"record":"dropped","ids":[...]} line. Latent tables are regenerated from
// the config on load.
inline constexpr int kWorldSchemaVersion = 1;

inline nlohmann::json to_json(const WorldConfig& c) {
  return {{"categories", c.categories},
          {"concepts_per_category", c.concepts_per_category},
          {"relations", c.relations},
          {"semantic_dim", c.semantic_dim},
          {"nuisance_dim", c.nuisance_dim},
          {"category_spread", c.category_spread},
          {"concept_spread", c.concept_spread},
          {"nuisance_std", c.nuisance_std},
          {"level_amplitude", c.level_amplitude},
          {"salt_pepper_coords", c.salt_pepper_coords},
          {"hard_semantic_jitter", c.hard_semantic_jitter},
          {"neutral_prefixes", c.neutral_prefixes},
          {"question_neighbors", c.question_neighbors},
          {"controls_per_fact", c.controls_per_fact},
          {"fact_count", c.fact_count},
          {"control_count", c.control_count},
          {"vocab_size", c.vocab_size},
          {"seed", c.seed}};
}

inline WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  try {
    c.categories = j.at("categories");
    c.concepts_per_category = j.at("concepts_per_category");
    c.relations = j.at("relations");
    c.semantic_dim = j.at("semantic_dim");
    c.nuisance_dim = j.at("nuisance_dim");
    c.category_spread = j.at("category_spread");
    c.concept_spread = j.at("concept_spread");
    c.nuisance_std = j.at("nuisance_std");
    c.level_amplitude = j.at("level_amplitude").get<std::array<double, 3>>();
    c.salt_pepper_coords = j.at("salt_pepper_coords");
    c.hard_semantic_jitter = j.at("hard_semantic_jitter");
    c.neutral_prefixes = j.at("neutral_prefixes");
    c.question_neighbors = j.at("question_neighbors");
    c.controls_per_fact = j.at("controls_per_fact");
    c.fact_count = j.at("fact_count");
    c.control_count = j.at("control_count");
    c.vocab_size = j.at("vocab_size");
    c.seed = j.at("seed");
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("bad world config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const EvalBundle& b) {
  nlohmann::json qn = nlohmann::json::array();
  for (const auto& n : b.question_neighbors) qn.push_back({{"question", n.question}, {"answer", n.answer}});
  return {{"question_rephrases", b.question_rephrases},
          {"image_rephrases", b.image_rephrases},
          {"image_neighbors", b.image_neighbors},
          {"image_neighbor_answer", b.image_neighbor_answer},
          {"question_neighbors", qn},
          {"random_controls", b.random_controls},
          {"alternative_answer", b.alternative_answer}};
}

inline EvalBundle bundle_from_json(const nlohmann::json& j, int fact_id) {
  EvalBundle b;
  b.fact_id = fact_id;
  b.question_rephrases = j.at("question_rephrases").get<std::array<std::vector<int>, 3>>();
  b.image_rephrases = j.at("image_rephrases").get<std::array<std::vector<double>, 3>>();
  b.image_neighbors = j.at("image_neighbors").get<std::array<std::vector<double>, 2>>();
  b.image_neighbor_answer = j.at("image_neighbor_answer");
  for (const auto& n : j.at("question_neighbors")) {
    b.question_neighbors.push_back({n.at("question").get<std::vector<int>>(), n.at("answer").get<int>()});
  }
  b.random_controls = j.at("random_controls").get<std::vector<int>>();
  b.alternative_answer = j.at("alternative_answer");
  return b;
}

inline void save_world(const World& w, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write world file: " + path);
  out << nlohmann::json{{"record", "header"}, {"schema_version", kWorldSchemaVersion}, {"config", to_json(w.config)}}.dump()
      << '\n';
  auto fact_json = [](const char* kind, const Fact& f, const FactMeta& m) {
    return nlohmann::json{{"record", kind}, {"id", f.id}, {"concept", m.concept_id}, {"relation", m.relation},
                          {"image", f.image}, {"question", f.question}, {"answer", f.answer}};
  };
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    auto j = fact_json("fact", w.facts[i], w.fact_meta[i]);
    j["bundle"] = to_json(w.bundles[i]);
    out << j.dump() << '\n';
  }
  for (std::size_t i = 0; i < w.controls.size(); ++i) {
    out << fact_json("control", w.controls[i], w.control_meta[i]).dump() << '\n';
  }
  if (!w.dropped.empty()) out << nlohmann::json{{"record", "dropped"}, {"ids", w.dropped}}.dump() << '\n';
  if (!out) throw InvalidInput("failed writing world file: " + path);
}

inline World load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read world file: " + path);
  World w;
  std::string line;
  bool have_header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const std::string kind = j.at("record");
      if (!have_header) {
        if (kind != "header") throw InvalidInput("world file must start with a header record");
        const int version = j.at("schema_version");
        if (version != kWorldSchemaVersion) {
          throw VersionError("unsupported world schema", version, kWorldSchemaVersion);
        }
        w.config = world_config_from_json(j.at("config"));
        detail::build_latents(w);
        have_header = true;
        continue;
      }
      if (kind == "dropped") {
        w.dropped = j.at("ids").get<std::vector<int>>();
        continue;
      }
      Fact f{j.at("id").get<int>(), j.at("image").get<std::vector<double>>(),
             j.at("question").get<std::vector<int>>(), j.at("answer").get<int>()};
      const FactMeta m{j.at("concept").get<int>(), j.at("relation").get<int>()};
      if (kind == "fact") {
        w.bundles.push_back(bundle_from_json(j.at("bundle"), f.id));
        w.facts.push_back(std::move(f));
        w.fact_meta.push_back(m);
      } else if (kind == "control") {
        w.controls.push_back(std::move(f));
        w.control_meta.push_back(m);
      } else {
        throw InvalidInput("unknown record kind: " + kind);
      }
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw InvalidInput("empty world file: " + path);
  return w;
}

}  // namespace unlab
