#pragma once

// Experiment configuration: one JSON object, loadable from .json or .toml.
// Every stage seed is forked from the master `seed`; per-component seed keys
// are not accepted, so a run is fully described by (config, seed).

#include <cmath>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "mkgc/error.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/kg/split.hpp"
#include "mkgc/kg/synthetic.hpp"
#include "mkgc/kge/transe.hpp"
#include "mkgc/prompt/prompt.hpp"
#include "mkgc/random.hpp"
#include "mkgc/selector/selector.hpp"

namespace mkgc {

struct DataConfig {
  /// "synthetic" or "ingest".
  std::string source = "synthetic";
  SyntheticConfig synthetic;
  std::string triples;
  std::string labels;
  std::vector<Language> languages;  // ingest only

  std::vector<Language> all_languages() const { return source == "synthetic" ? synthetic.languages : languages; }
};

struct CandidateConfig {
  /// Retrieval depth stored per query.
  std::size_t m = 30;
  /// Candidates handed to the selector at evaluation.
  std::size_t eval_m = 30;
  RankMode mode = RankMode::kFiltered;
};

struct ExperimentSwitches {
  bool kg = true;   // false: one plain low-rank adapter instead of KL-GMoE
  bool ier = true;  // false: a single selection round (N_t = 1)
  /// Languages whose examples train the selector; empty means all.
  std::vector<Language> train_languages;
  /// Training-language proportions for imbalance runs; empty means natural mix.
  std::map<Language, double> language_mix;
  /// Training examples after resampling; 0 means the size of the natural pool.
  std::size_t imbalance_total = 0;
  /// Seeds for multi-seed commands (ablate).
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  SplitConfig split;
  TransEConfig kge;
  CandidateConfig candidates;
  ExampleConfig examples;
  PromptConfig prompt;
  SelectorConfig selector;
  SelectorTrainConfig train{.lr = 5e-3, .epochs = 30, .batch_size = 8};
  std::size_t n_t = 10;
  ExperimentSwitches experiment;

  /// Stage seeds, all derived from `seed`.
  std::uint64_t stage_seed(std::string_view stage) const { return fork_seed(seed, stage); }

  /// Effective IER rounds.
  std::size_t effective_n_t() const { return experiment.ier ? n_t : 1; }

  /// Selector config with the kg switch applied.
  SelectorConfig effective_selector() const {
    SelectorConfig s = selector;
    s.seed = stage_seed("selector");
    if (!experiment.kg) {
      s.adapter.n_groups = 1;
      s.adapter.experts_per_group = 1;
    }
    return s;
  }

  /// Everything checkable without touching data; runs before any training.
  void validate() const {
    const auto langs = data.all_languages();
    require(data.source == "synthetic" || data.source == "ingest", ErrorKind::kConfig,
            "data.source must be synthetic or ingest");
    require(!langs.empty(), ErrorKind::kConfig, "data: no languages configured");
    if (data.source == "ingest") {
      require(!data.triples.empty() && !data.labels.empty(), ErrorKind::kConfig,
              "data: ingest needs data.triples and data.labels");
    }
    const std::set<Language> known(langs.begin(), langs.end());
    kge.validate();
    selector.validate();
    train.validate();
    require(candidates.m >= 1, ErrorKind::kConfig, "candidates.m must be >= 1");
    require(candidates.eval_m >= 1 && candidates.eval_m <= candidates.m, ErrorKind::kConfig,
            "candidates.eval_m must lie in [1, candidates.m]");
    require(examples.m_min >= 1 && examples.m_min <= examples.m_max && examples.m_max <= candidates.m,
            ErrorKind::kConfig, "examples: need 1 <= m_min <= m_max <= candidates.m");
    require(n_t >= 1 && n_t <= candidates.eval_m, ErrorKind::kConfig, "ier.n_t must lie in [1, candidates.eval_m]");
    for (const auto& l : experiment.train_languages) {
      require(known.contains(l), ErrorKind::kConfig, "experiment.train_languages: unknown language '" + l + "'");
    }
    if (!experiment.language_mix.empty()) {
      double total = 0.0;
      for (const auto& [l, p] : experiment.language_mix) {
        require(known.contains(l), ErrorKind::kConfig, "experiment.language_mix: unknown language '" + l + "'");
        require(p >= 0.0, ErrorKind::kConfig, "experiment.language_mix: negative proportion for '" + l + "'");
        total += p;
      }
      require(std::abs(total - 1.0) <= 1e-9, ErrorKind::kConfig,
              "experiment.language_mix must sum to 1 (got " + std::to_string(total) + ")");
      if (!experiment.train_languages.empty()) {
        const std::set<Language> train(experiment.train_languages.begin(), experiment.train_languages.end());
        for (const auto& [l, p] : experiment.language_mix) {
          require(p == 0.0 || train.contains(l), ErrorKind::kConfig,
                  "experiment.language_mix gives weight to '" + l + "', which is not a training language");
        }
      }
    }
    require(!experiment.seeds.empty(), ErrorKind::kConfig, "experiment.seeds must not be empty");
  }
};

// ---- JSON mapping -------------------------------------------------------

namespace detail {

inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  require(j.is_object(), ErrorKind::kConfig, where + " must be a table/object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    require(ok, ErrorKind::kConfig, "unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  const auto& s = c.data.synthetic;
  json mix = json::object();
  for (const auto& [l, p] : c.experiment.language_mix) mix[l] = p;
  return {
      {"seed", c.seed},
      {"data",
       {{"source", c.data.source},
        {"triples", c.data.triples},
        {"labels", c.data.labels},
        {"languages", c.data.languages},
        {"synthetic",
         {{"n_entities", s.n_entities},
          {"n_relations", s.n_relations},
          {"languages", s.languages},
          {"shared_fraction", s.shared_fraction},
          {"facts_per_entity", s.facts_per_entity},
          {"attributes", s.attributes},
          {"relation_rank", s.relation_rank},
          {"language_weights", s.language_weights}}}}},
      {"split",
       {{"train", c.split.train},
        {"valid", c.split.valid},
        {"test", c.split.test},
        {"prompt_fraction", c.split.prompt_fraction},
        {"mode", to_string(c.split.mode)}}},
      {"kge",
       {{"dim", c.kge.dim},
        {"margin", c.kge.margin},
        {"lr", c.kge.lr},
        {"epochs", c.kge.epochs},
        {"negatives_per_positive", c.kge.negatives_per_positive}}},
      {"candidates", {{"m", c.candidates.m}, {"eval_m", c.candidates.eval_m}, {"mode", c.candidates.mode == RankMode::kRaw ? "raw" : "filtered"}}},
      {"examples", {{"m_min", c.examples.m_min}, {"m_max", c.examples.m_max}}},
      {"prompt",
       {{"n_neighbors", c.prompt.n_neighbors},
        {"desc_limit", c.prompt.desc_limit},
        {"keep_empty_neighbor_block", c.prompt.keep_empty_neighbor_block}}},
      {"selector",
       {{"hidden", c.selector.hidden},
        {"n_blocks", c.selector.n_blocks},
        {"desc_limit", c.selector.desc_limit},
        {"train_head", c.selector.train_head},
        {"center_tables", c.selector.center_tables},
        {"adapter",
         {{"n_groups", c.selector.adapter.n_groups},
          {"experts_per_group", c.selector.adapter.experts_per_group},
          {"rank", c.selector.adapter.rank},
          {"mode", to_string(c.selector.adapter.mode)}}}}},
      {"train", {{"lr", c.train.lr}, {"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}}},
      {"ier", {{"n_t", c.n_t}}},
      {"experiment",
       {{"kg", c.experiment.kg},
        {"ier", c.experiment.ier},
        {"train_languages", c.experiment.train_languages},
        {"language_mix", mix},
        {"imbalance_total", c.experiment.imbalance_total},
        {"seeds", c.experiment.seeds}}},
  };
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  using detail::check_keys;
  using detail::read;
  ExperimentConfig c;
  try {
    check_keys(j, {"seed", "data", "split", "kge", "candidates", "examples", "prompt", "selector", "train", "ier",
                   "experiment"},
               "");
    read(j, "seed", c.seed);
    if (j.contains("data")) {
      const json& d = j.at("data");
      check_keys(d, {"source", "triples", "labels", "languages", "synthetic"}, "data");
      read(d, "source", c.data.source);
      read(d, "triples", c.data.triples);
      read(d, "labels", c.data.labels);
      read(d, "languages", c.data.languages);
      if (d.contains("synthetic")) {
        const json& s = d.at("synthetic");
        check_keys(s, {"n_entities", "n_relations", "languages", "shared_fraction", "facts_per_entity", "attributes",
                       "relation_rank", "language_weights"},
                   "data.synthetic");
        auto& sc = c.data.synthetic;
        read(s, "n_entities", sc.n_entities);
        read(s, "n_relations", sc.n_relations);
        read(s, "languages", sc.languages);
        read(s, "shared_fraction", sc.shared_fraction);
        read(s, "facts_per_entity", sc.facts_per_entity);
        read(s, "attributes", sc.attributes);
        read(s, "relation_rank", sc.relation_rank);
        read(s, "language_weights", sc.language_weights);
      }
    }
    if (j.contains("split")) {
      const json& s = j.at("split");
      check_keys(s, {"train", "valid", "test", "prompt_fraction", "mode"}, "split");
      read(s, "train", c.split.train);
      read(s, "valid", c.split.valid);
      read(s, "test", c.split.test);
      read(s, "prompt_fraction", c.split.prompt_fraction);
      if (s.contains("mode")) c.split.mode = parse_split_mode(s.at("mode").get<std::string>());
    }
    if (j.contains("kge")) {
      const json& k = j.at("kge");
      check_keys(k, {"dim", "margin", "lr", "epochs", "negatives_per_positive"}, "kge");
      read(k, "dim", c.kge.dim);
      read(k, "margin", c.kge.margin);
      read(k, "lr", c.kge.lr);
      read(k, "epochs", c.kge.epochs);
      read(k, "negatives_per_positive", c.kge.negatives_per_positive);
    }
    if (j.contains("candidates")) {
      const json& k = j.at("candidates");
      check_keys(k, {"m", "eval_m", "mode"}, "candidates");
      read(k, "m", c.candidates.m);
      read(k, "eval_m", c.candidates.eval_m);
      if (k.contains("mode")) c.candidates.mode = parse_rank_mode(k.at("mode").get<std::string>());
    }
    if (j.contains("examples")) {
      const json& k = j.at("examples");
      check_keys(k, {"m_min", "m_max"}, "examples");
      read(k, "m_min", c.examples.m_min);
      read(k, "m_max", c.examples.m_max);
    }
    if (j.contains("prompt")) {
      const json& k = j.at("prompt");
      check_keys(k, {"n_neighbors", "desc_limit", "keep_empty_neighbor_block"}, "prompt");
      read(k, "n_neighbors", c.prompt.n_neighbors);
      read(k, "desc_limit", c.prompt.desc_limit);
      read(k, "keep_empty_neighbor_block", c.prompt.keep_empty_neighbor_block);
    }
    if (j.contains("selector")) {
      const json& k = j.at("selector");
      check_keys(k, {"hidden", "n_blocks", "desc_limit", "train_head", "center_tables", "adapter"}, "selector");
      read(k, "hidden", c.selector.hidden);
      read(k, "n_blocks", c.selector.n_blocks);
      read(k, "desc_limit", c.selector.desc_limit);
      read(k, "train_head", c.selector.train_head);
      read(k, "center_tables", c.selector.center_tables);
      if (k.contains("adapter")) {
        const json& a = k.at("adapter");
        check_keys(a, {"n_groups", "experts_per_group", "rank", "mode"}, "selector.adapter");
        read(a, "n_groups", c.selector.adapter.n_groups);
        read(a, "experts_per_group", c.selector.adapter.experts_per_group);
        read(a, "rank", c.selector.adapter.rank);
        if (a.contains("mode")) c.selector.adapter.mode = parse_moe_mode(a.at("mode").get<std::string>());
      }
    }
    if (j.contains("train")) {
      const json& k = j.at("train");
      check_keys(k, {"lr", "epochs", "batch_size"}, "train");
      read(k, "lr", c.train.lr);
      read(k, "epochs", c.train.epochs);
      read(k, "batch_size", c.train.batch_size);
    }
    if (j.contains("ier")) {
      const json& k = j.at("ier");
      check_keys(k, {"n_t"}, "ier");
      read(k, "n_t", c.n_t);
    }
    if (j.contains("experiment")) {
      const json& k = j.at("experiment");
      check_keys(k, {"kg", "ier", "train_languages", "language_mix", "imbalance_total", "seeds"}, "experiment");
      read(k, "kg", c.experiment.kg);
      read(k, "ier", c.experiment.ier);
      read(k, "train_languages", c.experiment.train_languages);
      if (k.contains("language_mix")) {
        c.experiment.language_mix.clear();
        for (const auto& [l, p] : k.at("language_mix").items()) c.experiment.language_mix[l] = p.get<double>();
      }
      read(k, "imbalance_total", c.experiment.imbalance_total);
      read(k, "seeds", c.experiment.seeds);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("config: ") + e.what());
  }
  return c;
}

/// Digest of the canonical JSON form (keys sorted, seed included, output
/// paths never part of the config).
inline std::string config_digest(const ExperimentConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

// ---- file loading -------------------------------------------------------

namespace detail {

inline json toml_node_to_json(const toml::node& node, const std::string& where) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_node_to_json(v, where);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(toml_node_to_json(v, where));
    return out;
  }
  if (const auto* s = node.as_string()) return json(s->get());
  if (const auto* i = node.as_integer()) return json(i->get());
  if (const auto* f = node.as_floating_point()) return json(f->get());
  if (const auto* b = node.as_boolean()) return json(b->get());
  fail(ErrorKind::kConfig, where + ": dates and times are not valid config values");
}

}  // namespace detail

inline json parse_toml_config(const std::string& text, const std::string& name) {
  try {
    const toml::table table = toml::parse(text, std::string_view(name));
    return detail::toml_node_to_json(table, name);
  } catch (const toml::parse_error& e) {
    const auto& src = e.source();
    throw parse_error(name, src.begin.line, std::string(e.description()));
  }
}

/// .toml files parse as TOML, anything else as JSON.
inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::stringstream buf;
  buf << in.rdbuf();
  json j;
  if (path.extension() == ".toml") {
    j = parse_toml_config(buf.str(), path.string());
  } else {
    try {
      j = json::parse(buf.str());
    } catch (const json::parse_error& e) {
      fail(ErrorKind::kParse, path.string() + ": " + e.what());
    }
  }
  return experiment_config_from_json(j);
}

}  // namespace mkgc
