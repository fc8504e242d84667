#pragma once

// Pipeline orchestration: data -> split -> TransE -> candidates -> selector
// training -> iterative reranking -> metrics. The CLI stages call the same
// functions, so a staged run and run_experiment agree on every seed.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/harness/config.hpp"
#include "mkgc/harness/metrics.hpp"
#include "mkgc/ier/rerank.hpp"
#include "mkgc/kg/index.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/kg/split.hpp"
#include "mkgc/kg/synthetic.hpp"
#include "mkgc/kge/transe.hpp"
#include "mkgc/moe/klgmoe.hpp"
#include "mkgc/random.hpp"
#include "mkgc/selector/selector.hpp"

namespace mkgc {

// ---- per-stage configs, each seeded from the master seed ----------------

inline SyntheticConfig synthetic_config(const ExperimentConfig& c) {
  SyntheticConfig s = c.data.synthetic;
  s.seed = c.stage_seed("synthetic");
  return s;
}

inline SplitConfig split_config(const ExperimentConfig& c) {
  SplitConfig s = c.split;
  s.seed = c.stage_seed("split");
  return s;
}

inline TransEConfig kge_config(const ExperimentConfig& c) {
  TransEConfig k = c.kge;
  k.seed = c.stage_seed("kge");
  return k;
}

inline ExampleConfig example_config(const ExperimentConfig& c) {
  ExampleConfig e = c.examples;
  e.seed = c.stage_seed("examples");
  return e;
}

inline SelectorTrainConfig train_config(const ExperimentConfig& c) {
  SelectorTrainConfig t = c.train;
  t.seed = c.stage_seed("selector-train");
  return t;
}

inline PromptConfig prompt_config(const ExperimentConfig& c) {
  PromptConfig p = c.prompt;
  p.seed = c.stage_seed("prompt");
  return p;
}

// ---- data ---------------------------------------------------------------

inline KGStore load_store(const ExperimentConfig& c) {
  if (c.data.source == "synthetic") return gen_synthetic(synthetic_config(c)).store;
  return ingest(c.data.triples, c.data.labels, IngestConfig{c.data.languages});
}

/// Splits `total` into integer quotas proportional to `mix` (largest
/// remainder; ties go to the earlier language).
inline std::map<Language, std::size_t> language_quotas(const std::map<Language, double>& mix, std::size_t total) {
  std::map<Language, std::size_t> quota;
  std::vector<std::pair<double, Language>> rest;
  std::size_t assigned = 0;
  for (const auto& [lang, p] : mix) {
    const double exact = p * static_cast<double>(total);
    const auto base = static_cast<std::size_t>(std::floor(exact));
    quota[lang] = base;
    assigned += base;
    rest.emplace_back(exact - static_cast<double>(base), lang);
  }
  std::stable_sort(rest.begin(), rest.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++quota[rest[i % rest.size()].second];
  return quota;
}

/// Prompt-subset triples used for selector training: restricted to the
/// training languages, then (imbalance mode) resampled with replacement to
/// the configured mix at a fixed total.
inline std::vector<Triple> training_triples(const ExperimentConfig& c, std::span<const Triple> pool) {
  const auto& ex = c.experiment;
  std::vector<Triple> kept;
  for (const Triple& t : pool) {
    if (ex.train_languages.empty() ||
        std::find(ex.train_languages.begin(), ex.train_languages.end(), t.language) != ex.train_languages.end()) {
      kept.push_back(t);
    }
  }
  require(!kept.empty(), ErrorKind::kConfig, "experiment: no training triples in the selected training languages");
  if (ex.language_mix.empty()) return kept;

  std::map<Language, std::vector<Triple>> by_lang;
  for (const Triple& t : kept) by_lang[t.language].push_back(t);
  const std::size_t total = ex.imbalance_total > 0 ? ex.imbalance_total : kept.size();
  std::vector<Triple> out;
  out.reserve(total);
  const std::uint64_t seed = c.stage_seed("imbalance");
  for (const auto& [lang, n] : language_quotas(ex.language_mix, total)) {
    if (n == 0) continue;
    const auto& src = by_lang[lang];
    require(!src.empty(), ErrorKind::kConfig,
            "experiment.language_mix: language '" + lang + "' has weight but no training triples");
    Rng rng(fork_seed(seed, lang));
    for (std::size_t i = 0; i < n; ++i) out.push_back(src[rng.below(src.size())]);
  }
  return out;
}

// ---- evaluation ---------------------------------------------------------

/// Gold rank after each of the t = 1..picks.size() rounds, derived from one
/// trace: after t rounds the list is picks[0..t) then the untouched
/// candidates in initial order.
inline std::vector<std::size_t> curve_ranks(std::span<const EntityId> initial, std::span<const EntityId> picks,
                                            EntityId gold, std::size_t retrieval_rank) {
  std::vector<std::size_t> out;
  const auto gold_it = std::find(initial.begin(), initial.end(), gold);
  if (gold_it == initial.end()) {
    out.assign(picks.size(), std::max(retrieval_rank, initial.size() + 1));
    return out;
  }
  std::map<EntityId, std::size_t> pos;
  for (std::size_t i = 0; i < initial.size(); ++i) pos[initial[i]] = i;
  const std::size_t g = static_cast<std::size_t>(gold_it - initial.begin());
  std::optional<std::size_t> gold_round;
  std::size_t unpicked_before = g;
  for (std::size_t t = 0; t < picks.size(); ++t) {
    const std::size_t p = pos.at(picks[t]);
    if (p == g) gold_round = t;
    if (p < g) --unpicked_before;
    out.push_back(gold_round ? *gold_round + 1 : t + 1 + unpicked_before + 1);
  }
  return out;
}

struct Evaluation {
  MetricsReport metrics;               // selector + IER at the effective N_t
  MetricsReport kge;                   // raw retrieval order
  std::vector<MetricsReport> curve;    // t = 1..N_t
  std::vector<RerankRecord> reranks;
  std::vector<RoutingRecord> routing;  // first-round decisions, one per block
};

inline Evaluation evaluate(const ExperimentConfig& c, const SelectorModel& model,
                           std::span<const CandidateList> lists) {
  require(!lists.empty(), ErrorKind::kConfig, "evaluate: no test queries");
  const std::size_t n_t = c.effective_n_t();
  const std::string digest = config_digest(c);
  Evaluation ev;
  std::vector<RankRecord> kge_ranks;
  std::vector<std::vector<RankRecord>> by_t(n_t);
  for (std::size_t i = 0; i < lists.size(); ++i) {
    const CandidateList& l = lists[i];
    require(l.gold.has_value(), ErrorKind::kInvalidArgument, "evaluate: test query without gold");
    const std::size_t m = std::min(c.candidates.eval_m, l.entities.size());
    require(m >= n_t, ErrorKind::kConfig,
            "evaluate: " + std::to_string(m) + " candidates cannot support N_t=" + std::to_string(n_t));
    const std::span<const EntityId> initial(l.entities.data(), m);

    bool first = true;
    const Scorer scorer = [&](const Query& q, std::span<const EntityId> remaining) {
      const Selection s = select(model, q, remaining);
      if (first) {
        for (std::size_t b = 0; b < s.decisions.size(); ++b) {
          ev.routing.push_back({i, b, q.language, q.relation, s.decisions[b]});
        }
        first = false;
      }
      return s.entity;
    };
    const RerankTrace trace = rerank_trace(l.query, initial, scorer, n_t, false);
    const auto ranks = curve_ranks(initial, trace.picks, *l.gold, l.gold_rank);
    for (std::size_t t = 0; t < n_t; ++t) by_t[t].push_back({ranks[t], l.query.language});
    kge_ranks.push_back({l.gold_rank, l.query.language});
    ev.reranks.push_back({l.query, l.gold, trace.final_list.entities, trace.picks, n_t, ranks.back()});
  }
  for (auto& r : by_t) {
    ev.curve.push_back(compute_metrics(r));
    ev.curve.back().config_digest = digest;
  }
  ev.metrics = ev.curve.back();
  ev.kge = compute_metrics(kge_ranks);
  ev.kge.config_digest = digest;
  return ev;
}

/// `t,lang,h1,h3,h10,mrr`, one row per round and language plus an `avg` row.
inline void write_ier_curve_csv(const std::filesystem::path& path, std::span<const MetricsReport> curve) {
  auto out = detail::open_output(path);
  out.precision(17);
  out << "t,lang,h1,h3,h10,mrr\n";
  for (std::size_t t = 0; t < curve.size(); ++t) {
    auto row = [&](const std::string& lang, const Metrics& m) {
      out << t + 1 << ',' << lang << ',' << m.h1 << ',' << m.h3 << ',' << m.h10 << ',' << m.mrr << '\n';
    };
    for (const auto& [lang, m] : curve[t].per_language) row(lang, m);
    row("avg", curve[t].avg);
  }
}

inline void write_routing_jsonl(const std::filesystem::path& path, std::span<const RoutingRecord> records) {
  auto out = detail::open_output(path);
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline std::vector<RoutingRecord> read_routing_jsonl(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::vector<RoutingRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(routing_record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw parse_error(path.string(), lineno, e.what());
    }
  }
  return out;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  auto out = detail::open_output(path);
  out << j.dump(2) << '\n';
}

// ---- whole experiment ---------------------------------------------------

struct ExperimentResult {
  Evaluation eval;
  SelectorTrainReport training;
  std::size_t train_triples = 0;
  std::map<Language, std::size_t> train_triples_by_language;
  std::size_t train_examples = 0;
  std::size_t dropped_examples = 0;
};

inline json summary_json(const ExperimentConfig& c, const ExperimentResult& r) {
  json by_lang = json::object();
  for (const auto& [l, n] : r.train_triples_by_language) by_lang[l] = n;
  return {{"config_digest", config_digest(c)},
          {"seed", c.seed},
          {"train_triples", r.train_triples},
          {"train_triples_by_language", by_lang},
          {"train_examples", r.train_examples},
          {"dropped_examples", r.dropped_examples},
          {"n_t", c.effective_n_t()},
          {"initial_loss", r.training.initial_loss},
          {"final_loss", r.training.epoch_loss.empty() ? r.training.initial_loss : r.training.epoch_loss.back()}};
}

/// Runs the whole pipeline in memory. Artifacts go to `out_dir` when given:
/// config.json, metrics.json, kge_metrics.json, ier_curve.csv, routing.jsonl,
/// loss_curve.csv, summary.json.
inline ExperimentResult run_experiment(const ExperimentConfig& c,
                                       const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  c.validate();
  const KGStore store = load_store(c);
  for (const auto& l : c.experiment.train_languages) {
    require(store.has_language(l), ErrorKind::kConfig, "experiment.train_languages: '" + l + "' not in the data");
  }
  const Split split = make_splits(store, split_config(c));
  require(!split.prompt_subset.empty(), ErrorKind::kConfig, "experiment: empty prompt subset; raise split.prompt_fraction");
  require(!split.test.empty(), ErrorKind::kConfig, "experiment: empty test split");
  const EmbeddingTable table = train_transe(store, split.train, kge_config(c));
  const TripleIndex filter(store.triples());

  ExperimentResult result;
  const auto train = training_triples(c, split.prompt_subset);
  result.train_triples = train.size();
  for (const Triple& t : train) ++result.train_triples_by_language[t.language];
  const auto train_lists = generate_candidates(table, train, c.candidates.m, c.candidates.mode, &filter);
  const ExampleSet examples = build_examples(train_lists, example_config(c));
  require(!examples.examples.empty(), ErrorKind::kConfig,
          "experiment: no training example kept its gold within the candidate list");
  result.train_examples = examples.examples.size();
  result.dropped_examples = examples.dropped;

  SelectorModel model = build_selector(store, c.effective_selector());
  result.training = train_selector(model, examples.examples, train_config(c));

  const auto test_lists = generate_candidates(table, split.test, c.candidates.m, c.candidates.mode, &filter);
  result.eval = evaluate(c, model, test_lists);

  if (out_dir) {
    const auto& d = *out_dir;
    write_json(d / "config.json", to_json(c));
    write_json(d / "metrics.json", to_json(result.eval.metrics));
    write_json(d / "kge_metrics.json", to_json(result.eval.kge));
    write_ier_curve_csv(d / "ier_curve.csv", result.eval.curve);
    write_routing_jsonl(d / "routing.jsonl", result.eval.routing);
    write_loss_curve_csv(d / "loss_curve.csv", result.training);
    write_json(d / "summary.json", summary_json(c, result));
  }
  return result;
}

// ---- ablation -----------------------------------------------------------

struct AblationArm {
  std::string name;
  bool kg = true;
  bool ier = true;
  std::vector<MetricsReport> per_seed;
  std::vector<std::vector<MetricsReport>> curves;  // per seed, t = 1..N_t
  std::vector<MetricsReport> kge;                  // per seed, retrieval order
  double mean_mrr() const {
    double s = 0.0;
    for (const auto& r : per_seed) s += r.avg.mrr;
    return per_seed.empty() ? 0.0 : s / static_cast<double>(per_seed.size());
  }
};

/// Paired effect of arm a over arm b on per-seed average MRR.
struct EffectSize {
  std::string a;
  std::string b;
  double mean_diff = 0.0;
  /// mean / sample sd of the paired differences; nullopt when sd is 0 or n < 2.
  std::optional<double> cohens_d;
};

inline EffectSize paired_effect(const AblationArm& a, const AblationArm& b) {
  require(a.per_seed.size() == b.per_seed.size() && !a.per_seed.empty(), ErrorKind::kInvalidArgument,
          "paired_effect: arms need the same non-empty seed list");
  const std::size_t n = a.per_seed.size();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = a.per_seed[i].avg.mrr - b.per_seed[i].avg.mrr;
  EffectSize e{a.name, b.name, 0.0, std::nullopt};
  for (double d : diff) e.mean_diff += d;
  e.mean_diff /= static_cast<double>(n);
  if (n >= 2) {
    double ss = 0.0;
    for (double d : diff) ss += (d - e.mean_diff) * (d - e.mean_diff);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd > 0.0) e.cohens_d = e.mean_diff / sd;
  }
  return e;
}

struct AblationReport {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationArm> arms;  // full, w/o kg, w/o kg+ier
  std::vector<EffectSize> effects;
};

inline json to_json(const AblationReport& r) {
  json arms = json::array();
  for (const auto& a : r.arms) {
    json per = json::array();
    for (const auto& m : a.per_seed) per.push_back(to_json(m));
    arms.push_back({{"name", a.name}, {"kg", a.kg}, {"ier", a.ier}, {"mean_mrr", a.mean_mrr()}, {"per_seed", per}});
  }
  json effects = json::array();
  for (const auto& e : r.effects) {
    effects.push_back({{"a", e.a},
                       {"b", e.b},
                       {"mean_mrr_diff", e.mean_diff},
                       {"cohens_d", e.cohens_d ? json(*e.cohens_d) : json(nullptr)}});
  }
  return {{"seeds", r.seeds}, {"arms", arms}, {"effects", effects}};
}

/// The three arms over experiment.seeds. Each run overrides only the master
/// seed and the two flags, so arms share data, split and KGE for a given seed.
inline AblationReport run_ablation(const ExperimentConfig& base,
                                   const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  base.validate();
  AblationReport report;
  report.seeds = base.experiment.seeds;
  report.arms = {{"full", true, true, {}, {}, {}}, {"w/o kg", false, true, {}, {}, {}},
                 {"w/o kg+ier", false, false, {}, {}, {}}};
  const char* dirs[] = {"full", "wo_kg", "wo_kg_ier"};
  for (std::uint64_t seed : report.seeds) {
    for (std::size_t a = 0; a < report.arms.size(); ++a) {
      ExperimentConfig c = base;
      c.seed = seed;
      c.experiment.kg = report.arms[a].kg;
      c.experiment.ier = report.arms[a].ier;
      std::optional<std::filesystem::path> dir;
      if (out_dir) dir = *out_dir / dirs[a] / ("seed" + std::to_string(seed));
      auto r = run_experiment(c, dir);
      report.arms[a].per_seed.push_back(r.eval.metrics);
      report.arms[a].curves.push_back(std::move(r.eval.curve));
      report.arms[a].kge.push_back(r.eval.kge);
    }
  }
  report.effects = {paired_effect(report.arms[0], report.arms[1]), paired_effect(report.arms[1], report.arms[2]),
                    paired_effect(report.arms[0], report.arms[2])};
  if (out_dir) write_json(*out_dir / "ablation.json", to_json(report));
  return report;
}

}  // namespace mkgc
