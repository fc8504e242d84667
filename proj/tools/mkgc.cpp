// mkgc: staged command-line pipeline over one workspace directory (--out-dir).
//
//   synth | ingest   -> store/{triples.tsv,labels.jsonl,stats.json}, config.json
//   split            -> split/{train,valid,test,prompt}.tsv
//   train-kge        -> kge/transe.bin
//   gen-candidates   -> candidates/{train,test}.jsonl
//   build-prompts    -> prompts/{train,test}.jsonl
//   train-adapter    -> selector/, loss_curve.csv
//   rerank           -> rerank.jsonl, routing.jsonl
//   eval             -> metrics.json, kge_metrics.json, ier_curve.csv
//   route-analyze    -> routing_language.csv, routing_relation.csv, routing_summary.json
//   ablate           -> ablation.json (+ one directory per arm and seed)
//   flops            -> flops.json
//   run              -> every artifact of one experiment, in memory
//
// Failures print {"error":{"kind":...,"message":...}} on stderr and exit nonzero.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "mkgc/error.hpp"
#include "mkgc/harness/config.hpp"
#include "mkgc/harness/experiment.hpp"
#include "mkgc/harness/flops.hpp"
#include "mkgc/harness/routing_analysis.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/kg/split.hpp"
#include "mkgc/kg/synthetic.hpp"
#include "mkgc/kge/transe.hpp"
#include "mkgc/prompt/prompt.hpp"
#include "mkgc/selector/selector.hpp"

namespace fs = std::filesystem;
using namespace mkgc;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "mkgc-work";
};

ExperimentConfig load(const Common& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

void emit(const json& j) { std::cout << j.dump() << '\n'; }

// ---- workspace ----------------------------------------------------------

/// The data stage records the config; later stages refuse a different one so
/// artifacts never mix settings.
void check_workspace(const fs::path& ws, const ExperimentConfig& c) {
  const fs::path p = ws / "config.json";
  require(fs::exists(p), ErrorKind::kNotFound, ws.string() + ": no workspace here; run synth or ingest first");
  auto in = detail::open_input(p);
  const auto recorded = experiment_config_from_json(json::parse(in));
  require(config_digest(recorded) == config_digest(c), ErrorKind::kConfig,
          "workspace " + ws.string() + " was built with config " + config_digest(recorded) + ", not " +
              config_digest(c));
}

KGStore workspace_store(const fs::path& ws, const ExperimentConfig& c) {
  return ingest(ws / "store" / "triples.tsv", ws / "store" / "labels.jsonl", IngestConfig{c.data.all_languages()});
}

std::vector<Triple> read_split(const fs::path& ws, const std::string& name, const ExperimentConfig& c) {
  std::vector<Triple> out;
  for (auto& rt : read_triples_tsv(ws / "split" / (name + ".tsv"), c.data.all_languages())) out.push_back(rt.triple);
  return out;
}

void write_store(const fs::path& ws, const ExperimentConfig& c, const KGStore& store) {
  export_store(ws / "store", store);
  write_json(ws / "store" / "stats.json", to_json(store.stats()));
  write_json(ws / "config.json", to_json(c));
}

// ---- stages -------------------------------------------------------------

void cmd_synth(const Common& o) {
  const auto c = load(o);
  require(c.data.source == "synthetic", ErrorKind::kConfig, "synth: data.source is not synthetic");
  const fs::path ws = o.out_dir;
  const auto kg = gen_synthetic(synthetic_config(c));
  write_store(ws, c, kg.store);
  write_manifest_jsonl(ws / "store" / "manifest.jsonl", kg.manifest);
  emit({{"stage", "synth"}, {"facts", kg.facts}, {"shared_facts", kg.shared_facts}, {"stats", to_json(kg.store.stats())}});
}

void cmd_ingest(const Common& o) {
  const auto c = load(o);
  require(c.data.source == "ingest", ErrorKind::kConfig, "ingest: data.source is not ingest");
  const fs::path ws = o.out_dir;
  const auto store = load_store(c);
  write_store(ws, c, store);
  emit({{"stage", "ingest"}, {"stats", to_json(store.stats())}});
}

void cmd_split(const Common& o) {
  const auto c = load(o);
  const fs::path ws = o.out_dir;
  check_workspace(ws, c);
  const auto store = workspace_store(ws, c);
  const auto s = make_splits(store, split_config(c));
  write_triples_tsv(ws / "split" / "train.tsv", s.train);
  write_triples_tsv(ws / "split" / "valid.tsv", s.validation);
  write_triples_tsv(ws / "split" / "test.tsv", s.test);
  write_triples_tsv(ws / "split" / "prompt.tsv", s.prompt_subset);
  emit({{"stage", "split"},
        {"train", s.train.size()},
        {"valid", s.validation.size()},
        {"test", s.test.size()},
        {"prompt", s.prompt_subset.size()},
        {"closure_reassigned", s.closure_reassigned}});
}

void cmd_train_kge(const Common& o) {
  const auto c = load(o);
  const fs::path ws = o.out_dir;
  check_workspace(ws, c);
  const auto store = workspace_store(ws, c);
  TransEReport report;
  const auto table = train_transe(store, read_split(ws, "train", c), kge_config(c), &report);
  save_checkpoint(ws / "kge" / "transe.bin", table, kge_config(c));
  emit({{"stage", "train-kge"},
        {"train_facts", report.train_facts},
        {"final_loss", report.epoch_loss.empty() ? 0.0 : report.epoch_loss.back()}});
}

void cmd_gen_candidates(const Common& o) {
  const auto c = load(o);
  const fs::path ws = o.out_dir;
  check_workspace(ws, c);
  const auto store = workspace_store(ws, c);
  const auto table = load_checkpoint(ws / "kge" / "transe.bin");
  const TripleIndex filter(store.triples());
  const auto train = training_triples(c, read_split(ws, "prompt", c));
  const auto test = read_split(ws, "test", c);
  write_candidates_jsonl(ws / "candidates" / "train.jsonl",
                         generate_candidates(table, train, c.candidates.m, c.candidates.mode, &filter));
  const auto test_lists = generate_candidates(table, test, c.candidates.m, c.candidates.mode, &filter);
  write_candidates_jsonl(ws / "candidates" / "test.jsonl", test_lists);
  emit({{"stage", "gen-candidates"}, {"train_queries", train.size()}, {"test_queries", test_lists.size()}});
}

void cmd_build_prompts(const Common& o) {
  const auto c = load(o);
  const fs::path ws = o.out_dir;
  check_workspace(ws, c);
  const auto store = workspace_store(ws, c);
  const auto train = read_split(ws, "train", c);
  PromptConfig pc = prompt_config(c);
  pc.shuffle_gold = true;
  const auto train_lists = read_candidates_jsonl(ws / "candidates" / "train.jsonl");
  export_prompts_jsonl(ws / "prompts" / "train.jsonl", store, train, train_lists, pc);
  pc.shuffle_gold = false;
  const auto test_lists = read_candidates_jsonl(ws / "candidates" / "test.jsonl");
  export_prompts_jsonl(ws / "prompts" / "test.jsonl", store, train, test_lists, pc);
  emit({{"stage", "build-prompts"}, {"train", train_lists.size()}, {"test", test_lists.size()}});
}

void cmd_train_adapter(const Common& o) {
  const auto c = load(o);
  const fs::path ws = o.out_dir;
  check_workspace(ws, c);
  const auto store = workspace_store(ws, c);
  const auto lists = read_candidates_jsonl(ws / "candidates" / "train.jsonl");
  const auto examples = build_examples(lists, example_config(c));
  require(!examples.examples.empty(), ErrorKind::kConfig,
          "train-adapter: no training example kept its gold within the candidate list");
  SelectorModel model = build_selector(store, c.effective_selector());
  const auto report = train_selector(model, examples.examples, train_config(c));
  save_selector(ws / "selector", model);
  write_loss_curve_csv(ws / "loss_curve.csv", report);
  emit({{"stage", "train-adapter"},
        {"examples", examples.examples.size()},
        {"dropped", examples.dropped},
        {"initial_loss", report.initial_loss},
        {"final_loss", report.epoch_loss.empty() ? report.initial_loss : report.epoch_loss.back()}});
}

void cmd_rerank(const Common& o) {
  const auto c = load(o);
  const fs::path ws = o.out_dir;
  check_workspace(ws, c);
  const auto store = workspace_store(ws, c);
  const auto model = load_selector(ws / "selector", store);
  const auto lists = read_candidates_jsonl(ws / "candidates" / "test.jsonl");
  const auto ev = evaluate(c, model, lists);
  write_rerank_jsonl(ws / "rerank.jsonl", ev.reranks);
  write_routing_jsonl(ws / "routing.jsonl", ev.routing);
  emit({{"stage", "rerank"}, {"queries", ev.reranks.size()}, {"n_t", c.effective_n_t()}});
}

/// Metrics from the stored picks: no model needed, and the per-round curve
/// comes from the same trace the rerank stage recorded.
void cmd_eval(const Common& o) {
  const auto c = load(o);
  const fs::path ws = o.out_dir;
  check_workspace(ws, c);
  const auto lists = read_candidates_jsonl(ws / "candidates" / "test.jsonl");
  auto in = detail::open_input(ws / "rerank.jsonl");
  const std::string digest = config_digest(c);
  const std::size_t n_t = c.effective_n_t();
  std::vector<std::vector<RankRecord>> by_t(n_t);
  std::vector<RankRecord> kge;
  std::string line;
  std::size_t i = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    require(i < lists.size(), ErrorKind::kParse, "eval: rerank.jsonl has more records than test candidates");
    const json r = json::parse(line);
    const CandidateList& l = lists[i];
    require(r.at("query").at("h").get<EntityId>() == l.query.head &&
                r.at("query").at("r").get<RelationId>() == l.query.relation,
            ErrorKind::kParse, "eval: rerank.jsonl line " + std::to_string(i + 1) + " does not match candidates");
    const auto picks = r.at("picks").get<std::vector<EntityId>>();
    require(picks.size() == n_t, ErrorKind::kConfig, "eval: rerank.jsonl was produced with a different N_t");
    const std::size_t m = std::min(c.candidates.eval_m, l.entities.size());
    const auto ranks = curve_ranks(std::span(l.entities.data(), m), picks, *l.gold, l.gold_rank);
    for (std::size_t t = 0; t < n_t; ++t) by_t[t].push_back({ranks[t], l.query.language});
    kge.push_back({l.gold_rank, l.query.language});
    ++i;
  }
  require(i == lists.size(), ErrorKind::kParse, "eval: rerank.jsonl is shorter than the test candidates");
  std::vector<MetricsReport> curve;
  for (auto& r : by_t) {
    curve.push_back(compute_metrics(r));
    curve.back().config_digest = digest;
  }
  MetricsReport kge_report = compute_metrics(kge);
  kge_report.config_digest = digest;
  write_json(ws / "metrics.json", to_json(curve.back()));
  write_json(ws / "kge_metrics.json", to_json(kge_report));
  write_ier_curve_csv(ws / "ier_curve.csv", curve);
  emit({{"stage", "eval"}, {"metrics", to_json(curve.back())}, {"kge", to_json(kge_report)}});
}

void cmd_route_analyze(const Common& o) {
  const fs::path ws = o.out_dir;
  const auto log = read_routing_jsonl(ws / "routing.jsonl");
  const auto a = export_routing_analysis(log);
  write_frequency_csv(ws / "routing_language.csv", a.by_language);
  write_frequency_csv(ws / "routing_relation.csv", a.by_relation);
  const json s = summary_json(a);
  write_json(ws / "routing_summary.json", s);
  emit({{"stage", "route-analyze"}, {"summary", s}});
}

void cmd_ablate(const Common& o) {
  const auto c = load(o);
  const auto report = run_ablation(c, fs::path(o.out_dir));
  emit({{"stage", "ablate"}, {"report", to_json(report)}});
}

void cmd_flops(const Common& o, double tokens) {
  const auto c = load(o);
  const auto s = c.effective_selector();
  const auto f = report_flops(flop_model(s, c.candidates.eval_m), tokens);
  auto host_only = flop_model(s, c.candidates.eval_m);
  host_only.rank = 0;
  const json j{{"config_digest", config_digest(c)},
               {"flops", to_json(f)},
               {"host_only", to_json(report_flops(host_only, tokens))},
               {"params", {{"trainable", count_params(s.adapter, s.n_blocks).trainable},
                           {"activated", count_params(s.adapter, s.n_blocks).activated}}}};
  write_json(fs::path(o.out_dir) / "flops.json", j);
  emit(j);
}

void cmd_run(const Common& o) {
  const auto c = load(o);
  const auto r = run_experiment(c, fs::path(o.out_dir));
  emit({{"stage", "run"}, {"metrics", to_json(r.eval.metrics)}, {"kge", to_json(r.eval.kge)}});
}

int report_error(ErrorKind kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", std::string(to_string(kind))}, {"message", message}}}}.dump() << '\n';
  return kind == ErrorKind::kUsage ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multilingual KG completion pipeline"};
  app.require_subcommand(1);
  Common o;
  double tokens = 3.0;

  struct Stage {
    const char* name;
    const char* help;
    std::function<void()> run;
  };
  const std::vector<Stage> stages{
      {"synth", "generate a synthetic multilingual KG", [&] { cmd_synth(o); }},
      {"ingest", "load triples TSV + labels JSONL", [&] { cmd_ingest(o); }},
      {"split", "train/valid/test/prompt split", [&] { cmd_split(o); }},
      {"train-kge", "train TransE on the train split", [&] { cmd_train_kge(o); }},
      {"gen-candidates", "top-m candidate lists", [&] { cmd_gen_candidates(o); }},
      {"build-prompts", "render textual prompts", [&] { cmd_build_prompts(o); }},
      {"train-adapter", "train the selector and its adapter", [&] { cmd_train_adapter(o); }},
      {"rerank", "iterative reranking of the test lists", [&] { cmd_rerank(o); }},
      {"eval", "metrics from the rerank output", [&] { cmd_eval(o); }},
      {"ablate", "full / w/o kg / w/o kg+ier over seeds", [&] { cmd_ablate(o); }},
      {"route-analyze", "expert frequency tables from routing.jsonl", [&] { cmd_route_analyze(o); }},
      {"flops", "analytic forward cost", [&] { cmd_flops(o, tokens); }},
      {"run", "whole pipeline in one process", [&] { cmd_run(o); }},
  };
  std::function<void()> chosen;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", o.config, "JSON or TOML config file (.toml parsed as TOML)");
    sub->add_option("--seed", o.seed, "master seed; overrides the config");
    sub->add_option("--out-dir", o.out_dir, "workspace directory")->capture_default_str();
    if (std::string(s.name) == "flops") sub->add_option("--tokens", tokens, "tokens per forward pass")->capture_default_str();
    sub->callback([&chosen, run = s.run] { chosen = run; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(ErrorKind::kUsage, e.what());
  }
  try {
    chosen();
  } catch (const Error& e) {
    return report_error(e.kind(), e.what());
  } catch (const json::exception& e) {
    return report_error(ErrorKind::kParse, e.what());
  } catch (const std::exception& e) {
    return report_error(ErrorKind::kIo, e.what());
  }
  return 0;
}
