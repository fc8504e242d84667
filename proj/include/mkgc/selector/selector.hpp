#pragma once

// Small trainable host that picks one entity out of a candidate list.
//
// Text: every whitespace token maps to a fixed Gaussian vector derived from
// its hash, and a row is the mean of its tokens (entity: label + truncated
// description, relation: label). Tables are frozen.
//
// Block b, streams m in {h, r, t} (t is the mean of the candidate rows):
//   u_m  = Q_b (x_m + mean(x)) / 2          Q_b frozen orthogonal
//   y_m  = KL-GMoE_b(u)_m                   W0 frozen inside the adapter
//   x_m += tanh(y_m)
// Readout: scores = D H^T (x_h + x_r) / 2, D the m x hidden candidate rows.
// Loss is cross-entropy on the gold index.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/ier/rerank.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/kg/store.hpp"
#include "mkgc/kge/transe.hpp"
#include "mkgc/moe/klgmoe.hpp"
#include "mkgc/numerics/matrix.hpp"
#include "mkgc/numerics/optim.hpp"
#include "mkgc/numerics/tape.hpp"
#include "mkgc/numerics/tensor_io.hpp"
#include "mkgc/random.hpp"
#include "mkgc/text.hpp"

namespace mkgc {

struct SelectorConfig {
  std::size_t hidden = 64;
  std::size_t n_blocks = 2;
  /// din/dout are overwritten with `hidden`.
  KLGMoEConfig adapter;
  /// Description budget in code points.
  std::size_t desc_limit = 256;
  bool train_head = true;
  /// Per-language mean-centering of the text tables.
  bool center_tables = true;
  std::uint64_t seed = 0;

  void validate() const {
    require(hidden >= 1, ErrorKind::kConfig, "selector: hidden must be >= 1");
    require(n_blocks >= 1, ErrorKind::kConfig, "selector: n_blocks must be >= 1");
    adapter.validate();
  }
};

inline json to_json(const SelectorConfig& c) {
  return {{"hidden", c.hidden},         {"n_blocks", c.n_blocks},       {"adapter", to_json(c.adapter)},
          {"desc_limit", c.desc_limit}, {"train_head", c.train_head}, {"center_tables", c.center_tables}, {"seed", c.seed}};
}

inline SelectorConfig selector_config_from_json(const json& j) {
  SelectorConfig c;
  try {
    c.hidden = j.value("hidden", c.hidden);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    if (j.contains("adapter")) c.adapter = klgmoe_config_from_json(j.at("adapter"));
    c.desc_limit = j.value("desc_limit", c.desc_limit);
    c.train_head = j.value("train_head", c.train_head);
    c.center_tables = j.value("center_tables", c.center_tables);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("selector config: ") + e.what());
  }
  return c;
}

struct TextTables {
  Matrix entities;   // rows follow KGStore::entities()
  Matrix relations;  // rows follow KGStore::relations()
};

struct SelectorBlock {
  Matrix Q;  // frozen mixing map
  KLGMoELayer adapter;
};

struct SelectorModel {
  SelectorConfig config;
  std::vector<EntityId> entity_ids;
  std::vector<RelationId> relation_ids;
  std::map<Language, TextTables> tables;
  std::vector<SelectorBlock> blocks;
  Matrix H;  // hidden x hidden readout, zero at init

  std::size_t entity_row(EntityId id) const {
    auto it = std::lower_bound(entity_ids.begin(), entity_ids.end(), id);
    if (it == entity_ids.end() || *it != id) fail(ErrorKind::kNotFound, "selector: unknown entity " + std::to_string(id));
    return static_cast<std::size_t>(it - entity_ids.begin());
  }

  std::size_t relation_row(RelationId id) const {
    auto it = std::lower_bound(relation_ids.begin(), relation_ids.end(), id);
    if (it == relation_ids.end() || *it != id) {
      fail(ErrorKind::kNotFound, "selector: unknown relation " + std::to_string(id));
    }
    return static_cast<std::size_t>(it - relation_ids.begin());
  }

  const TextTables& table(const Language& lang) const {
    auto it = tables.find(lang);
    if (it == tables.end()) fail(ErrorKind::kNotFound, "selector: no text table for language '" + lang + "'");
    return it->second;
  }

  /// Adapter tensors per block, then H when the head trains.
  std::vector<Matrix*> trainable() {
    std::vector<Matrix*> out;
    for (auto& b : blocks) {
      for (Matrix* m : b.adapter.trainable()) out.push_back(m);
    }
    if (config.train_head) out.push_back(&H);
    return out;
  }

  /// Digest of everything that must never train: text tables, Q_b, W0_b.
  std::uint64_t frozen_digest() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& [lang, t] : tables) {
      h = fnv1a(lang, h);
      h = digest(t.entities, h);
      h = digest(t.relations, h);
    }
    for (const auto& b : blocks) {
      h = digest(b.Q, h);
      h = digest(b.adapter.W0, h);
    }
    if (!config.train_head) h = digest(H, h);
    return h;
  }
};

namespace detail {

class TokenEmbedder {
 public:
  TokenEmbedder(std::uint64_t seed, std::size_t dim) : seed_(seed), dim_(dim) {}

  /// Mean of the token vectors; zero for text without tokens.
  Vector embed(std::string_view kind, std::string_view text) {
    std::vector<double> acc(dim_, 0.0);
    const auto tokens = split_whitespace(text);
    for (const auto& tok : tokens) {
      const std::vector<double>& v = lookup(std::string(kind) + '\x1f' + tok);
      for (std::size_t i = 0; i < dim_; ++i) acc[i] += v[i];
    }
    if (!tokens.empty()) {
      for (double& x : acc) x /= static_cast<double>(tokens.size());
    }
    return Vector(std::move(acc));
  }

 private:
  const std::vector<double>& lookup(const std::string& key) {
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    Rng rng(fork_seed(seed_, fnv1a(key)));
    std::vector<double> v(dim_);
    for (double& x : v) x = rng.normal();
    return cache_.emplace(key, std::move(v)).first->second;
  }

  std::uint64_t seed_;
  std::size_t dim_;
  std::unordered_map<std::string, std::vector<double>> cache_;
};

inline void set_row(Matrix& m, std::size_t r, const Vector& v) {
  auto row = m.row(r);
  std::copy(v.values().begin(), v.values().end(), row.begin());
}

/// Subtracts the mean row. Tokens every row of a language shares (the word
/// for "entity", "relation", ...) become a constant offset, which this removes.
inline void center_rows(Matrix& m) {
  if (m.rows() == 0) return;
  std::vector<double> mean(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) mean[c] += m(r, c);
  for (double& x : mean) x /= static_cast<double>(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) -= mean[c];
}

}  // namespace detail

/// Host and adapters come from separate seed streams, so changing the
/// adapter shape (ablations) leaves the frozen host identical.
inline SelectorModel build_selector(const KGStore& store, SelectorConfig config) {
  config.adapter.din = config.hidden;
  config.adapter.dout = config.hidden;
  config.validate();
  SelectorModel model;
  model.config = config;
  for (const auto& e : store.entities()) model.entity_ids.push_back(e.id);
  for (const auto& r : store.relations()) model.relation_ids.push_back(r.id);
  const std::size_t d = config.hidden;

  detail::TokenEmbedder embedder(fork_seed(config.seed, "selector-tokens"), d);
  for (const auto& lang : store.languages()) {
    TextTables t{Matrix(store.entity_count(), d), Matrix(store.relation_count(), d)};
    for (std::size_t i = 0; i < store.entities().size(); ++i) {
      const EntityId id = store.entities()[i].id;
      const std::string text =
          store.entity_label(id, lang) + " " + utf8_truncate(store.description(id, lang), config.desc_limit);
      detail::set_row(t.entities, i, embedder.embed("entity", text));
    }
    for (std::size_t i = 0; i < store.relations().size(); ++i) {
      detail::set_row(t.relations, i, embedder.embed("relation", store.relation_label(store.relations()[i].id, lang)));
    }
    if (config.center_tables) {
      detail::center_rows(t.entities);
      detail::center_rows(t.relations);
    }
    model.tables.emplace(lang, std::move(t));
  }

  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    Rng host(fork_seed(fork_seed(config.seed, "selector-host"), b));
    Rng adapter(fork_seed(fork_seed(config.seed, "selector-adapter"), b));
    SelectorBlock block;
    block.Q = Matrix::orthogonal(d, host);
    Matrix w0 = Matrix::gaussian(d, d, sd, host);
    block.adapter = KLGMoELayer::init(config.adapter, std::move(w0), adapter);
    model.blocks.push_back(std::move(block));
  }
  model.H = Matrix(d, d);
  return model;
}

// ---- forward ------------------------------------------------------------

struct SelectorForward {
  ad::Var scores;  // m x 1
  ad::Var H;
  std::vector<AdapterTape> adapters;
};

inline SelectorForward selector_forward(ad::Tape& tape, const SelectorModel& model, const Query& query,
                                        std::span<const EntityId> candidates) {
  require(!candidates.empty(), ErrorKind::kInvalidArgument, "select: empty candidate list");
  const TextTables& t = model.table(query.language);
  const std::size_t d = model.config.hidden;
  const std::size_t m = candidates.size();

  Matrix cand(m, d);
  Matrix mean_t(d, 1);
  for (std::size_t i = 0; i < m; ++i) {
    const auto src = t.entities.row(model.entity_row(candidates[i]));
    std::copy(src.begin(), src.end(), cand.row(i).begin());
    for (std::size_t k = 0; k < d; ++k) mean_t(k, 0) += src[k];
  }
  for (double& x : mean_t.values()) x /= static_cast<double>(m);

  const auto hrow = t.entities.row(model.entity_row(query.head));
  const auto rrow = t.relations.row(model.relation_row(query.relation));
  std::array<ad::Var, 3> x = {tape.constant(Matrix(d, 1, std::vector<double>(hrow.begin(), hrow.end()))),
                              tape.constant(Matrix(d, 1, std::vector<double>(rrow.begin(), rrow.end()))),
                              tape.constant(std::move(mean_t))};

  SelectorForward out;
  for (const auto& block : model.blocks) {
    const ad::Var q = tape.constant_ref(block.Q);
    const ad::Var xbar = ad::mean(std::span<const ad::Var>(x));
    std::array<ad::Var, 3> u;
    for (std::size_t s = 0; s < 3; ++s) u[s] = ad::matmul(q, ad::scale(ad::add(x[s], xbar), 0.5));
    AdapterTape a = forward_tape(tape, u, block.adapter, block.adapter.config.mode);
    for (std::size_t s = 0; s < 3; ++s) x[s] = ad::add(x[s], ad::tanh(a.y[s]));
    out.adapters.push_back(std::move(a));
  }
  out.H = model.config.train_head ? tape.parameter_ref(model.H) : tape.constant_ref(model.H);
  const ad::Var pooled = ad::scale(ad::add(x[0], x[1]), 0.5);
  const ad::Var v = ad::matmul(ad::transpose(out.H), pooled);
  out.scores = ad::matmul(tape.constant(std::move(cand)), v);
  return out;
}

struct Selection {
  EntityId entity = 0;
  std::size_t index = 0;
  Vector probabilities;
  std::vector<RoutingDecision> decisions;  // one per block
};

inline Selection select(const SelectorModel& model, const Query& query, std::span<const EntityId> candidates) {
  ad::Tape tape;
  const SelectorForward f = selector_forward(tape, model, query, candidates);
  Selection s;
  s.probabilities = softmax(f.scores.value().as_vector());
  s.index = argmax_det(f.scores.value().values());
  s.entity = candidates[s.index];
  for (const auto& a : f.adapters) s.decisions.push_back(a.decision);
  return s;
}

/// Scorer for iterative reranking backed by the selector.
inline Scorer selector_scorer(const SelectorModel& model) {
  return [&model](const Query& q, std::span<const EntityId> remaining) { return select(model, q, remaining).entity; };
}

// ---- examples -----------------------------------------------------------

struct TrainingExample {
  Query query;
  std::vector<EntityId> candidates;
  std::size_t gold_index = 0;
};

struct ExampleConfig {
  std::size_t m_min = 25;
  std::size_t m_max = 30;
  std::uint64_t seed = 0;
};

struct ExampleSet {
  std::vector<TrainingExample> examples;
  std::size_t dropped = 0;
};

/// Truncates each list to a random m in [m_min, m_max] and moves the gold to
/// a uniform position; the other candidates keep retrieval order. Lists whose
/// top-m lacks the gold are dropped and counted.
inline ExampleSet build_examples(std::span<const CandidateList> lists, const ExampleConfig& config) {
  require(!lists.empty(), ErrorKind::kConfig, "build_examples: no candidate lists");
  require(config.m_min >= 1 && config.m_min <= config.m_max, ErrorKind::kConfig,
          "build_examples: need 1 <= m_min <= m_max");
  ExampleSet out;
  for (std::size_t i = 0; i < lists.size(); ++i) {
    const CandidateList& l = lists[i];
    Rng rng(fork_seed(config.seed, i));
    auto m = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(config.m_min), static_cast<std::int64_t>(config.m_max)));
    require(l.entities.size() >= config.m_min, ErrorKind::kConfig,
            "build_examples: candidate list " + std::to_string(i) + " has " + std::to_string(l.entities.size()) +
                " entries, fewer than m_min=" + std::to_string(config.m_min));
    m = std::min(m, l.entities.size());
    std::vector<EntityId> top(l.entities.begin(), l.entities.begin() + static_cast<std::ptrdiff_t>(m));
    auto it = l.gold ? std::find(top.begin(), top.end(), *l.gold) : top.end();
    if (it == top.end()) {
      ++out.dropped;
      continue;
    }
    top.erase(it);
    const std::size_t pos = rng.below(m);
    top.insert(top.begin() + static_cast<std::ptrdiff_t>(pos), *l.gold);
    out.examples.push_back({l.query, std::move(top), pos});
  }
  return out;
}

// ---- training -----------------------------------------------------------

struct SelectorTrainConfig {
  double lr = 2e-5;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  void validate() const {
    require(lr >= 0.0 && std::isfinite(lr), ErrorKind::kConfig, "train_selector: lr must be finite and >= 0");
    require(batch_size >= 1, ErrorKind::kConfig, "train_selector: batch_size must be >= 1");
  }
};

struct SelectorTrainReport {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;  // mean training loss seen during each epoch
  std::size_t steps = 0;
};

inline double example_loss(const SelectorModel& model, const TrainingExample& ex) {
  ad::Tape tape;
  const auto f = selector_forward(tape, model, ex.query, ex.candidates);
  return -ad::log_softmax(f.scores).value()(ex.gold_index, 0);
}

inline double mean_loss(const SelectorModel& model, std::span<const TrainingExample> examples) {
  require(!examples.empty(), ErrorKind::kInvalidArgument, "mean_loss: no examples");
  double total = 0.0;
  for (const auto& ex : examples) total += example_loss(model, ex);
  return total / static_cast<double>(examples.size());
}

/// Adam on the adapter tensors (and H when train_head). Gradients are summed
/// over a mini-batch in a fixed order, then averaged.
inline SelectorTrainReport train_selector(SelectorModel& model, std::span<const TrainingExample> examples,
                                          const SelectorTrainConfig& config) {
  config.validate();
  require(!examples.empty(), ErrorKind::kInvalidArgument, "train_selector: no training examples");
  for (const auto& ex : examples) {
    require(ex.gold_index < ex.candidates.size(), ErrorKind::kInvalidArgument,
            "train_selector: gold index outside the candidate list");
  }
  SelectorTrainReport report;
  report.initial_loss = mean_loss(model, examples);

  std::vector<Matrix*> params = model.trainable();
  Adam adam(params, AdamConfig{.lr = config.lr});
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(fork_seed(fork_seed(config.seed, "selector-train"), epoch));
    rng.shuffle(order);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<LayerGradients> acc;
      for (const auto& b : model.blocks) acc.push_back(LayerGradients::zeros_like(b.adapter));
      Matrix acc_h(model.H.rows(), model.H.cols());
      for (std::size_t k = start; k < end; ++k) {
        const TrainingExample& ex = examples[order[k]];
        ad::Tape tape;
        const auto f = selector_forward(tape, model, ex.query, ex.candidates);
        const ad::Var loss = ad::scale(ad::pick(ad::log_softmax(f.scores), ex.gold_index), -1.0);
        if (!std::isfinite(loss.scalar())) {
          fail(ErrorKind::kNumeric, "train_selector: non-finite loss at step " + std::to_string(report.steps) +
                                        " (sample " + std::to_string(order[k]) + ")");
        }
        epoch_total += loss.scalar();
        tape.backward(loss);
        for (std::size_t b = 0; b < model.blocks.size(); ++b) accumulate_gradients(tape, f.adapters[b], acc[b]);
        if (model.config.train_head) acc_h = add(acc_h, tape.grad(f.H));
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      std::vector<Matrix> grads;
      for (auto& g : acc) {
        for (Matrix* m : g.trainable()) grads.push_back(scale(*m, inv));
      }
      if (model.config.train_head) grads.push_back(scale(acc_h, inv));
      adam.step(grads);
      ++report.steps;
    }
    report.epoch_loss.push_back(epoch_total / static_cast<double>(examples.size()));
  }
  for (const Matrix* p : params) detail::ensure_finite(p->values(), "train_selector");
  return report;
}

/// `epoch,loss`; epoch 0 is the loss before any update.
inline void write_loss_curve_csv(const std::filesystem::path& path, const SelectorTrainReport& report) {
  auto out = detail::open_output(path);
  out.precision(17);
  out << "epoch,loss\n0," << report.initial_loss << '\n';
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) out << e + 1 << ',' << report.epoch_loss[e] << '\n';
}

// ---- checkpoint ---------------------------------------------------------

/// <dir>/selector.json + <dir>/selector.bin. Text tables are not stored; they
/// are rebuilt from the store on load and checked against the saved digest.
inline void save_selector(const std::filesystem::path& dir, const SelectorModel& model) {
  TensorBundle bundle;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    bundle.emplace_back(prefix + "Q", model.blocks[b].Q);
    append_layer_tensors(bundle, prefix, model.blocks[b].adapter);
  }
  bundle.emplace_back("H", model.H);
  std::filesystem::create_directories(dir);
  write_tensors(dir / "selector.bin", bundle);
  json manifest{{"model", "selector"},
                {"config", to_json(model.config)},
                {"n_entities", model.entity_ids.size()},
                {"n_relations", model.relation_ids.size()},
                {"frozen_digest", hex64(model.frozen_digest())}};
  auto out = detail::open_output(dir / "selector.json");
  out << manifest.dump(2) << '\n';
}

inline SelectorModel load_selector(const std::filesystem::path& dir, const KGStore& store) {
  auto in = detail::open_input(dir / "selector.json");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, (dir / "selector.json").string() + ": " + e.what());
  }
  SelectorModel model = build_selector(store, selector_config_from_json(manifest.at("config")));
  const TensorBundle bundle = read_tensors(dir / "selector.bin");
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    model.blocks[b].Q = find_tensor(bundle, prefix + "Q");
    model.blocks[b].adapter = layer_from_tensors(bundle, prefix, model.config.adapter);
  }
  model.H = find_tensor(bundle, "H");
  require(hex64(model.frozen_digest()) == manifest.value("frozen_digest", std::string()), ErrorKind::kConfig,
          "selector checkpoint " + dir.string() + " does not match this knowledge graph");
  return model;
}

}  // namespace mkgc
