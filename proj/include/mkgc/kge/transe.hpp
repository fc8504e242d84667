#pragma once

// TransE: score(h, r, t) = -||e_h + e_r - e_t||_2, trained with a margin
// ranking loss against uniformly corrupted heads or tails.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/kg/index.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/kg/store.hpp"
#include "mkgc/log.hpp"
#include "mkgc/numerics/matrix.hpp"
#include "mkgc/numerics/tensor_io.hpp"
#include "mkgc/random.hpp"

namespace mkgc {

struct TransEConfig {
  std::size_t dim = 64;
  double margin = 1.0;
  double lr = 0.01;
  std::size_t epochs = 100;
  std::size_t negatives_per_positive = 1;
  std::uint64_t seed = 0;

  /// dim 300 reproduces the embedding-table size implied by the reported
  /// 106.1M KGE parameters over 351,299 entities and 2,264 relations.
  static TransEConfig large_scale() {
    TransEConfig c;
    c.dim = 300;
    return c;
  }

  void validate() const {
    require(dim > 0, ErrorKind::kConfig, "transe: dim must be positive");
    require(margin > 0.0 && std::isfinite(margin), ErrorKind::kConfig, "transe: margin must be positive");
    require(lr >= 0.0 && std::isfinite(lr), ErrorKind::kConfig, "transe: lr must be non-negative");
    require(negatives_per_positive >= 1, ErrorKind::kConfig, "transe: negatives_per_positive must be >= 1");
  }
};

inline json to_json(const TransEConfig& c) {
  return {{"dim", c.dim},       {"margin", c.margin}, {"lr", c.lr},
          {"epochs", c.epochs}, {"negatives_per_positive", c.negatives_per_positive},
          {"seed", c.seed}};
}

inline TransEConfig transe_config_from_json(const json& j) {
  TransEConfig c;
  c.dim = j.value("dim", c.dim);
  c.margin = j.value("margin", c.margin);
  c.lr = j.value("lr", c.lr);
  c.epochs = j.value("epochs", c.epochs);
  c.negatives_per_positive = j.value("negatives_per_positive", c.negatives_per_positive);
  c.seed = j.value("seed", c.seed);
  return c;
}

class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  /// Ids must be strictly increasing; row i belongs to the i-th id.
  EmbeddingTable(std::vector<EntityId> entity_ids, std::vector<RelationId> relation_ids, Matrix entities,
                 Matrix relations)
      : entity_ids_(std::move(entity_ids)),
        relation_ids_(std::move(relation_ids)),
        entities_(std::move(entities)),
        relations_(std::move(relations)) {
    require(entities_.rows() == entity_ids_.size() && relations_.rows() == relation_ids_.size(),
            ErrorKind::kInvalidArgument, "embedding table: id count does not match rows");
    require(entities_.cols() == relations_.cols(), ErrorKind::kInvalidArgument,
            "embedding table: entity and relation dims differ");
    require(std::is_sorted(entity_ids_.begin(), entity_ids_.end()) &&
                std::adjacent_find(entity_ids_.begin(), entity_ids_.end()) == entity_ids_.end(),
            ErrorKind::kInvalidArgument, "embedding table: entity ids must be strictly increasing");
    for (std::size_t i = 0; i < entity_ids_.size(); ++i) entity_row_[entity_ids_[i]] = i;
    for (std::size_t i = 0; i < relation_ids_.size(); ++i) relation_row_[relation_ids_[i]] = i;
  }

  std::size_t dim() const noexcept { return entities_.cols(); }
  std::size_t n_entities() const noexcept { return entity_ids_.size(); }
  std::size_t n_relations() const noexcept { return relation_ids_.size(); }
  const std::vector<EntityId>& entity_ids() const noexcept { return entity_ids_; }
  const std::vector<RelationId>& relation_ids() const noexcept { return relation_ids_; }

  std::size_t entity_row(EntityId id) const {
    auto it = entity_row_.find(id);
    if (it == entity_row_.end()) fail(ErrorKind::kNotFound, "unknown entity id " + std::to_string(id));
    return it->second;
  }
  std::size_t relation_row(RelationId id) const {
    auto it = relation_row_.find(id);
    if (it == relation_row_.end()) fail(ErrorKind::kNotFound, "unknown relation id " + std::to_string(id));
    return it->second;
  }

  Matrix& entities() noexcept { return entities_; }
  Matrix& relations() noexcept { return relations_; }
  const Matrix& entities() const noexcept { return entities_; }
  const Matrix& relations() const noexcept { return relations_; }

  /// Score by row index, no id lookup.
  double score_rows(std::size_t h, std::size_t r, std::size_t t) const {
    const auto eh = entities_.row(h);
    const auto er = relations_.row(r);
    const auto et = entities_.row(t);
    double acc = 0.0;
    for (std::size_t k = 0; k < eh.size(); ++k) {
      const double d = eh[k] + er[k] - et[k];
      acc += d * d;
    }
    return -std::sqrt(acc);
  }

  bool operator==(const EmbeddingTable& o) const {
    return entity_ids_ == o.entity_ids_ && relation_ids_ == o.relation_ids_ && entities_ == o.entities_ &&
           relations_ == o.relations_;
  }

 private:
  std::vector<EntityId> entity_ids_;
  std::vector<RelationId> relation_ids_;
  Matrix entities_;
  Matrix relations_;
  std::unordered_map<EntityId, std::size_t> entity_row_;
  std::unordered_map<RelationId, std::size_t> relation_row_;
};

inline double score(EntityId h, RelationId r, EntityId t, const EmbeddingTable& table) {
  return table.score_rows(table.entity_row(h), table.relation_row(r), table.entity_row(t));
}

namespace detail {

inline void normalize_row(std::span<double> row) {
  const double n = l2_norm(row);
  if (n > 0.0) {
    for (double& x : row) x /= n;
  }
}

}  // namespace detail

/// Uniform(-6/sqrt(dim), 6/sqrt(dim)) init, every row scaled to unit norm.
inline EmbeddingTable init_table(const KGStore& store, const TransEConfig& config) {
  config.validate();
  require(store.entity_count() >= 2, ErrorKind::kConfig, "transe: need at least 2 entities");
  require(store.relation_count() >= 1, ErrorKind::kConfig, "transe: need at least 1 relation");
  Rng rng(fork_seed(config.seed, "transe-init"));
  const double bound = 6.0 / std::sqrt(static_cast<double>(config.dim));
  Matrix ent(store.entity_count(), config.dim);
  Matrix rel(store.relation_count(), config.dim);
  for (double& x : rel.values()) x = rng.uniform(-bound, bound);
  for (double& x : ent.values()) x = rng.uniform(-bound, bound);
  for (std::size_t i = 0; i < rel.rows(); ++i) detail::normalize_row(rel.row(i));
  for (std::size_t i = 0; i < ent.rows(); ++i) detail::normalize_row(ent.row(i));
  std::vector<EntityId> eids;
  for (const Entity& e : store.entities()) eids.push_back(e.id);
  std::vector<RelationId> rids;
  for (const Relation& r : store.relations()) rids.push_back(r.id);
  return EmbeddingTable(std::move(eids), std::move(rids), std::move(ent), std::move(rel));
}

/// Margin ranking loss max(0, margin + ||d_pos|| - ||d_neg||) for one pair,
/// with facts given as (head row, relation row, tail row).
struct RowFact {
  std::size_t h, r, t;
};

inline double margin_loss(const EmbeddingTable& table, RowFact pos, RowFact neg, double margin) {
  return std::max(0.0, margin - table.score_rows(pos.h, pos.r, pos.t) + table.score_rows(neg.h, neg.r, neg.t));
}

struct TableGradient {
  Matrix entities;
  Matrix relations;
};

/// Analytic gradient of margin_loss. Zero when the hinge is inactive.
inline TableGradient margin_loss_gradient(const EmbeddingTable& table, RowFact pos, RowFact neg, double margin) {
  TableGradient g{Matrix(table.n_entities(), table.dim()), Matrix(table.n_relations(), table.dim())};
  if (margin_loss(table, pos, neg, margin) <= 0.0) return g;
  auto add_pair = [&](RowFact f, double sign) {
    const auto eh = table.entities().row(f.h);
    const auto er = table.relations().row(f.r);
    const auto et = table.entities().row(f.t);
    std::vector<double> d(table.dim());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = eh[k] + er[k] - et[k];
    const double n = l2_norm(d);
    if (n == 0.0) return;
    for (std::size_t k = 0; k < d.size(); ++k) {
      const double u = sign * d[k] / n;
      g.entities(f.h, k) += u;
      g.relations(f.r, k) += u;
      g.entities(f.t, k) -= u;
    }
  };
  add_pair(pos, 1.0);
  add_pair(neg, -1.0);
  return g;
}

struct TransEReport {
  /// Mean hinge loss per (positive, negative) pair, one entry per epoch.
  std::vector<double> epoch_loss;
  std::size_t train_facts = 0;
};

/// Per-sample SGD over the distinct facts of `train` (language is ignored).
/// Entity rows touched in an epoch are renormalized to unit length at its end.
inline EmbeddingTable train_transe(const KGStore& store, std::span<const Triple> train, const TransEConfig& config,
                                   TransEReport* report = nullptr) {
  config.validate();
  require(!train.empty(), ErrorKind::kConfig, "transe: empty training split");
  EmbeddingTable table = init_table(store, config);

  std::set<Fact> distinct;
  for (const Triple& t : train) distinct.insert(t.fact());
  std::vector<RowFact> facts;
  for (const Fact& f : distinct) {
    facts.push_back({table.entity_row(f.head), table.relation_row(f.relation), table.entity_row(f.tail)});
  }

  const std::size_t n = table.n_entities();
  const std::size_t dim = table.dim();
  Rng rng(fork_seed(config.seed, "transe-train"));
  std::vector<std::size_t> order(facts.size());
  std::vector<double> gp(dim);
  std::vector<double> gn(dim);
  std::vector<char> dirty(n, 0);
  TransEReport local;
  local.train_facts = facts.size();

  auto unit_residual = [&](RowFact f, std::vector<double>& out) {
    const auto eh = table.entities().row(f.h);
    const auto er = table.relations().row(f.r);
    const auto et = table.entities().row(f.t);
    for (std::size_t k = 0; k < dim; ++k) out[k] = eh[k] + er[k] - et[k];
    const double norm = l2_norm(out);
    if (norm > 0.0) {
      for (double& x : out) x /= norm;
    }
  };
  auto step = [&](RowFact f, const std::vector<double>& g, double s) {
    auto eh = table.entities().row(f.h);
    auto er = table.relations().row(f.r);
    for (std::size_t k = 0; k < dim; ++k) {
      eh[k] -= s * g[k];
      er[k] -= s * g[k];
    }
    auto et = table.entities().row(f.t);
    for (std::size_t k = 0; k < dim; ++k) et[k] += s * g[k];
    dirty[f.h] = dirty[f.t] = 1;
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t idx : order) {
      const RowFact pos = facts[idx];
      for (std::size_t k = 0; k < config.negatives_per_positive; ++k) {
        RowFact neg = pos;
        const bool corrupt_head = rng.bernoulli(0.5);
        const std::size_t keep = corrupt_head ? pos.h : pos.t;
        std::size_t repl = rng.below(n - 1);
        if (repl >= keep) ++repl;
        (corrupt_head ? neg.h : neg.t) = repl;

        const double loss = margin_loss(table, pos, neg, config.margin);
        total += loss;
        ++pairs;
        if (loss <= 0.0 || config.lr == 0.0) continue;
        unit_residual(pos, gp);
        unit_residual(neg, gn);
        step(pos, gp, config.lr);
        step(neg, gn, -config.lr);
      }
    }
    for (std::size_t e = 0; e < n; ++e) {
      if (dirty[e]) detail::normalize_row(table.entities().row(e));
      dirty[e] = 0;
    }
    detail::ensure_finite(table.entities().values(), "transe training");
    detail::ensure_finite(table.relations().values(), "transe training");
    local.epoch_loss.push_back(pairs == 0 ? 0.0 : total / static_cast<double>(pairs));
  }
  if (report != nullptr) *report = std::move(local);
  return table;
}

enum class RankMode { kRaw, kFiltered };

inline std::string to_string(RankMode m) { return m == RankMode::kRaw ? "raw" : "filtered"; }

inline RankMode parse_rank_mode(const std::string& s) {
  if (s == "raw") return RankMode::kRaw;
  if (s == "filtered") return RankMode::kFiltered;
  fail(ErrorKind::kConfig, "unknown rank mode '" + s + "' (expected raw|filtered)");
}

struct Query {
  EntityId head = 0;
  RelationId relation = 0;
  Language language;
};

struct CandidateList {
  Query query;
  std::optional<EntityId> gold;
  std::vector<EntityId> entities;
  std::vector<double> scores;
  /// Rank of the gold among all entities under the retrieval protocol (0 if no gold).
  std::size_t gold_rank = 0;
};

namespace detail {

/// Rows excluded under filtered ranking: known tails of (h, r) other than `keep`.
inline std::vector<char> filtered_rows(const EmbeddingTable& table, const Query& q, RankMode mode,
                                       const TripleIndex* filter, std::optional<EntityId> keep) {
  std::vector<char> excluded(table.n_entities(), 0);
  if (mode == RankMode::kRaw) return excluded;
  require(filter != nullptr, ErrorKind::kInvalidArgument, "filtered ranking needs a filter index");
  for (EntityId t : filter->known_tails(q.head, q.relation)) {
    if (keep && *keep == t) continue;
    excluded[table.entity_row(t)] = 1;
  }
  return excluded;
}

}  // namespace detail

/// Top-m tails for (h, r, ?), best first, ties to the lower id. In filtered
/// mode known tails from `filter` are skipped, except `keep` (the gold).
inline CandidateList retrieve(const EmbeddingTable& table, const Query& q, std::size_t m, RankMode mode,
                              const TripleIndex* filter = nullptr, std::optional<EntityId> keep = std::nullopt) {
  require(m >= 1, ErrorKind::kInvalidArgument, "retrieve: m must be >= 1");
  const std::size_t h = table.entity_row(q.head);
  const std::size_t r = table.relation_row(q.relation);
  if (keep) (void)table.entity_row(*keep);
  const auto excluded = detail::filtered_rows(table, q, mode, filter, keep);

  std::vector<std::size_t> rows;
  std::vector<double> scores(table.n_entities());
  for (std::size_t e = 0; e < table.n_entities(); ++e) {
    if (excluded[e]) continue;
    scores[e] = table.score_rows(h, r, e);
    rows.push_back(e);
  }
  if (m > rows.size()) {
    warn("retrieve: m=" + std::to_string(m) + " exceeds " + std::to_string(rows.size()) +
         " rankable entities; clamped");
    m = rows.size();
  }
  auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
  std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(m), rows.end(), better);

  CandidateList out;
  out.query = q;
  out.gold = keep;
  for (std::size_t i = 0; i < m; ++i) {
    out.entities.push_back(table.entity_ids()[rows[i]]);
    out.scores.push_back(scores[rows[i]]);
  }
  return out;
}

/// 1-based rank of `gold` among all entities: one plus the number of
/// non-excluded entities scoring strictly higher, or equal with a lower id.
inline std::size_t rank_of(const EmbeddingTable& table, const Query& q, EntityId gold, RankMode mode,
                           const TripleIndex* filter = nullptr) {
  const std::size_t h = table.entity_row(q.head);
  const std::size_t r = table.relation_row(q.relation);
  const std::size_t g = table.entity_row(gold);
  const auto excluded = detail::filtered_rows(table, q, mode, filter, gold);
  const double sg = table.score_rows(h, r, g);
  std::size_t rank = 1;
  for (std::size_t e = 0; e < table.n_entities(); ++e) {
    if (e == g || excluded[e]) continue;
    const double s = table.score_rows(h, r, e);
    if (s > sg || (s == sg && e < g)) ++rank;
  }
  return rank;
}

/// Candidate lists for every query triple, gold kept in filtered mode.
inline std::vector<CandidateList> generate_candidates(const EmbeddingTable& table, std::span<const Triple> queries,
                                                      std::size_t m, RankMode mode, const TripleIndex* filter) {
  std::vector<CandidateList> out;
  out.reserve(queries.size());
  for (const Triple& t : queries) {
    const Query q{t.head, t.relation, t.language};
    CandidateList c = retrieve(table, q, m, mode, filter, t.tail);
    c.gold_rank = rank_of(table, q, t.tail, mode, filter);
    out.push_back(std::move(c));
  }
  return out;
}

inline json to_json(const CandidateList& c) {
  json j{{"h", c.query.head},     {"r", c.query.relation},  {"lang", c.query.language},
         {"candidates", c.entities}, {"scores", c.scores}, {"gold_rank", c.gold_rank}};
  j["gold"] = c.gold ? json(*c.gold) : json(nullptr);
  return j;
}

inline CandidateList candidate_list_from_json(const json& j) {
  CandidateList c;
  c.query = Query{j.at("h").get<EntityId>(), j.at("r").get<RelationId>(), j.at("lang").get<Language>()};
  if (j.contains("gold") && !j["gold"].is_null()) c.gold = j["gold"].get<EntityId>();
  c.entities = j.at("candidates").get<std::vector<EntityId>>();
  c.scores = j.at("scores").get<std::vector<double>>();
  require(c.entities.size() == c.scores.size(), ErrorKind::kParse, "candidates and scores differ in length");
  c.gold_rank = j.value("gold_rank", std::size_t{0});
  return c;
}

inline void write_candidates_jsonl(const std::filesystem::path& path, const std::vector<CandidateList>& lists) {
  auto out = detail::open_output(path);
  for (const auto& c : lists) out << to_json(c).dump() << '\n';
}

inline std::vector<CandidateList> read_candidates_jsonl(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  std::vector<CandidateList> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(candidate_list_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw parse_error(path.string(), n, e.what());
    } catch (const Error& e) {
      throw parse_error(path.string(), n, e.what());
    }
  }
  return out;
}

// Checkpoint: "MKGCEMB1", u64 dim, u64 n_entities, u64 n_relations, the
// entity then relation ids as u64, then both tables row-major float64.
// A JSON sidecar (<path>.json) records the training config.

inline void save_checkpoint(const std::filesystem::path& path, const EmbeddingTable& table,
                            const TransEConfig& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
    out.write("MKGCEMB1", 8);
    detail::put_u64(out, table.dim());
    detail::put_u64(out, table.n_entities());
    detail::put_u64(out, table.n_relations());
    for (EntityId id : table.entity_ids()) detail::put_u64(out, id);
    for (RelationId id : table.relation_ids()) detail::put_u64(out, id);
    detail::put_doubles(out, table.entities().values());
    detail::put_doubles(out, table.relations().values());
    require(static_cast<bool>(out), ErrorKind::kIo, "write failed: " + path.string());
  }
  auto side = detail::open_output(path.string() + ".json");
  side << json{{"model", "transe"}, {"config", to_json(config)}}.dump(2) << '\n';
}

inline EmbeddingTable load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  const std::string what = path.string();
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "MKGCEMB1", 8) != 0) {
    fail(ErrorKind::kParse, what + ": not an embedding checkpoint");
  }
  const auto dim = detail::get_u64(in, what);
  const auto ne = detail::get_u64(in, what);
  const auto nr = detail::get_u64(in, what);
  require(ne < (1ULL << 32) && nr < (1ULL << 32), ErrorKind::kParse, what + ": implausible counts");
  std::vector<EntityId> eids(ne);
  for (auto& id : eids) id = static_cast<EntityId>(detail::get_u64(in, what));
  std::vector<RelationId> rids(nr);
  for (auto& id : rids) id = static_cast<RelationId>(detail::get_u64(in, what));
  Matrix ent = detail::get_matrix(in, ne, dim, what);
  Matrix rel = detail::get_matrix(in, nr, dim, what);
  return EmbeddingTable(std::move(eids), std::move(rids), std::move(ent), std::move(rel));
}

inline TransEConfig load_checkpoint_config(const std::filesystem::path& path) {
  auto in = detail::open_input(path.string() + ".json");
  try {
    return transe_config_from_json(json::parse(in).at("config"));
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, path.string() + ".json: " + e.what());
  }
}

}  // namespace mkgc
