#pragma once

// Iterative entity reranking. Round t (1-based) asks the scorer for one
// entity from the still-unpicked set M, removes it from M and moves it to
// position t of the running list L. Positions after N_t keep the initial
// relative order of the unpicked entities.

#include <algorithm>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/kge/transe.hpp"

namespace mkgc {

/// Picks one entity from `remaining`, which is given in initial-list order.
using Scorer = std::function<EntityId(const Query&, std::span<const EntityId> remaining)>;

struct RankedList {
  std::vector<EntityId> entities;
  std::size_t round = 1;
};

struct RerankRound {
  std::size_t t = 0;
  std::vector<EntityId> remaining;  // M^(t)
  std::vector<EntityId> before;     // L^(t)
  EntityId pick = 0;                // e^(t)
};

struct RerankTrace {
  std::vector<RerankRound> rounds;
  RankedList final_list;  // L^(N_t+1)
  std::vector<EntityId> picks;
};

inline RerankTrace rerank_trace(const Query& query, std::span<const EntityId> initial, const Scorer& scorer,
                                std::size_t n_t, bool keep_snapshots = true) {
  const std::size_t m = initial.size();
  require(m >= 1, ErrorKind::kInvalidArgument, "rerank: empty candidate list");
  require(n_t >= 1 && n_t <= m, ErrorKind::kInvalidArgument,
          "rerank: N_t=" + std::to_string(n_t) + " outside [1, " + std::to_string(m) + "]");
  {
    std::unordered_set<EntityId> seen;
    for (EntityId e : initial) {
      require(seen.insert(e).second, ErrorKind::kInvalidArgument,
              "rerank: duplicate candidate " + std::to_string(e));
    }
  }
  RerankTrace trace;
  std::vector<EntityId> list(initial.begin(), initial.end());
  std::vector<EntityId> remaining(initial.begin(), initial.end());
  for (std::size_t t = 1; t <= n_t; ++t) {
    const EntityId pick = scorer(query, remaining);
    auto in_m = std::find(remaining.begin(), remaining.end(), pick);
    if (in_m == remaining.end()) {
      fail(ErrorKind::kContractViolation, "rerank: scorer picked entity " + std::to_string(pick) +
                                              " outside the remaining set at round " + std::to_string(t));
    }
    if (keep_snapshots) trace.rounds.push_back({t, remaining, list, pick});
    remaining.erase(in_m);
    list.erase(std::find(list.begin(), list.end(), pick));
    list.insert(list.begin() + static_cast<std::ptrdiff_t>(t - 1), pick);
    trace.picks.push_back(pick);
  }
  trace.final_list = RankedList{std::move(list), n_t + 1};
  return trace;
}

inline RankedList rerank(const Query& query, std::span<const EntityId> initial, const Scorer& scorer,
                         std::size_t n_t) {
  return rerank_trace(query, initial, scorer, n_t, false).final_list;
}

/// Rank of the gold after reranking. A gold outside the candidate list keeps
/// its retrieval rank, which is at least m + 1.
inline std::size_t final_rank(std::span<const EntityId> final_order, EntityId gold, std::size_t retrieval_rank) {
  auto it = std::find(final_order.begin(), final_order.end(), gold);
  if (it != final_order.end()) return static_cast<std::size_t>(it - final_order.begin()) + 1;
  return std::max(retrieval_rank, final_order.size() + 1);
}

struct RerankRecord {
  Query query;
  std::optional<EntityId> gold;
  std::vector<EntityId> final_order;
  std::vector<EntityId> picks;
  std::size_t n_t = 0;
  std::size_t gold_rank = 0;
};

inline json to_json(const RerankRecord& r) {
  json j{{"query", {{"h", r.query.head}, {"r", r.query.relation}, {"lang", r.query.language}}},
         {"final_order", r.final_order},
         {"picks", r.picks},
         {"n_t", r.n_t},
         {"gold_rank", r.gold_rank}};
  j["gold"] = r.gold ? json(*r.gold) : json(nullptr);
  return j;
}

inline void write_rerank_jsonl(const std::filesystem::path& path, const std::vector<RerankRecord>& records) {
  auto out = detail::open_output(path);
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

}  // namespace mkgc
