#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mkgc/kg/store.hpp"
#include "mkgc/random.hpp"

namespace mkgc {

/// Read-only lookups over a triple list: incident triples per entity and
/// known tails per (head, relation), the latter ignoring language.
class TripleIndex {
 public:
  TripleIndex() = default;

  explicit TripleIndex(std::span<const Triple> triples) : triples_(triples.begin(), triples.end()) {
    for (std::size_t i = 0; i < triples_.size(); ++i) {
      const Triple& t = triples_[i];
      incident_[t.head].push_back(i);
      if (t.tail != t.head) incident_[t.tail].push_back(i);
      tails_[key(t.head, t.relation)].push_back(t.tail);
      facts_.insert(t.fact());
    }
    for (auto& [k, v] : tails_) {
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
    }
  }

  const std::vector<Triple>& triples() const noexcept { return triples_; }

  std::span<const std::size_t> incident(EntityId e) const {
    auto it = incident_.find(e);
    if (it == incident_.end()) return {};
    return it->second;
  }

  /// Sorted distinct tails t with (h, r, t) in the index, any language.
  std::span<const EntityId> known_tails(EntityId h, RelationId r) const {
    auto it = tails_.find(key(h, r));
    if (it == tails_.end()) return {};
    return it->second;
  }

  bool is_known(EntityId h, RelationId r, EntityId t) const {
    return facts_.contains(Fact{h, r, t});
  }

  bool contains_fact(const Fact& f) const { return facts_.contains(f); }

 private:
  static std::uint64_t key(EntityId h, RelationId r) {
    return (static_cast<std::uint64_t>(h) << 32) | r;
  }

  std::vector<Triple> triples_;
  std::unordered_map<EntityId, std::vector<std::size_t>> incident_;
  std::unordered_map<std::uint64_t, std::vector<EntityId>> tails_;
  std::set<Fact> facts_;
};

/// Up to k training triples containing `entity`, drawn without replacement.
/// The draw depends only on (seed, entity), never on call order.
inline std::vector<Triple> neighbors(const KGStore& store, const TripleIndex& train, EntityId entity,
                                     std::size_t k, std::uint64_t seed) {
  (void)store.entity(entity);  // not-found check
  const auto inc = train.incident(entity);
  Rng rng(fork_seed(seed, static_cast<std::uint64_t>(entity)));
  const auto picks = rng.sample_indices(inc.size(), k);
  std::vector<Triple> out;
  out.reserve(picks.size());
  for (std::size_t p : picks) out.push_back(train.triples()[inc[p]]);
  return out;
}

}  // namespace mkgc
