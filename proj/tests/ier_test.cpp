#include <gtest/gtest.h>

#include <list>
#include <numeric>
#include <set>

#include "mkgc/ier/rerank.hpp"
#include "mkgc/random.hpp"

namespace mkgc {
namespace {

const Query kQ{0, 0, "en"};

Scorer pick_first() {
  return [](const Query&, std::span<const EntityId> rem) { return rem.front(); };
}
Scorer pick_last() {
  return [](const Query&, std::span<const EntityId> rem) { return rem.back(); };
}

// Scorer drawing a pseudo-random member of the remaining set; stateless in
// the sense that the same remaining set and salt give the same answer.
Scorer hashed_scorer(std::uint64_t salt) {
  return [salt](const Query&, std::span<const EntityId> rem) {
    std::uint64_t h = salt;
    for (EntityId e : rem) h = splitmix64(h ^ e);
    return rem[h % rem.size()];
  };
}

// Brute-force reading of the algorithm: M as a std::set, L as a std::list,
// insertion by walking t-1 steps from the front.
std::vector<EntityId> simulate(const std::vector<EntityId>& init, const Scorer& s, std::size_t n_t,
                               std::vector<EntityId>* picks = nullptr) {
  std::set<EntityId> M(init.begin(), init.end());
  std::list<EntityId> L(init.begin(), init.end());
  for (std::size_t t = 1; t <= n_t; ++t) {
    std::vector<EntityId> rem;
    for (EntityId e : init)
      if (M.count(e)) rem.push_back(e);
    const EntityId e = s(kQ, rem);
    M.erase(e);
    L.remove(e);
    auto pos = L.begin();
    for (std::size_t k = 1; k < t; ++k) ++pos;
    L.insert(pos, e);
    if (picks) picks->push_back(e);
  }
  return {L.begin(), L.end()};
}

std::vector<EntityId> random_list(Rng& rng, std::size_t m) {
  std::vector<EntityId> ids(200);
  std::iota(ids.begin(), ids.end(), 0u);
  rng.shuffle(ids);
  ids.resize(m);
  return ids;
}

TEST(Rerank, FirstPickScorerIsFixedPoint) {
  const std::vector<EntityId> init = {5, 3, 9, 1};
  for (std::size_t n = 1; n <= 4; ++n) EXPECT_EQ(rerank(kQ, init, pick_first(), n).entities, init);
}

TEST(Rerank, LastPickScorerHandSimulation) {
  // a=1, b=2, c=3: rounds pick c, b, a.
  const std::vector<EntityId> init = {1, 2, 3};
  const auto trace = rerank_trace(kQ, init, pick_last(), 3);
  EXPECT_EQ(trace.picks, (std::vector<EntityId>{3, 2, 1}));
  EXPECT_EQ(trace.final_list.entities, (std::vector<EntityId>{3, 2, 1}));
  EXPECT_EQ(trace.final_list.round, 4u);
  ASSERT_EQ(trace.rounds.size(), 3u);
  EXPECT_EQ(trace.rounds[1].before, (std::vector<EntityId>{3, 1, 2}));
  EXPECT_EQ(trace.rounds[1].remaining, (std::vector<EntityId>{1, 2}));
}

TEST(Rerank, InvalidPickIsContractViolation) {
  const std::vector<EntityId> init = {1, 2, 3};
  Scorer bad = [](const Query&, std::span<const EntityId>) { return EntityId{42}; };
  try {
    rerank(kQ, init, bad, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kContractViolation);
  }
  // Re-picking an entity already removed from M is also rejected.
  Scorer again = [](const Query&, std::span<const EntityId>) { return EntityId{1}; };
  EXPECT_THROW(rerank(kQ, init, again, 2), Error);
}

TEST(Rerank, BadIterationCounts) {
  const std::vector<EntityId> init = {1, 2, 3};
  for (std::size_t n : {std::size_t{0}, std::size_t{4}}) {
    try {
      rerank(kQ, init, pick_first(), n);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
    }
  }
  const std::vector<EntityId> dup = {1, 2, 1};
  EXPECT_THROW(rerank(kQ, dup, pick_first(), 1), Error);
}

TEST(Rerank, MatchesBruteForceSimulation) {
  Rng rng(1);
  for (int i = 0; i < 1500; ++i) {
    const std::size_t m = 1 + rng.below(30);
    const auto init = random_list(rng, m);
    const std::size_t n_t = 1 + rng.below(m);
    const Scorer s = hashed_scorer(rng.next_u64());
    EXPECT_EQ(rerank(kQ, init, s, n_t).entities, simulate(init, s, n_t));
  }
}

TEST(Rerank, StructuralInvariants) {
  Rng rng(2);
  for (int i = 0; i < 600; ++i) {
    const std::size_t m = 1 + rng.below(30);
    const auto init = random_list(rng, m);
    const std::size_t n_t = 1 + rng.below(m);
    const Scorer s = hashed_scorer(rng.next_u64());
    const auto trace = rerank_trace(kQ, init, s, n_t);
    const auto& out = trace.final_list.entities;

    // Permutation of the input.
    auto a = out;
    auto b = init;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);

    // Prefix stability: e^(t) stays at position t from round t on.
    ASSERT_EQ(trace.rounds.size(), n_t);
    for (std::size_t t = 1; t <= n_t; ++t) {
      EXPECT_EQ(out[t - 1], trace.picks[t - 1]);
      for (std::size_t later = t + 1; later <= n_t; ++later) {
        EXPECT_EQ(trace.rounds[later - 1].before[t - 1], trace.picks[t - 1]);
      }
    }

    // Tail keeps initial relative order.
    std::vector<EntityId> tail(out.begin() + static_cast<std::ptrdiff_t>(n_t), out.end());
    std::vector<EntityId> expect;
    for (EntityId e : init)
      if (std::find(trace.picks.begin(), trace.picks.end(), e) == trace.picks.end()) expect.push_back(e);
    EXPECT_EQ(tail, expect);
  }
}

TEST(Rerank, PerfectOracleRanksGoldFirst) {
  Rng rng(3);
  for (int i = 0; i < 600; ++i) {
    const std::size_t m = 1 + rng.below(30);
    const auto init = random_list(rng, m);
    const EntityId gold = init[rng.below(m)];
    const Scorer noise = hashed_scorer(rng.next_u64());
    Scorer oracle = [&](const Query& q, std::span<const EntityId> rem) {
      if (std::find(rem.begin(), rem.end(), gold) != rem.end()) return gold;
      return noise(q, rem);
    };
    const std::size_t n_t = 1 + rng.below(m);
    EXPECT_EQ(rerank(kQ, init, oracle, n_t).entities.front(), gold);
  }
}

TEST(Rerank, FullIterationEqualsPickOrder) {
  Rng rng(4);
  for (int i = 0; i < 600; ++i) {
    const std::size_t m = 1 + rng.below(30);
    const auto init = random_list(rng, m);
    const auto trace = rerank_trace(kQ, init, hashed_scorer(rng.next_u64()), m);
    EXPECT_EQ(trace.final_list.entities, trace.picks);
  }
}

TEST(Rerank, OperatingPointIsTenRounds) {
  std::vector<EntityId> init(27);
  std::iota(init.begin(), init.end(), 0u);
  const auto trace = rerank_trace(kQ, init, pick_last(), 10);
  EXPECT_EQ(trace.rounds.size(), 10u);
}

TEST(FinalRank, GoldAbsentKeepsRetrievalRank) {
  const std::vector<EntityId> order = {4, 7, 1};
  EXPECT_EQ(final_rank(order, 7, 9), 2u);
  EXPECT_EQ(final_rank(order, 99, 41), 41u);
  EXPECT_EQ(final_rank(order, 99, 0), 4u);
}

}  // namespace
}  // namespace mkgc
