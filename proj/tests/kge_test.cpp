#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mkgc/kg/split.hpp"
#include "mkgc/kg/synthetic.hpp"
#include "mkgc/kge/transe.hpp"
#include "mkgc/numerics/grad_check.hpp"
#include "test_util.hpp"

namespace mkgc {
namespace {

EmbeddingTable table_from(const std::vector<std::vector<double>>& ents, const std::vector<std::vector<double>>& rels) {
  const std::size_t dim = ents.front().size();
  std::vector<double> e;
  std::vector<double> r;
  for (const auto& row : ents) e.insert(e.end(), row.begin(), row.end());
  for (const auto& row : rels) r.insert(r.end(), row.begin(), row.end());
  std::vector<EntityId> eids(ents.size());
  std::iota(eids.begin(), eids.end(), 0u);
  std::vector<RelationId> rids(rels.size());
  std::iota(rids.begin(), rids.end(), 0u);
  return EmbeddingTable(eids, rids, Matrix(ents.size(), dim, e), Matrix(rels.size(), dim, r));
}

EmbeddingTable random_table(std::size_t n_ent, std::size_t n_rel, std::size_t dim, std::uint64_t seed,
                            bool coarse = false) {
  Rng rng(seed);
  std::vector<std::vector<double>> ents(n_ent, std::vector<double>(dim));
  std::vector<std::vector<double>> rels(n_rel, std::vector<double>(dim));
  // Coarse values make exact score ties likely, which exercises tie-breaking.
  auto draw = [&] { return coarse ? static_cast<double>(rng.between(-1, 1)) : rng.normal(); };
  for (auto& row : ents)
    for (double& x : row) x = draw();
  for (auto& row : rels)
    for (double& x : row) x = draw();
  return table_from(ents, rels);
}

// Independent scorer: plain loops over the raw matrices.
double oracle_score(const EmbeddingTable& t, std::size_t h, std::size_t r, std::size_t e) {
  double acc = 0.0;
  for (std::size_t k = 0; k < t.dim(); ++k) {
    const double d = t.entities()(h, k) + t.relations()(r, k) - t.entities()(e, k);
    acc += d * d;
  }
  return -std::sqrt(acc);
}

// Exhaustive ordering of all entity ids, best first, ties by id.
std::vector<EntityId> oracle_order(const EmbeddingTable& t, std::size_t h, std::size_t r,
                                   const std::set<EntityId>& drop = {}) {
  std::vector<std::pair<double, EntityId>> all;
  for (std::size_t e = 0; e < t.n_entities(); ++e) {
    if (drop.contains(static_cast<EntityId>(e))) continue;
    all.emplace_back(oracle_score(t, h, r, e), static_cast<EntityId>(e));
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<EntityId> ids;
  for (const auto& p : all) ids.push_back(p.second);
  return ids;
}

TEST(TransEScore, TranslationIdentityIsMaximal) {
  const auto t = table_from({{1, 2}, {0, 0}, {1.5, 2.5}}, {{0.5, 0.5}});
  EXPECT_EQ(score(0, 0, 2, t), 0.0);
  for (EntityId e = 0; e < 3; ++e) EXPECT_LE(score(0, 0, e, t), 0.0);
}

TEST(TransEScore, HandArithmetic) {
  const auto t = table_from({{1, 0}, {0, 0}}, {{0, 1}});
  EXPECT_DOUBLE_EQ(score(0, 0, 1, t), -std::sqrt(2.0));
  EXPECT_THROW(score(0, 0, 9, t), Error);
  try {
    score(0, 4, 1, t);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNotFound);
  }
}

TEST(TransEScore, TranslationConsistent) {
  auto t = random_table(5, 2, 6, 1);
  const double before = score(1, 1, 3, t);
  for (std::size_t k = 0; k < 6; ++k) {
    t.entities()(1, k) += 0.37 * static_cast<double>(k);
    t.entities()(3, k) += 0.37 * static_cast<double>(k);
  }
  EXPECT_NEAR(score(1, 1, 3, t), before, 1e-12);
}

TEST(TransERank, RawAndFilteredMatchExhaustiveOracle) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const bool coarse = seed % 2 == 1;
    const auto t = random_table(20, 3, 4, seed, coarse);
    Rng rng(seed + 100);
    std::vector<Triple> known;
    for (int i = 0; i < 30; ++i) {
      known.push_back({static_cast<EntityId>(rng.below(20)), static_cast<RelationId>(rng.below(3)),
                       static_cast<EntityId>(rng.below(20)), "en"});
    }
    const TripleIndex filter(known);
    for (EntityId h = 0; h < 20; h += 3) {
      for (RelationId r = 0; r < 3; ++r) {
        const Query q{h, r, "en"};
        const auto raw = oracle_order(t, h, r);
        const auto got = retrieve(t, q, 20, RankMode::kRaw);
        EXPECT_EQ(got.entities, raw);
        for (std::size_t i = 1; i < got.scores.size(); ++i) EXPECT_GE(got.scores[i - 1], got.scores[i]);
        for (EntityId gold = 0; gold < 20; gold += 4) {
          const auto pos = std::find(raw.begin(), raw.end(), gold) - raw.begin();
          EXPECT_EQ(rank_of(t, q, gold, RankMode::kRaw), static_cast<std::size_t>(pos) + 1);

          std::set<EntityId> drop;
          for (EntityId k : filter.known_tails(h, r))
            if (k != gold) drop.insert(k);
          const auto filt = oracle_order(t, h, r, drop);
          const auto fpos = std::find(filt.begin(), filt.end(), gold) - filt.begin();
          EXPECT_EQ(rank_of(t, q, gold, RankMode::kFiltered, &filter), static_cast<std::size_t>(fpos) + 1);
          const auto fl = retrieve(t, q, 10, RankMode::kFiltered, &filter, gold);
          EXPECT_EQ(fl.entities, std::vector<EntityId>(filt.begin(), filt.begin() + 10));
        }
      }
    }
  }
}

TEST(TransERank, FilteringOneBetterKnownTailImprovesRankByOne) {
  // Scores from head 0 with zero relation: e1 closest, then e2, then e3.
  const auto t = table_from({{0, 0}, {0.1, 0}, {0.2, 0}, {0.3, 0}}, {{0, 0}});
  const Query q{0, 0, "en"};
  const std::vector<Triple> known = {{0, 0, 1, "en"}};
  const TripleIndex filter(known);
  EXPECT_EQ(rank_of(t, q, 2, RankMode::kRaw), 3u);
  EXPECT_EQ(rank_of(t, q, 2, RankMode::kFiltered, &filter), 2u);
  // The gold itself is never filtered away.
  EXPECT_EQ(rank_of(t, q, 1, RankMode::kFiltered, &filter), 2u);
  EXPECT_EQ(rank_of(t, q, 0, RankMode::kRaw), 1u);
}

TEST(TransERetrieve, FullRawListIsPermutation) {
  const auto t = random_table(13, 2, 5, 7);
  auto got = retrieve(t, Query{4, 1, "en"}, 13, RankMode::kRaw).entities;
  std::sort(got.begin(), got.end());
  std::vector<EntityId> all(13);
  std::iota(all.begin(), all.end(), 0u);
  EXPECT_EQ(got, all);
}

TEST(TransERetrieve, TranslationIdentityPutsGoldFirst) {
  auto t = random_table(10, 1, 4, 3);
  for (std::size_t k = 0; k < 4; ++k) t.entities()(6, k) = t.entities()(2, k) + t.relations()(0, k);
  EXPECT_EQ(retrieve(t, Query{2, 0, "en"}, 5, RankMode::kRaw).entities.front(), 6u);
}

TEST(TransERetrieve, SmallerMIsPrefix) {
  const auto t = random_table(30, 2, 4, 11, true);
  for (EntityId h = 0; h < 30; h += 7) {
    const auto big = retrieve(t, Query{h, 0, "en"}, 25, RankMode::kRaw).entities;
    for (std::size_t m = 1; m <= 25; m += 6) {
      const auto small = retrieve(t, Query{h, 0, "en"}, m, RankMode::kRaw).entities;
      EXPECT_TRUE(std::equal(small.begin(), small.end(), big.begin()));
    }
  }
}

TEST(TransERetrieve, OversizedMClampsWithWarning) {
  const auto t = random_table(6, 1, 3, 2);
  std::vector<std::string> warnings;
  ScopedWarningSink sink([&](std::string_view m) { warnings.emplace_back(m); });
  EXPECT_EQ(retrieve(t, Query{0, 0, "en"}, 50, RankMode::kRaw).entities.size(), 6u);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_THROW(retrieve(t, Query{0, 0, "en"}, 0, RankMode::kRaw), Error);
  EXPECT_THROW(retrieve(t, Query{0, 0, "en"}, 3, RankMode::kFiltered), Error);
}

TEST(TransERetrieve, RenormalizingUnitRowsKeepsTopCandidate) {
  auto t = random_table(25, 2, 5, 9);
  for (std::size_t e = 0; e < 25; ++e) {
    const double n = l2_norm(t.entities().row(e));
    for (double& x : t.entities().row(e)) x /= n;
  }
  std::vector<EntityId> before;
  for (EntityId h = 0; h < 25; ++h) before.push_back(retrieve(t, Query{h, 1, "en"}, 1, RankMode::kRaw).entities[0]);
  for (std::size_t e = 0; e < 25; ++e) {
    const double n = l2_norm(t.entities().row(e));
    for (double& x : t.entities().row(e)) x /= n;
  }
  for (EntityId h = 0; h < 25; ++h) EXPECT_EQ(retrieve(t, Query{h, 1, "en"}, 1, RankMode::kRaw).entities[0], before[h]);
}

KGStore chain_store() {
  KGStore::Builder b({"en"});
  for (EntityId e = 0; e < 3; ++e) b.add_entity(Entity{e, {{"en", "n" + std::to_string(e)}}, {}});
  b.add_relation(Relation{0, {{"en", "next"}}});
  b.add_triple({0, 0, 1, "en"}).add_triple({1, 0, 2, "en"});
  return std::move(b).build();
}

TEST(TransETrain, ChainKGOverfits) {
  const KGStore s = chain_store();
  TransEConfig cfg;
  cfg.dim = 8;
  cfg.epochs = 200;
  cfg.lr = 0.05;
  // Three unit vectors cannot be separated by a margin of 1, and the default
  // margin then never settles; a smaller margin is feasible for this chain.
  cfg.margin = 0.25;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.seed = seed;
    const auto t = train_transe(s, s.triples(), cfg);
    for (const Triple& tr : s.triples()) {
      EXPECT_EQ(rank_of(t, Query{tr.head, tr.relation, "en"}, tr.tail, RankMode::kRaw), 1u) << "seed " << seed;
    }
  }
}

TEST(TransETrain, ZeroLearningRateLeavesTableUntouched) {
  SyntheticConfig sc;
  sc.n_entities = 40;
  const KGStore s = gen_synthetic(sc).store;
  TransEConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 5;
  cfg.seed = 4;
  EXPECT_EQ(train_transe(s, s.triples(), cfg), init_table(s, cfg));
}

TEST(TransETrain, LossDecreasesOnNearlyAllSeeds) {
  SyntheticConfig sc;
  sc.n_entities = 60;
  sc.n_relations = 4;
  sc.seed = 2;
  const KGStore s = gen_synthetic(sc).store;
  TransEConfig cfg;
  cfg.dim = 16;
  cfg.epochs = 20;
  int improved = 0;
  const int runs = 20;
  for (int seed = 0; seed < runs; ++seed) {
    cfg.seed = static_cast<std::uint64_t>(seed);
    TransEReport rep;
    const auto t = train_transe(s, s.triples(), cfg, &rep);
    ASSERT_EQ(rep.epoch_loss.size(), 20u);
    improved += rep.epoch_loss.back() <= rep.epoch_loss.front() ? 1 : 0;
    for (std::size_t e = 0; e < t.n_entities(); ++e) {
      const double n = l2_norm(t.entities().row(e));
      EXPECT_GT(n, 0.0);
      EXPECT_LE(n, 1.0 + 1e-6);
    }
  }
  EXPECT_GE(improved, 19);
}

TEST(TransETrain, DeterministicPerSeed) {
  SyntheticConfig sc;
  sc.n_entities = 30;
  const KGStore s = gen_synthetic(sc).store;
  TransEConfig cfg;
  cfg.epochs = 3;
  cfg.seed = 8;
  EXPECT_EQ(train_transe(s, s.triples(), cfg), train_transe(s, s.triples(), cfg));
}

TEST(TransETrain, BadConfigRejected) {
  const KGStore s = chain_store();
  for (auto mutate : {+[](TransEConfig& c) { c.dim = 0; }, +[](TransEConfig& c) { c.margin = 0.0; },
                      +[](TransEConfig& c) { c.margin = -1.0; }}) {
    TransEConfig cfg;
    mutate(cfg);
    try {
      train_transe(s, s.triples(), cfg);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kConfig);
    }
  }
  EXPECT_THROW(train_transe(s, {}, TransEConfig{}), Error);
}

TEST(TransETrain, PaperImpliedDimension) {
  // 106.1M parameters over 351,299 + 2,264 rows.
  const double rows = 351299.0 + 2264.0;
  EXPECT_EQ(std::lround(106.1e6 / rows), 300);
  EXPECT_EQ(TransEConfig::large_scale().dim, 300u);
}

TEST(TransEGradient, MarginLossMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto base = random_table(4, 2, 3, seed);
    const RowFact pos{0, 1, 2};
    const RowFact neg{0, 1, seed % 2 == 0 ? 3u : 1u};
    const double margin = 5.0;  // keeps the hinge active at the probe point
    auto unpack = [&](const Vector& x) {
      EmbeddingTable t = base;
      std::size_t i = 0;
      for (double& v : t.entities().values()) v = x[i++];
      for (double& v : t.relations().values()) v = x[i++];
      return t;
    };
    std::vector<double> flat(base.entities().values().begin(), base.entities().values().end());
    flat.insert(flat.end(), base.relations().values().begin(), base.relations().values().end());
    const Vector point(flat);
    const auto g = margin_loss_gradient(base, pos, neg, margin);
    std::vector<double> ga(g.entities.values().begin(), g.entities.values().end());
    ga.insert(ga.end(), g.relations.values().begin(), g.relations.values().end());
    const auto rep = grad_check([&](const Vector& x) { return margin_loss(unpack(x), pos, neg, margin); },
                                Vector(ga), point, {.eps = 1e-5, .tol = 1e-4});
    EXPECT_TRUE(rep.passed) << rep.diagnostic << " max rel " << rep.max_rel_error;
  }
}

TEST(TransEIO, CheckpointRoundTrip) {
  testing::TempDir dir;
  const auto t = random_table(7, 3, 5, 21);
  TransEConfig cfg;
  cfg.seed = 77;
  save_checkpoint(dir.path() / "kge" / "emb.bin", t, cfg);
  EXPECT_EQ(load_checkpoint(dir.path() / "kge" / "emb.bin"), t);
  EXPECT_EQ(load_checkpoint_config(dir.path() / "kge" / "emb.bin").seed, 77u);
  std::ofstream(dir.path() / "junk.bin") << "nope";
  EXPECT_THROW(load_checkpoint(dir.path() / "junk.bin"), Error);
}

TEST(TransEIO, CandidateExportRoundTrip) {
  testing::TempDir dir;
  const auto t = random_table(12, 2, 4, 5);
  const std::vector<Triple> qs = {{1, 0, 4, "en"}, {3, 1, 9, "fr"}};
  const TripleIndex filter(qs);
  const auto lists = generate_candidates(t, qs, 5, RankMode::kFiltered, &filter);
  write_candidates_jsonl(dir.path() / "c.jsonl", lists);
  const auto back = read_candidates_jsonl(dir.path() / "c.jsonl");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].entities, lists[i].entities);
    EXPECT_EQ(back[i].scores, lists[i].scores);
    EXPECT_EQ(back[i].gold, lists[i].gold);
    EXPECT_EQ(back[i].gold_rank, lists[i].gold_rank);
    EXPECT_EQ(back[i].query.language, lists[i].query.language);
  }
}

}  // namespace
}  // namespace mkgc
