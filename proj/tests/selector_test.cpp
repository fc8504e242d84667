#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mkgc/kg/synthetic.hpp"
#include "mkgc/numerics/grad_check.hpp"
#include "mkgc/selector/selector.hpp"
#include "test_util.hpp"

namespace mkgc {
namespace {

KGStore small_store(std::uint64_t seed = 3) {
  SyntheticConfig c;
  c.n_entities = 60;
  c.n_relations = 4;
  c.languages = {"en", "fr"};
  c.shared_fraction = 0.7;
  c.facts_per_entity = 3;
  c.seed = seed;
  return gen_synthetic(c).store;
}

SelectorConfig small_config(std::uint64_t seed = 0) {
  SelectorConfig c;
  c.hidden = 12;
  c.n_blocks = 2;
  c.adapter.n_groups = 3;
  c.adapter.experts_per_group = 2;
  c.adapter.rank = 3;
  c.seed = seed;
  return c;
}

// Gold plus `m - 1` random distractors, gold at a random position.
std::vector<TrainingExample> random_examples(const KGStore& store, std::size_t n, std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrainingExample> out;
  const auto& triples = store.triples();
  for (std::size_t i = 0; i < n; ++i) {
    const Triple& t = triples[rng.below(triples.size())];
    std::vector<EntityId> cands;
    for (std::size_t idx : rng.sample_indices(store.entity_count(), m + 1)) {
      const EntityId e = store.entities()[idx].id;
      if (e != t.tail && cands.size() + 1 < m) cands.push_back(e);
    }
    const std::size_t pos = rng.below(m);
    cands.insert(cands.begin() + static_cast<std::ptrdiff_t>(pos), t.tail);
    out.push_back({Query{t.head, t.relation, t.language}, std::move(cands), pos});
  }
  return out;
}

void randomize_trainables(SelectorModel& model, Rng& rng, double sd) {
  for (Matrix* m : model.trainable())
    for (double& x : m->values()) x = sd * rng.normal();
}

std::vector<Matrix> snapshot(SelectorModel& model) {
  std::vector<Matrix> out;
  for (Matrix* m : model.trainable()) out.push_back(*m);
  return out;
}

// Frozen-host forward with plain loops, no adapter term.
std::vector<double> host_only_scores(const SelectorModel& model, const Query& q, const std::vector<EntityId>& cands) {
  const auto& t = model.tables.at(q.language);
  const std::size_t d = model.config.hidden;
  auto row = [&](const Matrix& m, std::size_t r) {
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k) v[k] = m(r, k);
    return v;
  };
  std::array<std::vector<double>, 3> x = {row(t.entities, model.entity_row(q.head)),
                                          row(t.relations, model.relation_row(q.relation)),
                                          std::vector<double>(d, 0.0)};
  for (EntityId e : cands)
    for (std::size_t k = 0; k < d; ++k) x[2][k] += t.entities(model.entity_row(e), k) / static_cast<double>(cands.size());
  for (const auto& b : model.blocks) {
    std::vector<double> mean(d);
    for (std::size_t k = 0; k < d; ++k) mean[k] = (x[0][k] + x[1][k] + x[2][k]) / 3.0;
    std::array<std::vector<double>, 3> next = x;
    for (std::size_t s = 0; s < 3; ++s) {
      std::vector<double> u(d, 0.0);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < d; ++k) u[i] += b.Q(i, k) * 0.5 * (x[s][k] + mean[k]);
      for (std::size_t i = 0; i < d; ++i) {
        double y = 0.0;
        for (std::size_t k = 0; k < d; ++k) y += b.adapter.W0(i, k) * u[k];
        next[s][i] += std::tanh(y);
      }
    }
    x = next;
  }
  std::vector<double> pooled(d), v(d, 0.0), scores;
  for (std::size_t k = 0; k < d; ++k) pooled[k] = 0.5 * (x[0][k] + x[1][k]);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < d; ++i) v[j] += model.H(i, j) * pooled[i];
  for (EntityId e : cands) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += t.entities(model.entity_row(e), k) * v[k];
    scores.push_back(s);
  }
  return scores;
}

TEST(Selector, SingleCandidateHasProbabilityOne) {
  const auto store = small_store();
  const auto model = build_selector(store, small_config());
  const std::vector<EntityId> one = {7};
  const auto s = select(model, Query{1, 0, "en"}, one);
  EXPECT_EQ(s.entity, 7u);
  ASSERT_EQ(s.probabilities.dim(), 1u);
  EXPECT_EQ(s.probabilities[0], 1.0);
}

TEST(Selector, UntrainedHeadGivesUniformAndFirstCandidate) {
  const auto store = small_store();
  const auto model = build_selector(store, small_config());
  const std::vector<EntityId> cands = {9, 4, 30, 2};
  const auto s = select(model, Query{1, 0, "fr"}, cands);
  EXPECT_EQ(s.entity, 9u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(s.probabilities[i], 0.25);
  EXPECT_EQ(s.decisions.size(), 2u);
}

TEST(Selector, ProbabilitiesFormADistribution) {
  const auto store = small_store();
  auto model = build_selector(store, small_config());
  Rng rng(1);
  randomize_trainables(model, rng, 0.5);
  for (const auto& ex : random_examples(store, 200, 8, 2)) {
    const auto s = select(model, ex.query, ex.candidates);
    double total = 0.0;
    for (double p : s.probabilities.values()) {
      EXPECT_GE(p, 0.0);
      total += p;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
    EXPECT_EQ(s.index, argmax_det(s.probabilities.values()));
  }
}

TEST(Selector, PermutingCandidatesPermutesProbabilities) {
  const auto store = small_store();
  auto model = build_selector(store, small_config());
  Rng rng(5);
  randomize_trainables(model, rng, 0.5);
  for (const auto& ex : random_examples(store, 100, 9, 6)) {
    std::vector<std::size_t> perm(ex.candidates.size());
    std::iota(perm.begin(), perm.end(), 0u);
    rng.shuffle(perm);
    std::vector<EntityId> shuffled;
    for (std::size_t i : perm) shuffled.push_back(ex.candidates[i]);
    const auto a = select(model, ex.query, ex.candidates);
    const auto b = select(model, ex.query, shuffled);
    // The candidate mean is summed in a different order, hence the tolerance.
    for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_NEAR(b.probabilities[i], a.probabilities[perm[i]], 1e-12);
  }
}

TEST(Selector, ErrorsOnUnknownIdsAndEmptyLists) {
  const auto store = small_store();
  const auto model = build_selector(store, small_config());
  const std::vector<EntityId> bad = {1, 999};
  const std::vector<EntityId> ok = {1, 2};
  const std::vector<EntityId> none;
  auto kind_of = [&](auto fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::kIo;  // sentinel: no throw
  };
  EXPECT_EQ(kind_of([&] { select(model, Query{1, 0, "en"}, bad); }), ErrorKind::kNotFound);
  EXPECT_EQ(kind_of([&] { select(model, Query{1, 77, "en"}, ok); }), ErrorKind::kNotFound);
  EXPECT_EQ(kind_of([&] { select(model, Query{1, 0, "de"}, ok); }), ErrorKind::kNotFound);
  EXPECT_EQ(kind_of([&] { select(model, Query{1, 0, "en"}, none); }), ErrorKind::kInvalidArgument);
}

TEST(Selector, ZeroAdapterReducesToFrozenHost) {
  const auto store = small_store();
  auto model = build_selector(store, small_config());
  Rng rng(8);
  for (double& x : model.H.values()) x = rng.normal();
  // Routers and A stay random; B = 0 makes every expert contribute nothing.
  for (const auto& ex : random_examples(store, 50, 7, 9)) {
    ad::Tape tape;
    const auto f = selector_forward(tape, model, ex.query, ex.candidates);
    const auto want = host_only_scores(model, ex.query, ex.candidates);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(f.scores.value()(i, 0), want[i], 1e-12);
  }
}

TEST(Selector, TablesAreCenteredAndSharedTokensCancel) {
  const auto store = small_store();
  const auto model = build_selector(store, small_config());
  for (const auto& [lang, t] : model.tables) {
    for (std::size_t k = 0; k < model.config.hidden; ++k) {
      double col = 0.0;
      for (std::size_t r = 0; r < t.entities.rows(); ++r) col += t.entities(r, k);
      EXPECT_NEAR(col, 0.0, 1e-9);
    }
  }
  // Synthetic labels differ across languages only by one per-language word.
  const auto& en = model.tables.at("en").entities;
  const auto& fr = model.tables.at("fr").entities;
  for (std::size_t i = 0; i < en.size(); ++i) EXPECT_NEAR(en.values()[i], fr.values()[i], 1e-9);
}

double loss_at(SelectorModel& model, const std::vector<Matrix*>& params, const Vector& point,
               const TrainingExample& ex) {
  std::size_t k = 0;
  for (Matrix* m : params)
    for (double& x : m->values()) x = point[k++];
  return example_loss(model, ex);
}

TEST(Selector, GradientsMatchFiniteDifferences) {
  const auto store = small_store();
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto model = build_selector(store, small_config(seed));
    Rng rng(100 + seed);
    randomize_trainables(model, rng, 0.3);
    const auto ex = random_examples(store, 1, 6, 200 + seed).front();

    ad::Tape tape;
    const auto f = selector_forward(tape, model, ex.query, ex.candidates);
    tape.backward(ad::scale(ad::pick(ad::log_softmax(f.scores), ex.gold_index), -1.0));
    std::vector<double> analytic;
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
      auto g = gradients(tape, f.adapters[b], model.blocks[b].adapter);
      for (Matrix* m : g.trainable()) analytic.insert(analytic.end(), m->values().begin(), m->values().end());
    }
    const Matrix gh = tape.grad(f.H);
    analytic.insert(analytic.end(), gh.values().begin(), gh.values().end());

    const auto params = model.trainable();
    std::vector<double> point;
    for (Matrix* m : params) point.insert(point.end(), m->values().begin(), m->values().end());
    const auto report = grad_check([&](const Vector& p) { return loss_at(model, params, p, ex); }, Vector(analytic),
                                   Vector(point), GradCheckOptions{.eps = 1e-5, .tol = 1e-4});
    EXPECT_TRUE(report.passed) << "seed " << seed << ": " << report.diagnostic;
  }
}

TEST(SelectorTraining, ZeroLearningRateKeepsEveryTensor) {
  const auto store = small_store();
  auto model = build_selector(store, small_config());
  const auto before = snapshot(model);
  const auto frozen = model.frozen_digest();
  const auto ex = random_examples(store, 30, 6, 1);
  train_selector(model, ex, SelectorTrainConfig{.lr = 0.0, .epochs = 2, .batch_size = 4});
  EXPECT_EQ(snapshot(model), before);
  EXPECT_EQ(model.frozen_digest(), frozen);
}

TEST(SelectorTraining, FrozenTensorsNeverChange) {
  const auto store = small_store();
  auto model = build_selector(store, small_config());
  const auto before = snapshot(model);
  const auto frozen = model.frozen_digest();
  std::vector<Matrix> q_before;
  for (const auto& b : model.blocks) q_before.push_back(b.Q);
  train_selector(model, random_examples(store, 30, 6, 1), SelectorTrainConfig{.lr = 1e-2, .epochs = 2});
  EXPECT_EQ(model.frozen_digest(), frozen);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) EXPECT_EQ(model.blocks[b].Q, q_before[b]);
  EXPECT_NE(snapshot(model), before);
}

TEST(SelectorTraining, FrozenHeadStaysFixedWhenNotTrained) {
  const auto store = small_store();
  auto cfg = small_config();
  cfg.train_head = false;
  auto model = build_selector(store, cfg);
  Rng rng(4);
  for (double& x : model.H.values()) x = rng.normal();
  const Matrix h = model.H;
  train_selector(model, random_examples(store, 20, 6, 1), SelectorTrainConfig{.lr = 1e-2, .epochs = 2});
  EXPECT_EQ(model.H, h);
}

TEST(SelectorTraining, LossDecreasesOnToyTask) {
  const auto store = small_store();
  auto model = build_selector(store, small_config());
  const auto ex = random_examples(store, 50, 8, 11);
  const auto rep = train_selector(model, ex, SelectorTrainConfig{.lr = 1e-2, .epochs = 20});
  ASSERT_EQ(rep.epoch_loss.size(), 20u);
  EXPECT_LT(mean_loss(model, ex), rep.initial_loss);
  EXPECT_LT(rep.epoch_loss.back(), rep.epoch_loss.front());
}

TEST(SelectorTraining, OverfitsFiftyFixedExamples) {
  const auto store = small_store();
  auto cfg = small_config();
  cfg.hidden = 32;
  auto model = build_selector(store, cfg);
  const auto ex = random_examples(store, 50, 8, 12);
  train_selector(model, ex, SelectorTrainConfig{.lr = 2e-2, .epochs = 150, .batch_size = 10});
  std::size_t hits = 0;
  for (const auto& e : ex) hits += select(model, e.query, e.candidates).index == e.gold_index;
  EXPECT_EQ(hits, ex.size());
}

TEST(SelectorTraining, DeterministicPerSeed) {
  const auto store = small_store();
  const auto ex = random_examples(store, 40, 6, 13);
  auto a = build_selector(store, small_config(2));
  auto b = build_selector(store, small_config(2));
  const auto ra = train_selector(a, ex, SelectorTrainConfig{.lr = 1e-2, .epochs = 3, .seed = 9});
  const auto rb = train_selector(b, ex, SelectorTrainConfig{.lr = 1e-2, .epochs = 3, .seed = 9});
  EXPECT_EQ(snapshot(a), snapshot(b));
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
}

TEST(SelectorTraining, NonFiniteLossAbortsWithDiagnostic) {
  const auto store = small_store();
  auto model = build_selector(store, small_config());
  for (double& x : model.H.values()) x = 1e308;
  try {
    train_selector(model, random_examples(store, 5, 4, 1), SelectorTrainConfig{.lr = 1e-3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
  }
}

TEST(SelectorTraining, RejectsEmptyInputsAndBadConfig) {
  const auto store = small_store();
  auto model = build_selector(store, small_config());
  EXPECT_THROW(train_selector(model, {}, SelectorTrainConfig{}), Error);
  const auto ex = random_examples(store, 3, 4, 1);
  EXPECT_THROW(train_selector(model, ex, SelectorTrainConfig{.lr = -1.0}), Error);
  EXPECT_THROW(train_selector(model, ex, SelectorTrainConfig{.batch_size = 0}), Error);
}

TEST(SelectorTraining, LossCurveCsv) {
  testing::TempDir dir;
  SelectorTrainReport rep;
  rep.initial_loss = 2.5;
  rep.epoch_loss = {2.0, 1.5};
  write_loss_curve_csv(dir.path() / "curve.csv", rep);
  EXPECT_EQ(testing::slurp(dir.path() / "curve.csv"), "epoch,loss\n0,2.5\n1,2\n2,1.5\n");
}

TEST(SelectorCheckpoint, RoundTripAndStoreMismatch) {
  testing::TempDir dir;
  const auto store = small_store();
  auto model = build_selector(store, small_config(4));
  train_selector(model, random_examples(store, 20, 6, 3), SelectorTrainConfig{.lr = 1e-2, .epochs = 2});
  save_selector(dir.path() / "ckpt", model);
  auto loaded = load_selector(dir.path() / "ckpt", store);
  EXPECT_EQ(snapshot(loaded), snapshot(model));
  EXPECT_EQ(loaded.frozen_digest(), model.frozen_digest());
  for (const auto& ex : random_examples(store, 10, 6, 5)) {
    EXPECT_EQ(select(loaded, ex.query, ex.candidates).probabilities, select(model, ex.query, ex.candidates).probabilities);
  }
  const auto other = small_store(99);
  try {
    load_selector(dir.path() / "ckpt", other);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

// ---- build_examples ------------------------------------------------------

CandidateList list_with(EntityId gold, std::size_t len, std::size_t gold_pos) {
  CandidateList l;
  l.query = Query{0, 0, "en"};
  l.gold = gold;
  for (std::size_t i = 0; i < len; ++i) l.entities.push_back(static_cast<EntityId>(1000 + i));
  if (gold_pos < len) l.entities[gold_pos] = gold;
  return l;
}

TEST(BuildExamples, FixedSizeWhenRangeCollapses) {
  std::vector<CandidateList> lists;
  for (std::size_t i = 0; i < 50; ++i) lists.push_back(list_with(1, 30, i % 20));
  const auto set = build_examples(lists, ExampleConfig{25, 25, 1});
  ASSERT_EQ(set.examples.size(), 50u);
  for (const auto& ex : set.examples) {
    EXPECT_EQ(ex.candidates.size(), 25u);
    EXPECT_EQ(ex.candidates[ex.gold_index], 1u);
  }
}

TEST(BuildExamples, SizesStayInRangeAndNonGoldKeepOrder) {
  std::vector<CandidateList> lists;
  for (std::size_t i = 0; i < 300; ++i) lists.push_back(list_with(1, 30, i % 25));
  const auto set = build_examples(lists, ExampleConfig{25, 30, 2});
  std::set<std::size_t> sizes;
  for (const auto& ex : set.examples) {
    sizes.insert(ex.candidates.size());
    std::vector<EntityId> rest;
    for (std::size_t i = 0; i < ex.candidates.size(); ++i)
      if (i != ex.gold_index) rest.push_back(ex.candidates[i]);
    EXPECT_TRUE(std::is_sorted(rest.begin(), rest.end()));
  }
  EXPECT_EQ(*sizes.begin(), 25u);
  EXPECT_EQ(*sizes.rbegin(), 30u);
}

TEST(BuildExamples, GoldPositionIsUniform) {
  std::vector<CandidateList> lists;
  for (std::size_t i = 0; i < 10000; ++i) lists.push_back(list_with(1, 25, 0));
  // A single 1% test rejects a fair shuffler one time in a hundred, so run
  // it on 50 seeds: a fair shuffler rejects about 0.5 of them, and 6 or more
  // has probability below 2e-4. The mean statistic must also sit near df=24.
  std::size_t rejected = 0;
  double mean_chi2 = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto set = build_examples(lists, ExampleConfig{25, 25, seed});
    std::vector<double> counts(25, 0.0);
    for (const auto& ex : set.examples) counts[ex.gold_index] += 1.0;
    const double expected = 10000.0 / 25.0;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // Upper 1% point of chi-square with 24 degrees of freedom.
    rejected += chi2 > 42.98;
    mean_chi2 += chi2 / 50.0;
  }
  EXPECT_LE(rejected, 5u);
  // sd of the mean of 50 chi-square(24) draws is sqrt(48/50) ~ 0.98.
  EXPECT_NEAR(mean_chi2, 24.0, 4.0);
}

TEST(BuildExamples, ListsWithoutGoldAreDroppedAndCounted) {
  std::vector<CandidateList> lists = {list_with(1, 30, 3), list_with(1, 30, 99), list_with(1, 30, 28)};
  auto no_gold = list_with(1, 30, 2);
  no_gold.gold.reset();
  lists.push_back(no_gold);
  // Gold at index 28 falls outside a top-25 cut.
  const auto set = build_examples(lists, ExampleConfig{25, 25, 4});
  EXPECT_EQ(set.examples.size(), 1u);
  EXPECT_EQ(set.dropped, 3u);
}

TEST(BuildExamples, EmptySourceIsConfigError) {
  try {
    build_examples({}, ExampleConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(SelectorScorer, RerankUsesSelectorPicks) {
  const auto store = small_store();
  auto model = build_selector(store, small_config());
  Rng rng(21);
  randomize_trainables(model, rng, 0.5);
  const auto ex = random_examples(store, 1, 8, 22).front();
  const auto trace = rerank_trace(ex.query, ex.candidates, selector_scorer(model), 8);
  for (const auto& round : trace.rounds) EXPECT_EQ(round.pick, select(model, ex.query, round.remaining).entity);
}

}  // namespace
}  // namespace mkgc
