#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/kg/index.hpp"
#include "mkgc/kg/store.hpp"
#include "mkgc/random.hpp"

namespace mkgc {

/// kContent keeps every language version of a fact in the same split, so no
/// fact content leaks across splits. kSurface splits (h, r, t, lang) tuples
/// independently, letting a test fact's content appear in training under
/// another language.
enum class SplitMode { kContent, kSurface };

inline std::string to_string(SplitMode m) { return m == SplitMode::kContent ? "content" : "surface"; }

inline SplitMode parse_split_mode(const std::string& s) {
  if (s == "content") return SplitMode::kContent;
  if (s == "surface") return SplitMode::kSurface;
  fail(ErrorKind::kConfig, "unknown split mode '" + s + "' (expected content|surface)");
}

struct SplitConfig {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
  /// Fraction of the validation pool carved out as prompt_subset.
  double prompt_fraction = 0.5;
  SplitMode mode = SplitMode::kContent;
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<Triple> train;
  std::vector<Triple> validation;
  std::vector<Triple> test;
  std::vector<Triple> prompt_subset;
  /// Units that could not go to valid/test without leaving an entity or
  /// relation unseen in training; they were kept in train instead.
  std::size_t closure_reassigned = 0;
};

/// Every validation/test/prompt entity and relation is guaranteed to occur in train.
inline Split make_splits(const KGStore& store, const SplitConfig& config) {
  const double total = config.train + config.valid + config.test;
  require(std::abs(total - 1.0) <= 1e-9, ErrorKind::kConfig,
          "split ratios must sum to 1 (got " + std::to_string(total) + ")");
  require(config.train >= 0 && config.valid >= 0 && config.test >= 0, ErrorKind::kConfig,
          "split ratios must be non-negative");
  require(config.prompt_fraction >= 0.0 && config.prompt_fraction <= 1.0, ErrorKind::kConfig,
          "prompt_fraction must lie in [0, 1]");

  // Units: groups of triples that must share a split.
  std::vector<std::vector<Triple>> units;
  if (config.mode == SplitMode::kContent) {
    std::map<Fact, std::size_t> pos;
    for (const Triple& t : store.triples()) {
      auto [it, inserted] = pos.emplace(t.fact(), units.size());
      if (inserted) units.emplace_back();
      units[it->second].push_back(t);
    }
  } else {
    for (const Triple& t : store.triples()) units.push_back({t});
  }

  Rng rng(fork_seed(config.seed, "split"));
  std::vector<std::size_t> order(units.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  // Support = number of units containing the symbol that are not (yet) held out.
  std::unordered_map<EntityId, std::size_t> ent_support;
  std::unordered_map<RelationId, std::size_t> rel_support;
  auto unit_entities = [&](const std::vector<Triple>& u) {
    const Triple& t = u.front();
    return t.head == t.tail ? std::vector<EntityId>{t.head} : std::vector<EntityId>{t.head, t.tail};
  };
  for (const auto& u : units) {
    for (EntityId e : unit_entities(u)) ++ent_support[e];
    ++rel_support[u.front().relation];
  }

  const std::size_t n = store.triples().size();
  const auto target_test = static_cast<std::size_t>(std::llround(config.test * static_cast<double>(n)));
  const auto target_valid = static_cast<std::size_t>(std::llround(config.valid * static_cast<double>(n)));

  enum Slot : std::uint8_t { kTrain, kValid, kTest };
  std::vector<Slot> slot(units.size(), kTrain);
  std::size_t test_count = 0;
  std::size_t valid_count = 0;
  Split out;

  for (std::size_t idx : order) {
    const auto& u = units[idx];
    Slot want = kTrain;
    if (test_count + u.size() <= target_test) {
      want = kTest;
    } else if (valid_count + u.size() <= target_valid) {
      want = kValid;
    }
    if (want == kTrain) continue;
    bool ok = rel_support[u.front().relation] >= 2;
    for (EntityId e : unit_entities(u)) ok = ok && ent_support[e] >= 2;
    if (!ok) {
      ++out.closure_reassigned;
      continue;
    }
    for (EntityId e : unit_entities(u)) --ent_support[e];
    --rel_support[u.front().relation];
    slot[idx] = want;
    (want == kTest ? test_count : valid_count) += u.size();
  }

  // Carve the prompt subset from the validation pool, in shuffled order.
  std::vector<std::size_t> valid_units;
  std::size_t valid_triples = 0;
  for (std::size_t idx : order) {
    if (slot[idx] == kValid) {
      valid_units.push_back(idx);
      valid_triples += units[idx].size();
    }
  }
  const auto target_prompt = static_cast<std::size_t>(
      std::llround(config.prompt_fraction * static_cast<double>(valid_triples)));
  std::size_t prompt_count = 0;
  std::set<std::size_t> prompt_units;
  for (std::size_t idx : valid_units) {
    if (prompt_count + units[idx].size() <= target_prompt) {
      prompt_units.insert(idx);
      prompt_count += units[idx].size();
    }
  }

  for (std::size_t idx = 0; idx < units.size(); ++idx) {
    std::vector<Triple>* dst = &out.train;
    if (slot[idx] == kTest) dst = &out.test;
    if (slot[idx] == kValid) dst = prompt_units.contains(idx) ? &out.prompt_subset : &out.validation;
    dst->insert(dst->end(), units[idx].begin(), units[idx].end());
  }
  for (auto* v : {&out.train, &out.validation, &out.test, &out.prompt_subset}) {
    std::sort(v->begin(), v->end());
  }
  return out;
}

struct ShareRecord {
  Triple triple;
  std::vector<Language> shared_in;
};

/// For each test triple, the languages in which its content occurs in train.
inline std::vector<ShareRecord> share_manifest(const Split& split) {
  std::map<Fact, std::set<Language>> train_langs;
  for (const Triple& t : split.train) train_langs[t.fact()].insert(t.language);
  std::vector<ShareRecord> out;
  for (const Triple& t : split.test) {
    ShareRecord rec{t, {}};
    if (auto it = train_langs.find(t.fact()); it != train_langs.end()) {
      rec.shared_in.assign(it->second.begin(), it->second.end());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace mkgc
