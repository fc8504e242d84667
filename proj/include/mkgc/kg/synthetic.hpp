#pragma once

// Synthetic multilingual KG with learnable structure.
//
// Every entity carries a hidden sign pattern z in {-1,+1}^d, written out in
// its description as attribute tokens ("a3+ a7- ..."). Each relation owns a
// low-rank real matrix R = U V^T, and the tail of (h, r) is the entity that
// maximises z_e . (R z_h) over e != h (ties to the lowest id). A fact is
// emitted either in every language (shared) or in exactly one.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/kg/store.hpp"
#include "mkgc/numerics/matrix.hpp"
#include "mkgc/random.hpp"

namespace mkgc {

struct SyntheticConfig {
  std::size_t n_entities = 200;
  std::size_t n_relations = 8;
  std::vector<Language> languages = {"en", "fr"};
  double shared_fraction = 0.5;
  std::uint64_t seed = 0;
  /// Distinct (head, relation) facts per entity on average.
  double facts_per_entity = 4.0;
  std::size_t attributes = 10;
  std::size_t relation_rank = 3;
  /// Relative weight of each language for single-language facts (uniform if empty).
  std::vector<double> language_weights;
};

struct ManifestEntry {
  Triple triple;
  std::vector<Language> shared_in;
};

struct SyntheticKG {
  KGStore store;
  std::vector<ManifestEntry> manifest;
  std::size_t facts = 0;
  std::size_t shared_facts = 0;
};

namespace detail {

struct LanguageWords {
  std::string entity;
  std::string relation;
  std::string attributes;
};

inline LanguageWords words_for(const Language& lang) {
  static const std::map<Language, LanguageWords> kWords = {
      {"en", {"Entity", "relation", "attributes:"}},
      {"fr", {"Entité", "rapport", "attributs:"}},
      {"it", {"Entità", "relazione", "attributi:"}},
      {"ja", {"エンティティ", "関係", "属性:"}},
      {"zh", {"实体", "关系", "属性："}},
  };
  if (auto it = kWords.find(lang); it != kWords.end()) return it->second;
  return {lang + ":entity", lang + ":relation", lang + ":attributes"};
}

}  // namespace detail

inline SyntheticKG gen_synthetic(const SyntheticConfig& config) {
  require(config.shared_fraction >= 0.0 && config.shared_fraction <= 1.0, ErrorKind::kConfig,
          "shared_fraction must lie in [0, 1]");
  require(config.n_entities >= 2, ErrorKind::kConfig, "need at least 2 entities");
  require(config.n_relations >= 1, ErrorKind::kConfig, "need at least 1 relation");
  require(!config.languages.empty(), ErrorKind::kConfig, "need at least one language");
  require(config.attributes >= 1 && config.attributes <= 62, ErrorKind::kConfig,
          "attributes must lie in [1, 62]");
  require(config.relation_rank >= 1, ErrorKind::kConfig, "relation_rank must be positive");
  require(config.facts_per_entity > 0.0, ErrorKind::kConfig, "facts_per_entity must be positive");
  require(config.language_weights.empty() ||
              config.language_weights.size() == config.languages.size(),
          ErrorKind::kConfig, "language_weights must match languages");
  const auto n_facts = static_cast<std::size_t>(
      std::llround(config.facts_per_entity * static_cast<double>(config.n_entities)));
  require(n_facts >= 1 && n_facts <= config.n_entities * config.n_relations, ErrorKind::kConfig,
          "requested " + std::to_string(n_facts) + " facts but only " +
              std::to_string(config.n_entities * config.n_relations) +
              " distinct (head, relation) pairs exist");

  Rng rng(fork_seed(config.seed, "synthetic"));
  const std::size_t d = config.attributes;

  std::vector<std::vector<int>> signs(config.n_entities, std::vector<int>(d));
  for (auto& z : signs)
    for (int& s : z) s = rng.bernoulli(0.5) ? 1 : -1;

  std::vector<Matrix> rel_maps;
  for (std::size_t r = 0; r < config.n_relations; ++r) {
    const Matrix u = Matrix::gaussian(d, config.relation_rank, 1.0, rng);
    const Matrix v = Matrix::gaussian(d, config.relation_rank, 1.0, rng);
    rel_maps.push_back(matmul(u, transpose(v)));
  }

  KGStore::Builder builder(config.languages);
  for (std::size_t e = 0; e < config.n_entities; ++e) {
    Entity ent;
    ent.id = static_cast<EntityId>(e);
    std::string attrs;
    for (std::size_t k = 0; k < d; ++k) {
      attrs += " a" + std::to_string(k) + (signs[e][k] > 0 ? "+" : "-");
    }
    for (const auto& lang : config.languages) {
      const auto w = detail::words_for(lang);
      ent.labels[lang] = w.entity + " " + std::to_string(e);
      ent.descriptions[lang] = w.attributes + attrs;
    }
    builder.add_entity(std::move(ent));
  }
  for (std::size_t r = 0; r < config.n_relations; ++r) {
    Relation rel;
    rel.id = static_cast<RelationId>(r);
    for (const auto& lang : config.languages) {
      rel.labels[lang] = detail::words_for(lang).relation + " " + std::to_string(r);
    }
    builder.add_relation(std::move(rel));
  }

  const auto pair_ids = rng.sample_indices(config.n_entities * config.n_relations, n_facts);
  std::vector<Fact> facts;
  facts.reserve(n_facts);
  for (std::size_t pid : pair_ids) {
    const std::size_t h = pid / config.n_relations;
    const std::size_t r = pid % config.n_relations;
    std::vector<double> zh(signs[h].begin(), signs[h].end());
    const Vector target = matvec(rel_maps[r], Vector(zh));
    std::size_t best = h == 0 ? 1 : 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < config.n_entities; ++e) {
      if (e == h) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += signs[e][k] * target[k];
      if (s > best_score) {
        best_score = s;
        best = e;
      }
    }
    facts.push_back(Fact{static_cast<EntityId>(h), static_cast<RelationId>(r),
                         static_cast<EntityId>(best)});
  }

  const auto n_shared = static_cast<std::size_t>(
      std::llround(config.shared_fraction * static_cast<double>(n_facts)));
  const auto shared_pick = rng.sample_indices(n_facts, n_shared);
  std::vector<bool> shared(n_facts, false);
  for (std::size_t i : shared_pick) shared[i] = true;

  std::vector<double> cumulative;
  double acc = 0.0;
  for (std::size_t i = 0; i < config.languages.size(); ++i) {
    acc += config.language_weights.empty() ? 1.0 : config.language_weights[i];
    cumulative.push_back(acc);
  }

  std::map<Fact, std::vector<Language>> where;
  for (std::size_t i = 0; i < n_facts; ++i) {
    const Fact& f = facts[i];
    if (shared[i]) {
      where[f] = config.languages;
    } else {
      const double u = rng.uniform() * acc;
      std::size_t li = 0;
      while (li + 1 < cumulative.size() && u >= cumulative[li]) ++li;
      where[f] = {config.languages[li]};
    }
    for (const auto& lang : where[f]) {
      builder.add_triple(Triple{f.head, f.relation, f.tail, lang});
    }
  }

  SyntheticKG out{std::move(builder).build(), {}, n_facts, n_shared};
  for (const Triple& t : out.store.triples()) {
    auto langs = where[t.fact()];
    std::sort(langs.begin(), langs.end());
    out.manifest.push_back({t, std::move(langs)});
  }
  return out;
}

inline json to_json(const Triple& t) {
  return {{"h", t.head}, {"r", t.relation}, {"t", t.tail}, {"lang", t.language}};
}

inline void write_manifest_jsonl(const std::filesystem::path& path,
                                 const std::vector<ManifestEntry>& manifest) {
  auto out = detail::open_output(path);
  for (const auto& m : manifest) {
    out << json{{"triple", to_json(m.triple)}, {"shared_in", m.shared_in}}.dump() << '\n';
  }
}

}  // namespace mkgc
