#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mkgc/error.hpp"

namespace mkgc {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;
using Language = std::string;

struct Entity {
  EntityId id = 0;
  std::map<Language, std::string> labels;
  std::map<Language, std::string> descriptions;

  friend bool operator==(const Entity&, const Entity&) = default;
};

struct Relation {
  RelationId id = 0;
  std::map<Language, std::string> labels;

  friend bool operator==(const Relation&, const Relation&) = default;
};

/// Language-independent fact content.
struct Fact {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend auto operator<=>(const Fact&, const Fact&) = default;
};

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;
  Language language;

  Fact fact() const { return {head, relation, tail}; }

  friend auto operator<=>(const Triple&, const Triple&) = default;
  friend bool operator==(const Triple&, const Triple&) = default;
};

struct LanguageStats {
  std::size_t triples = 0;
  std::size_t entities = 0;
  std::size_t relations = 0;
};

struct StoreStats {
  std::map<Language, LanguageStats> per_language;
  std::size_t entities = 0;
  std::size_t relations = 0;
  std::size_t triples = 0;
};

/// Immutable multilingual knowledge graph. Construct through KGStore::Builder.
class KGStore {
 public:
  class Builder;

  KGStore() = default;

  const std::vector<Language>& languages() const noexcept { return languages_; }
  bool has_language(const Language& lang) const {
    return std::find(languages_.begin(), languages_.end(), lang) != languages_.end();
  }

  const std::vector<Entity>& entities() const noexcept { return entities_; }
  const std::vector<Relation>& relations() const noexcept { return relations_; }
  /// Canonical order: (head, relation, tail, language).
  const std::vector<Triple>& triples() const noexcept { return triples_; }

  bool has_entity(EntityId id) const { return entity_pos_.contains(id); }
  bool has_relation(RelationId id) const { return relation_pos_.contains(id); }

  const Entity& entity(EntityId id) const { return entities_[entity_index(id)]; }
  const Relation& relation(RelationId id) const { return relations_[relation_index(id)]; }

  /// Dense 0-based position among entities sorted by id.
  std::size_t entity_index(EntityId id) const {
    auto it = entity_pos_.find(id);
    if (it == entity_pos_.end()) fail(ErrorKind::kNotFound, "unknown entity id " + std::to_string(id));
    return it->second;
  }

  std::size_t relation_index(RelationId id) const {
    auto it = relation_pos_.find(id);
    if (it == relation_pos_.end()) {
      fail(ErrorKind::kNotFound, "unknown relation id " + std::to_string(id));
    }
    return it->second;
  }

  std::size_t entity_count() const noexcept { return entities_.size(); }
  std::size_t relation_count() const noexcept { return relations_.size(); }

  /// Label in `lang`, else the first available label. `fell_back` reports which happened.
  std::string entity_label(EntityId id, const Language& lang, bool* fell_back = nullptr) const {
    return pick_text(entity(id).labels, lang, fell_back);
  }

  std::string relation_label(RelationId id, const Language& lang, bool* fell_back = nullptr) const {
    return pick_text(relation(id).labels, lang, fell_back);
  }

  std::string description(EntityId id, const Language& lang, bool* fell_back = nullptr) const {
    const auto& d = entity(id).descriptions;
    if (d.empty()) {
      if (fell_back) *fell_back = false;
      return {};
    }
    return pick_text(d, lang, fell_back);
  }

  StoreStats stats() const {
    StoreStats s;
    s.entities = entities_.size();
    s.relations = relations_.size();
    s.triples = triples_.size();
    std::map<Language, std::set<EntityId>> ents;
    std::map<Language, std::set<RelationId>> rels;
    for (const auto& lang : languages_) s.per_language[lang];
    for (const Triple& t : triples_) {
      ++s.per_language[t.language].triples;
      ents[t.language].insert(t.head);
      ents[t.language].insert(t.tail);
      rels[t.language].insert(t.relation);
    }
    for (auto& [lang, ls] : s.per_language) {
      ls.entities = ents[lang].size();
      ls.relations = rels[lang].size();
    }
    return s;
  }

  friend bool operator==(const KGStore& a, const KGStore& b) {
    return a.languages_ == b.languages_ && a.entities_ == b.entities_ &&
           a.relations_ == b.relations_ && a.triples_ == b.triples_;
  }

 private:
  static std::string pick_text(const std::map<Language, std::string>& texts, const Language& lang,
                               bool* fell_back) {
    if (auto it = texts.find(lang); it != texts.end()) {
      if (fell_back) *fell_back = false;
      return it->second;
    }
    if (fell_back) *fell_back = true;
    if (texts.empty()) return {};
    return texts.begin()->second;
  }

  std::vector<Language> languages_;
  std::vector<Entity> entities_;
  std::vector<Relation> relations_;
  std::vector<Triple> triples_;
  std::unordered_map<EntityId, std::size_t> entity_pos_;
  std::unordered_map<RelationId, std::size_t> relation_pos_;
};

class KGStore::Builder {
 public:
  explicit Builder(std::vector<Language> languages) {
    std::set<Language> seen;
    for (auto& l : languages) {
      require(!l.empty(), ErrorKind::kConfig, "language tag must be non-empty");
      require(seen.insert(l).second, ErrorKind::kConfig, "duplicate language tag '" + l + "'");
    }
    require(!languages.empty(), ErrorKind::kConfig, "at least one language is required");
    store_.languages_ = std::move(languages);
  }

  Builder& add_entity(Entity e) {
    require(!e.labels.empty(), ErrorKind::kInvalidArgument,
            "entity " + std::to_string(e.id) + " has no label");
    require(entity_ids_.insert(e.id).second, ErrorKind::kInvalidArgument,
            "duplicate entity id " + std::to_string(e.id));
    store_.entities_.push_back(std::move(e));
    return *this;
  }

  Builder& add_relation(Relation r) {
    require(relation_ids_.insert(r.id).second, ErrorKind::kInvalidArgument,
            "duplicate relation id " + std::to_string(r.id));
    store_.relations_.push_back(std::move(r));
    return *this;
  }

  bool has_entity(EntityId id) const { return entity_ids_.contains(id); }
  bool has_relation(RelationId id) const { return relation_ids_.contains(id); }
  bool has_language(const Language& l) const { return store_.has_language(l); }

  /// Ids and language must already be registered.
  Builder& add_triple(Triple t) {
    require(store_.has_language(t.language), ErrorKind::kConfig,
            "unknown language tag '" + t.language + "'");
    require(has_entity(t.head), ErrorKind::kNotFound, "dangling head id " + std::to_string(t.head));
    require(has_relation(t.relation), ErrorKind::kNotFound,
            "dangling relation id " + std::to_string(t.relation));
    require(has_entity(t.tail), ErrorKind::kNotFound, "dangling tail id " + std::to_string(t.tail));
    store_.triples_.push_back(std::move(t));
    return *this;
  }

  KGStore build() && {
    auto& s = store_;
    std::sort(s.entities_.begin(), s.entities_.end(),
              [](const Entity& a, const Entity& b) { return a.id < b.id; });
    std::sort(s.relations_.begin(), s.relations_.end(),
              [](const Relation& a, const Relation& b) { return a.id < b.id; });
    std::sort(s.triples_.begin(), s.triples_.end());
    s.triples_.erase(std::unique(s.triples_.begin(), s.triples_.end()), s.triples_.end());
    for (std::size_t i = 0; i < s.entities_.size(); ++i) s.entity_pos_[s.entities_[i].id] = i;
    for (std::size_t i = 0; i < s.relations_.size(); ++i) s.relation_pos_[s.relations_[i].id] = i;
    return std::move(store_);
  }

 private:
  KGStore store_;
  std::set<EntityId> entity_ids_;
  std::set<RelationId> relation_ids_;
};

}  // namespace mkgc
