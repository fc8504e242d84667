#pragma once

// Triples: UTF-8 TSV `head<TAB>relation<TAB>tail<TAB>lang`.
// Labels: JSON lines `{"id":..,"kind":"entity"|"relation","labels":{..},"descriptions":{..}}`.
// Ids are integers; Wikidata-style "Q123"/"P45" strings are accepted and
// the prefix also fixes the record kind.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mkgc/error.hpp"
#include "mkgc/kg/store.hpp"

namespace mkgc {

using json = nlohmann::json;

namespace detail {

inline std::optional<std::uint32_t> parse_id(std::string_view text) {
  if (!text.empty() && (text.front() == 'Q' || text.front() == 'P')) text.remove_prefix(1);
  if (text.empty()) return std::nullopt;
  std::uint32_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  return value;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kIo, "cannot open '" + path.string() + "'");
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write '" + path.string() + "'");
  return out;
}

}  // namespace detail

struct RawTriple {
  Triple triple;
  std::size_t line = 0;
};

/// Parses the TSV. When `languages` is non-empty, unknown tags are config errors.
inline std::vector<RawTriple> read_triples_tsv(const std::filesystem::path& path,
                                               const std::vector<Language>& languages = {}) {
  auto in = detail::open_input(path);
  const std::string name = path.string();
  std::vector<RawTriple> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 4) {
      throw parse_error(name, lineno, "expected 4 tab-separated fields, got " +
                                          std::to_string(fields.size()));
    }
    const auto h = detail::parse_id(fields[0]);
    const auto r = detail::parse_id(fields[1]);
    const auto t = detail::parse_id(fields[2]);
    if (!h) throw parse_error(name, lineno, "bad head id '" + std::string(fields[0]) + "'");
    if (!r) throw parse_error(name, lineno, "bad relation id '" + std::string(fields[1]) + "'");
    if (!t) throw parse_error(name, lineno, "bad tail id '" + std::string(fields[2]) + "'");
    Language lang(fields[3]);
    if (lang.empty()) throw parse_error(name, lineno, "empty language tag");
    if (!languages.empty() && std::find(languages.begin(), languages.end(), lang) == languages.end()) {
      fail(ErrorKind::kConfig,
           name + ":" + std::to_string(lineno) + ": unknown language tag '" + lang + "'");
    }
    out.push_back({Triple{*h, *r, *t, std::move(lang)}, lineno});
  }
  return out;
}

inline void write_triples_tsv(const std::filesystem::path& path, const std::vector<Triple>& triples) {
  auto out = detail::open_output(path);
  for (const Triple& t : triples) {
    out << t.head << '\t' << t.relation << '\t' << t.tail << '\t' << t.language << '\n';
  }
}

struct LabelRecords {
  std::vector<Entity> entities;
  std::vector<Relation> relations;
};

inline LabelRecords read_labels_jsonl(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  const std::string name = path.string();
  LabelRecords out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw parse_error(name, lineno, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object() || !obj.contains("id")) throw parse_error(name, lineno, "missing \"id\"");
    std::string kind = obj.value("kind", "");
    std::optional<std::uint32_t> id;
    const auto& jid = obj["id"];
    if (jid.is_number_unsigned()) {
      id = jid.get<std::uint32_t>();
    } else if (jid.is_string()) {
      const auto s = jid.get<std::string>();
      id = detail::parse_id(s);
      if (kind.empty() && !s.empty() && s.front() == 'P') kind = "relation";
    }
    if (!id) throw parse_error(name, lineno, "bad id " + jid.dump());
    if (kind.empty()) kind = "entity";
    if (kind != "entity" && kind != "relation") {
      throw parse_error(name, lineno, "unknown kind '" + kind + "'");
    }
    auto read_map = [&](const char* key) {
      std::map<Language, std::string> m;
      if (!obj.contains(key)) return m;
      if (!obj[key].is_object()) throw parse_error(name, lineno, std::string(key) + " must be an object");
      for (auto it = obj[key].begin(); it != obj[key].end(); ++it) {
        if (!it.value().is_string()) throw parse_error(name, lineno, "non-string text in " + std::string(key));
        m[it.key()] = it.value().get<std::string>();
      }
      return m;
    };
    if (kind == "entity") {
      Entity e{*id, read_map("labels"), read_map("descriptions")};
      if (e.labels.empty()) throw parse_error(name, lineno, "entity has no labels");
      out.entities.push_back(std::move(e));
    } else {
      out.relations.push_back(Relation{*id, read_map("labels")});
    }
  }
  return out;
}

inline json to_json(const Entity& e) {
  json j = {{"id", e.id}, {"kind", "entity"}, {"labels", e.labels}};
  if (!e.descriptions.empty()) j["descriptions"] = e.descriptions;
  return j;
}

inline json to_json(const Relation& r) {
  return {{"id", r.id}, {"kind", "relation"}, {"labels", r.labels}};
}

inline void write_labels_jsonl(const std::filesystem::path& path, const KGStore& store) {
  auto out = detail::open_output(path);
  for (const Entity& e : store.entities()) out << to_json(e).dump() << '\n';
  for (const Relation& r : store.relations()) out << to_json(r).dump() << '\n';
}

struct IngestConfig {
  std::vector<Language> languages;
};

/// Loads a store, rejecting malformed lines, unknown languages and dangling ids.
inline KGStore ingest(const std::filesystem::path& triples_path,
                      const std::filesystem::path& labels_path, const IngestConfig& config) {
  const auto raw = read_triples_tsv(triples_path, config.languages);
  auto labels = read_labels_jsonl(labels_path);
  KGStore::Builder builder(config.languages);
  for (auto& e : labels.entities) builder.add_entity(std::move(e));
  for (auto& r : labels.relations) builder.add_relation(std::move(r));
  const std::string name = triples_path.string();
  for (const auto& rt : raw) {
    const Triple& t = rt.triple;
    if (!builder.has_entity(t.head)) {
      throw parse_error(name, rt.line, "dangling head id " + std::to_string(t.head));
    }
    if (!builder.has_relation(t.relation)) {
      throw parse_error(name, rt.line, "dangling relation id " + std::to_string(t.relation));
    }
    if (!builder.has_entity(t.tail)) {
      throw parse_error(name, rt.line, "dangling tail id " + std::to_string(t.tail));
    }
    builder.add_triple(t);
  }
  return std::move(builder).build();
}

inline void export_store(const std::filesystem::path& dir, const KGStore& store) {
  write_triples_tsv(dir / "triples.tsv", store.triples());
  write_labels_jsonl(dir / "labels.jsonl", store);
}

inline json to_json(const StoreStats& s) {
  json per = json::object();
  for (const auto& [lang, ls] : s.per_language) {
    per[lang] = {{"triples", ls.triples}, {"entities", ls.entities}, {"relations", ls.relations}};
  }
  return {{"entities", s.entities}, {"relations", s.relations}, {"triples", s.triples},
          {"per_language", per}};
}

}  // namespace mkgc
