#pragma once

// Textual prompts [query; description; neighbours; candidates] for export,
// audit, or an external scorer. The layout is a versioned constant: changing
// any literal below means bumping kPromptTemplateVersion.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/kg/index.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/kg/store.hpp"
#include "mkgc/kge/transe.hpp"
#include "mkgc/log.hpp"
#include "mkgc/random.hpp"
#include "mkgc/text.hpp"

namespace mkgc {

inline constexpr std::string_view kPromptTemplateVersion = "mkgc-prompt/1";

namespace prompt_template {
inline constexpr std::string_view kQueryLead = "Given a triplet with a missing tail entity t: ";
inline constexpr std::string_view kDescriptionLead = "The following provides descriptive information about entity ";
inline constexpr std::string_view kNeighborLead = "Here are some triplets containing entity ";
inline constexpr std::string_view kCandidateLead =
    "What is the entity name of t? Select one from the list of entities below: ";
inline constexpr std::string_view kAnswer = "[Answer]: ";
inline constexpr std::string_view kSeparator = "; ";
}  // namespace prompt_template

struct PromptConfig {
  std::size_t n_neighbors = 6;
  /// Description budget in code points.
  std::size_t desc_limit = 256;
  /// Keep the neighbour header (with an empty list) when no neighbours are shown.
  bool keep_empty_neighbor_block = true;
  /// Training mode: move the gold to a seeded uniform position.
  bool shuffle_gold = false;
  std::uint64_t seed = 0;
};

struct Prompt {
  std::string query_text;
  std::string description_text;
  std::string neighbor_text;
  std::string candidate_text;
  std::string rendered;
  std::vector<EntityId> candidates;  // order as rendered
  std::vector<std::string> candidate_names;
};

/// Holds the per-language label tables and the neighbour index.
class PromptBuilder {
 public:
  /// `train` supplies neighbour triples; one triple per distinct fact is kept
  /// so a fact present in several languages is not shown twice.
  PromptBuilder(const KGStore& store, std::span<const Triple> train) : store_(store) {
    std::set<Fact> seen;
    std::vector<Triple> facts;
    for (const Triple& t : train) {
      if (seen.insert(t.fact()).second) facts.push_back(Triple{t.head, t.relation, t.tail, ""});
    }
    facts_ = TripleIndex(facts);
  }

  /// Label as shown in `lang`; labels shared by several entities get " (id)".
  std::string display_name(EntityId id, const Language& lang) {
    bool fell_back = false;
    std::string label = store_.entity_label(id, lang, &fell_back);
    if (fell_back) warn("prompt: entity " + std::to_string(id) + " has no '" + lang + "' label; using another language");
    const auto& counts = label_counts(lang);
    auto it = counts.find(label);
    if (label.empty() || (it != counts.end() && it->second > 1)) label += " (" + std::to_string(id) + ")";
    return label;
  }

  std::string relation_name(RelationId id, const Language& lang) {
    bool fell_back = false;
    std::string label = store_.relation_label(id, lang, &fell_back);
    if (fell_back) {
      warn("prompt: relation " + std::to_string(id) + " has no '" + lang + "' label; using another language");
    }
    return label;
  }

  /// Inverse of display_name over the store. Unknown or ambiguous names are not-found.
  EntityId resolve(std::string_view name, const Language& lang) {
    const auto& by_label = label_ids(lang);
    if (name.size() > 3 && name.back() == ')') {
      const auto open = name.rfind(" (");
      if (open != std::string_view::npos) {
        const auto id = detail::parse_id(name.substr(open + 2, name.size() - open - 3));
        if (id && store_.has_entity(*id) && display_name(*id, lang) == name) return *id;
      }
    }
    auto it = by_label.find(std::string(name));
    if (it != by_label.end() && it->second.size() == 1 && display_name(it->second.front(), lang) == name) {
      return it->second.front();
    }
    fail(ErrorKind::kNotFound, "prompt: name '" + std::string(name) + "' does not identify one entity");
  }

  Prompt build(const Query& query, std::span<const EntityId> candidates, std::optional<EntityId> gold,
               const PromptConfig& config) {
    namespace pt = prompt_template;
    (void)store_.entity(query.head);
    (void)store_.relation(query.relation);
    const Language& lang = query.language;
    Prompt p;
    p.candidates.assign(candidates.begin(), candidates.end());
    {
      std::set<EntityId> distinct(p.candidates.begin(), p.candidates.end());
      require(distinct.size() == p.candidates.size(), ErrorKind::kInvalidArgument, "prompt: duplicate candidates");
    }
    if (config.shuffle_gold && gold) {
      auto it = std::find(p.candidates.begin(), p.candidates.end(), *gold);
      if (it != p.candidates.end()) {
        p.candidates.erase(it);
        Rng rng(fork_seed(fork_seed(config.seed, "prompt-gold"),
                          (static_cast<std::uint64_t>(query.head) << 32) ^ query.relation));
        const std::size_t pos = rng.below(p.candidates.size() + 1);
        p.candidates.insert(p.candidates.begin() + static_cast<std::ptrdiff_t>(pos), *gold);
      }
    }

    const std::string head = display_name(query.head, lang);
    p.query_text = std::string(pt::kQueryLead) + "(" + head + ", " + relation_name(query.relation, lang) + ", t).";

    bool desc_fell_back = false;
    const std::string desc = store_.description(query.head, lang, &desc_fell_back);
    if (desc_fell_back) warn("prompt: entity " + std::to_string(query.head) + " has no '" + lang + "' description");
    p.description_text =
        std::string(pt::kDescriptionLead) + head + ":\n" + head + ", " + utf8_truncate(desc, config.desc_limit);

    const auto nbrs = neighbors(store_, facts_, query.head, config.n_neighbors, config.seed);
    if (!nbrs.empty() || config.keep_empty_neighbor_block) {
      std::string list;
      for (std::size_t i = 0; i < nbrs.size(); ++i) {
        if (i > 0) list += pt::kSeparator;
        list += "(" + display_name(nbrs[i].head, lang) + ", " + relation_name(nbrs[i].relation, lang) + ", " +
                display_name(nbrs[i].tail, lang) + ")";
      }
      p.neighbor_text = std::string(pt::kNeighborLead) + head + ":\n[" + list + "]";
    }

    std::string list;
    for (std::size_t i = 0; i < p.candidates.size(); ++i) {
      p.candidate_names.push_back(display_name(p.candidates[i], lang));
      if (i > 0) list += pt::kSeparator;
      list += p.candidate_names.back();
    }
    p.candidate_text = std::string(pt::kCandidateLead) + "[" + list + "]";

    p.rendered = p.query_text + "\n\n" + p.description_text + "\n\n";
    if (!p.neighbor_text.empty()) p.rendered += p.neighbor_text + "\n\n";
    p.rendered += p.candidate_text + "\n\n" + std::string(pt::kAnswer);
    return p;
  }

 private:
  const std::unordered_map<std::string, std::size_t>& label_counts(const Language& lang) {
    auto it = counts_.find(lang);
    if (it != counts_.end()) return it->second;
    auto& c = counts_[lang];
    for (const auto& e : store_.entities()) ++c[store_.entity_label(e.id, lang)];
    return c;
  }

  const std::unordered_map<std::string, std::vector<EntityId>>& label_ids(const Language& lang) {
    auto it = ids_.find(lang);
    if (it != ids_.end()) return it->second;
    auto& m = ids_[lang];
    for (const auto& e : store_.entities()) m[store_.entity_label(e.id, lang)].push_back(e.id);
    return m;
  }

  const KGStore& store_;
  TripleIndex facts_;
  std::map<Language, std::unordered_map<std::string, std::size_t>> counts_;
  std::map<Language, std::unordered_map<std::string, std::vector<EntityId>>> ids_;
};

inline Prompt build_prompt(const Query& query, const KGStore& store, std::span<const Triple> train,
                           std::span<const EntityId> candidates, std::optional<EntityId> gold,
                           const PromptConfig& config) {
  PromptBuilder builder(store, train);
  return builder.build(query, candidates, gold, config);
}

/// Candidate names from a rendered prompt, split on the list separator.
inline std::vector<std::string> parse_candidate_names(std::string_view rendered) {
  namespace pt = prompt_template;
  const auto lead = rendered.find(pt::kCandidateLead);
  require(lead != std::string_view::npos, ErrorKind::kParse, "prompt: candidate block not found");
  const std::size_t open = lead + pt::kCandidateLead.size();
  require(open < rendered.size() && rendered[open] == '[', ErrorKind::kParse, "prompt: candidate list not bracketed");
  const auto close = rendered.find("]\n\n" + std::string(pt::kAnswer), open);
  require(close != std::string_view::npos, ErrorKind::kParse, "prompt: candidate list not terminated");
  const std::string_view body = rendered.substr(open + 1, close - open - 1);
  std::vector<std::string> out;
  if (body.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto sep = body.find(pt::kSeparator, start);
    out.emplace_back(body.substr(start, sep == std::string_view::npos ? std::string_view::npos : sep - start));
    if (sep == std::string_view::npos) break;
    start = sep + pt::kSeparator.size();
  }
  return out;
}

inline json to_json(const Prompt& p, const Query& q, std::optional<EntityId> gold) {
  json j{{"query", {{"h", q.head}, {"r", q.relation}, {"lang", q.language}}},
         {"prompt", p.rendered},
         {"candidates", p.candidates},
         {"template", kPromptTemplateVersion}};
  j["gold"] = gold ? json(*gold) : json(nullptr);
  return j;
}

/// One JSON line per candidate list: {query, prompt, gold, candidates, template}.
inline void export_prompts_jsonl(const std::filesystem::path& path, const KGStore& store,
                                 std::span<const Triple> train, std::span<const CandidateList> lists,
                                 const PromptConfig& config) {
  PromptBuilder builder(store, train);
  auto out = detail::open_output(path);
  for (const auto& l : lists) {
    const Prompt p = builder.build(l.query, l.entities, l.gold, config);
    out << to_json(p, l.query, l.gold).dump() << '\n';
  }
}

}  // namespace mkgc
