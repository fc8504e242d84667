#pragma once

// Expert selection frequencies from a routing log, as CSV-ready tables.
// Experts are flattened as group * experts_per_group + member.

#include <algorithm>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/moe/klgmoe.hpp"

namespace mkgc {

struct FrequencyTable {
  std::size_t n_layers = 0;
  std::size_t n_groups = 0;
  std::size_t experts_per_group = 0;
  std::vector<std::string> keys;  // column labels (languages or relation ids), sorted
  /// counts[layer][expert][key]
  std::vector<std::vector<std::vector<std::size_t>>> counts;

  std::size_t n_experts() const { return n_groups * experts_per_group; }

  std::size_t key_total(std::size_t layer, std::size_t key) const {
    std::size_t s = 0;
    for (const auto& row : counts[layer]) s += row[key];
    return s;
  }
};

struct RoutingAnalysis {
  FrequencyTable by_language;
  FrequencyTable by_relation;
  /// Probability that two samples routed in the same layer pick the same
  /// expert, for pairs sharing a relation vs pairs with different relations.
  /// Pooled over layers; nullopt when no such pair exists.
  std::optional<double> within_relation_agreement;
  std::optional<double> cross_relation_agreement;
};

namespace detail {

inline FrequencyTable frequency_table(std::span<const RoutingRecord> log, std::size_t n_layers, std::size_t n_groups,
                                      std::size_t per_group, const std::vector<std::string>& keys,
                                      const std::function<std::string(const RoutingRecord&)>& key_of) {
  FrequencyTable t{n_layers, n_groups, per_group, keys, {}};
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < keys.size(); ++i) col[keys[i]] = i;
  t.counts.assign(n_layers, std::vector<std::vector<std::size_t>>(n_groups * per_group,
                                                                  std::vector<std::size_t>(keys.size(), 0)));
  for (const auto& r : log) {
    ++t.counts[r.layer][r.decision.group * per_group + r.decision.expert][col.at(key_of(r))];
  }
  return t;
}

inline double pairs(std::size_t n) { return 0.5 * static_cast<double>(n) * static_cast<double>(n > 0 ? n - 1 : 0); }

}  // namespace detail

inline RoutingAnalysis export_routing_analysis(std::span<const RoutingRecord> log) {
  require(!log.empty(), ErrorKind::kInvalidArgument, "routing analysis: empty decision log");
  std::size_t n_layers = 0;
  const std::size_t n_groups = log.front().decision.group_scores.dim();
  const std::size_t per_group = log.front().decision.sk.dim();
  std::set<std::string> langs;
  std::set<std::uint32_t> rels;
  for (const auto& r : log) {
    require(r.decision.group_scores.dim() == n_groups && r.decision.sk.dim() == per_group, ErrorKind::kInvalidArgument,
            "routing analysis: records disagree on the expert layout");
    require(r.decision.group < n_groups && r.decision.expert < per_group, ErrorKind::kInvalidArgument,
            "routing analysis: expert index out of range");
    n_layers = std::max(n_layers, r.layer + 1);
    langs.insert(r.language);
    rels.insert(r.relation);
  }
  std::vector<std::string> lang_keys(langs.begin(), langs.end());
  std::vector<std::string> rel_keys;
  for (auto r : rels) rel_keys.push_back(std::to_string(r));

  RoutingAnalysis a;
  a.by_language = detail::frequency_table(log, n_layers, n_groups, per_group, lang_keys,
                                          [](const RoutingRecord& r) { return r.language; });
  a.by_relation = detail::frequency_table(log, n_layers, n_groups, per_group, rel_keys,
                                          [](const RoutingRecord& r) { return std::to_string(r.relation); });

  // Pair counting on the relation table: same-expert pairs split into
  // same-relation and different-relation pairs.
  double same_rel_pairs = 0.0, same_rel_agree = 0.0, cross_pairs = 0.0, cross_agree = 0.0;
  const auto& t = a.by_relation;
  for (std::size_t l = 0; l < t.n_layers; ++l) {
    std::size_t layer_total = 0;
    double rel_pairs = 0.0;
    for (std::size_t k = 0; k < t.keys.size(); ++k) {
      const std::size_t n = t.key_total(l, k);
      layer_total += n;
      rel_pairs += detail::pairs(n);
    }
    double agree_same = 0.0, agree_all = 0.0;
    for (const auto& row : t.counts[l]) {
      std::size_t expert_total = 0;
      for (std::size_t c : row) {
        agree_same += detail::pairs(c);
        expert_total += c;
      }
      agree_all += detail::pairs(expert_total);
    }
    same_rel_pairs += rel_pairs;
    same_rel_agree += agree_same;
    cross_pairs += detail::pairs(layer_total) - rel_pairs;
    cross_agree += agree_all - agree_same;
  }
  if (same_rel_pairs > 0.0) a.within_relation_agreement = same_rel_agree / same_rel_pairs;
  if (cross_pairs > 0.0) a.cross_relation_agreement = cross_agree / cross_pairs;
  return a;
}

/// `layer,expert,group,member,<key>...`, one row per (layer, expert).
inline void write_frequency_csv(const std::filesystem::path& path, const FrequencyTable& t) {
  auto out = detail::open_output(path);
  out << "layer,expert,group,member";
  for (const auto& k : t.keys) out << ',' << k;
  out << '\n';
  for (std::size_t l = 0; l < t.n_layers; ++l) {
    for (std::size_t e = 0; e < t.n_experts(); ++e) {
      out << l << ',' << e << ',' << e / t.experts_per_group << ',' << e % t.experts_per_group;
      for (std::size_t c : t.counts[l][e]) out << ',' << c;
      out << '\n';
    }
  }
}

inline json summary_json(const RoutingAnalysis& a) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"layers", a.by_language.n_layers},
          {"experts", a.by_language.n_experts()},
          {"languages", a.by_language.keys},
          {"relations", a.by_relation.keys},
          {"within_relation_agreement", opt(a.within_relation_agreement)},
          {"cross_relation_agreement", opt(a.cross_relation_agreement)}};
}

}  // namespace mkgc
