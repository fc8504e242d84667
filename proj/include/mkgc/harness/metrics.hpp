#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "mkgc/error.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/kg/store.hpp"

namespace mkgc {

struct RankRecord {
  std::size_t rank = 1;
  Language language;
};

struct Metrics {
  double h1 = 0.0;
  double h3 = 0.0;
  double h10 = 0.0;
  double mrr = 0.0;
  std::size_t n = 0;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

struct MetricsReport {
  std::map<Language, Metrics> per_language;
  /// Unweighted mean over languages; avg.n is the total sample count.
  Metrics avg;
  std::string config_digest;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline MetricsReport compute_metrics(std::span<const RankRecord> ranks) {
  require(!ranks.empty(), ErrorKind::kInvalidArgument, "compute_metrics: no ranks");
  std::map<Language, Metrics> sums;
  for (const auto& r : ranks) {
    require(r.rank >= 1, ErrorKind::kInvalidArgument, "compute_metrics: ranks are 1-based");
    Metrics& m = sums[r.language];
    m.h1 += r.rank <= 1;
    m.h3 += r.rank <= 3;
    m.h10 += r.rank <= 10;
    m.mrr += 1.0 / static_cast<double>(r.rank);
    ++m.n;
  }
  MetricsReport report;
  for (auto& [lang, m] : sums) {
    const auto n = static_cast<double>(m.n);
    m.h1 /= n;
    m.h3 /= n;
    m.h10 /= n;
    m.mrr /= n;
    report.avg.h1 += m.h1;
    report.avg.h3 += m.h3;
    report.avg.h10 += m.h10;
    report.avg.mrr += m.mrr;
    report.avg.n += m.n;
  }
  const auto langs = static_cast<double>(sums.size());
  report.avg.h1 /= langs;
  report.avg.h3 /= langs;
  report.avg.h10 /= langs;
  report.avg.mrr /= langs;
  report.per_language = std::move(sums);
  return report;
}

inline json to_json(const Metrics& m) { return {{"h1", m.h1}, {"h3", m.h3}, {"h10", m.h10}, {"mrr", m.mrr}}; }

/// {metrics: {lang: {h1,h3,h10,mrr}}, avg: {...}, config_digest, n, counts: {lang: n}}
inline json to_json(const MetricsReport& r) {
  json metrics = json::object();
  json counts = json::object();
  for (const auto& [lang, m] : r.per_language) {
    metrics[lang] = to_json(m);
    counts[lang] = m.n;
  }
  return {{"metrics", metrics}, {"avg", to_json(r.avg)}, {"config_digest", r.config_digest},
          {"n", r.avg.n},       {"counts", counts}};
}

inline MetricsReport metrics_report_from_json(const json& j) {
  MetricsReport r;
  try {
    auto read = [](const json& m) {
      return Metrics{m.at("h1").get<double>(), m.at("h3").get<double>(), m.at("h10").get<double>(),
                     m.at("mrr").get<double>(), 0};
    };
    for (const auto& [lang, m] : j.at("metrics").items()) {
      r.per_language[lang] = read(m);
      r.per_language[lang].n = j.contains("counts") ? j.at("counts").at(lang).get<std::size_t>() : 0;
    }
    r.avg = read(j.at("avg"));
    r.avg.n = j.at("n").get<std::size_t>();
    r.config_digest = j.at("config_digest").get<std::string>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kParse, std::string("metrics report: ") + e.what());
  }
  return r;
}

}  // namespace mkgc
