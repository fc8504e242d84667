#pragma once

// Analytic forward cost, counted in multiply-adds (one MAC = one FLOP here).
// Comparative only: the token count is whatever the caller passes.
//
// Per block and token:
//   host     = d*d (mixing map) + din*dout (frozen dense map)
//   adapter  = r*din (A) + dout*r (B) + N_g*din (R_g) + N_b*din (R_k) + N_b*r (R_l)
// total = n_blocks * tokens * (host + adapter) + readout,
// readout = d*d + candidates*d when candidates > 0.
// An adapter with rank 0 or no groups costs nothing.

#include <cstddef>

#include "mkgc/error.hpp"
#include "mkgc/kg/io.hpp"
#include "mkgc/selector/selector.hpp"

namespace mkgc {

struct FlopModel {
  std::size_t hidden = 64;  // d, size of the mixing map
  std::size_t din = 64;
  std::size_t dout = 64;
  std::size_t rank = 4;
  std::size_t n_groups = 4;
  std::size_t experts_per_group = 2;
  std::size_t n_blocks = 2;
  std::size_t readout_candidates = 0;
};

inline FlopModel flop_model(const SelectorConfig& s, std::size_t candidates = 0) {
  return {s.hidden, s.hidden, s.hidden, s.adapter.rank, s.adapter.n_groups, s.adapter.experts_per_group,
          s.n_blocks, candidates};
}

struct FlopReport {
  double host = 0.0;
  double adapter = 0.0;
  double readout = 0.0;
  double total = 0.0;
  double tokens = 0.0;
};

inline FlopReport report_flops(const FlopModel& m, double avg_tokens) {
  require(m.hidden > 0 && m.din > 0 && m.dout > 0 && m.n_blocks > 0, ErrorKind::kInvalidArgument,
          "report_flops: host dimensions must be positive");
  require(avg_tokens > 0.0, ErrorKind::kInvalidArgument, "report_flops: avg_tokens must be positive");
  const auto d = static_cast<double>(m.hidden);
  const auto din = static_cast<double>(m.din);
  const auto dout = static_cast<double>(m.dout);
  const auto r = static_cast<double>(m.rank);
  const auto ng = static_cast<double>(m.n_groups);
  const auto nb = static_cast<double>(m.experts_per_group);
  const double per = static_cast<double>(m.n_blocks) * avg_tokens;
  FlopReport f;
  f.tokens = avg_tokens;
  f.host = per * (d * d + din * dout);
  if (m.rank > 0 && m.n_groups > 0 && m.experts_per_group > 0) {
    f.adapter = per * (r * din + dout * r + ng * din + nb * din + nb * r);
  }
  if (m.readout_candidates > 0) f.readout = d * d + static_cast<double>(m.readout_candidates) * d;
  f.total = f.host + f.adapter + f.readout;
  return f;
}

inline json to_json(const FlopReport& f) {
  return {{"host", f.host}, {"adapter", f.adapter}, {"readout", f.readout}, {"total", f.total}, {"tokens", f.tokens}};
}

}  // namespace mkgc
