#pragma once

// Knowledge-level grouped mixture of low-rank experts on top of a frozen
// projection W0. One (group, expert) pair is chosen per sample from the three
// pooled inputs x_h, x_r, x_t and applied to all three:
//
//   group  i = argmax sum_m softmax(Wg x_m)
//   expert j = argmax [sum_m softmax(Wk x_m) + sum_m softmax(Wl A_i x_m)]
//   y_m      = W0 x_m + g * B_ij A_i x_m
//
// g is 1 in paper-exact mode. In gated mode it is the mean of the six softmax
// probabilities of expert j, so Wk and Wl receive gradient.
//
// Storage: A_i is r x din and B_ij is dout x r, so A_i x is a plain matvec.

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mkgc/error.hpp"
#include "mkgc/numerics/matrix.hpp"
#include "mkgc/numerics/tape.hpp"
#include "mkgc/numerics/tensor_io.hpp"
#include "mkgc/random.hpp"

namespace mkgc {

enum class MoEMode { kPaperExact, kGated };

inline std::string to_string(MoEMode m) { return m == MoEMode::kPaperExact ? "paper_exact" : "gated"; }

inline MoEMode parse_moe_mode(const std::string& s) {
  if (s == "paper_exact") return MoEMode::kPaperExact;
  if (s == "gated") return MoEMode::kGated;
  fail(ErrorKind::kConfig, "unknown adapter mode '" + s + "' (expected paper_exact|gated)");
}

struct KLGMoEConfig {
  std::size_t n_groups = 4;
  std::size_t experts_per_group = 2;
  std::size_t rank = 4;
  std::size_t din = 64;
  std::size_t dout = 64;
  MoEMode mode = MoEMode::kGated;

  void validate() const {
    require(n_groups >= 1, ErrorKind::kConfig, "adapter: n_groups must be >= 1");
    require(experts_per_group >= 1, ErrorKind::kConfig, "adapter: experts_per_group must be >= 1");
    require(rank >= 1, ErrorKind::kConfig, "adapter: rank must be >= 1");
    require(din >= 1 && dout >= 1, ErrorKind::kConfig, "adapter: din and dout must be >= 1");
  }
};

struct ExpertGroup {
  Matrix A;               // rank x din
  std::vector<Matrix> B;  // each dout x rank
};

struct KnowledgeInput {
  Vector h;
  Vector r;
  Vector t;

  std::array<const Vector*, 3> parts() const { return {&h, &r, &t}; }
};

struct KLGMoELayer {
  KLGMoEConfig config;
  Matrix W0;  // dout x din, frozen
  std::vector<ExpertGroup> groups;
  Matrix Wg;  // n_groups x din
  Matrix Wk;  // experts_per_group x din
  Matrix Wl;  // experts_per_group x rank

  /// A and routers Gaussian with std 1/sqrt(fan-in); B zero so the adapter
  /// starts as an exact no-op.
  static KLGMoELayer init(const KLGMoEConfig& config, Matrix w0, Rng& rng) {
    config.validate();
    require(w0.rows() == config.dout && w0.cols() == config.din, ErrorKind::kInvalidArgument,
            "adapter: W0 must be dout x din");
    KLGMoELayer layer;
    layer.config = config;
    layer.W0 = std::move(w0);
    const double sd_in = 1.0 / std::sqrt(static_cast<double>(config.din));
    const double sd_r = 1.0 / std::sqrt(static_cast<double>(config.rank));
    for (std::size_t i = 0; i < config.n_groups; ++i) {
      ExpertGroup g;
      g.A = Matrix::gaussian(config.rank, config.din, sd_in, rng);
      for (std::size_t j = 0; j < config.experts_per_group; ++j) g.B.emplace_back(config.dout, config.rank);
      layer.groups.push_back(std::move(g));
    }
    layer.Wg = Matrix::gaussian(config.n_groups, config.din, sd_in, rng);
    layer.Wk = Matrix::gaussian(config.experts_per_group, config.din, sd_in, rng);
    layer.Wl = Matrix::gaussian(config.experts_per_group, config.rank, sd_r, rng);
    return layer;
  }

  void validate() const {
    config.validate();
    const auto& c = config;
    require(W0.rows() == c.dout && W0.cols() == c.din, ErrorKind::kInvalidArgument, "adapter: W0 shape");
    require(groups.size() == c.n_groups, ErrorKind::kInvalidArgument, "adapter: group count");
    for (const auto& g : groups) {
      require(g.A.rows() == c.rank && g.A.cols() == c.din, ErrorKind::kInvalidArgument, "adapter: A shape");
      require(g.B.size() == c.experts_per_group, ErrorKind::kInvalidArgument, "adapter: expert count");
      for (const auto& b : g.B) {
        require(b.rows() == c.dout && b.cols() == c.rank, ErrorKind::kInvalidArgument, "adapter: B shape");
      }
    }
    require(Wg.rows() == c.n_groups && Wg.cols() == c.din, ErrorKind::kInvalidArgument, "adapter: Wg shape");
    require(Wk.rows() == c.experts_per_group && Wk.cols() == c.din, ErrorKind::kInvalidArgument,
            "adapter: Wk shape");
    require(Wl.rows() == c.experts_per_group && Wl.cols() == c.rank, ErrorKind::kInvalidArgument,
            "adapter: Wl shape");
  }

  /// Trainable tensors in a fixed order (A_0, B_00.., A_1, .., Wg, Wk, Wl).
  std::vector<Matrix*> trainable() {
    std::vector<Matrix*> out;
    for (auto& g : groups) {
      out.push_back(&g.A);
      for (auto& b : g.B) out.push_back(&b);
    }
    out.push_back(&Wg);
    out.push_back(&Wk);
    out.push_back(&Wl);
    return out;
  }
};

struct RoutingDecision {
  std::size_t group = 0;
  std::size_t expert = 0;
  Vector group_scores;
  Vector sk;
  Vector sl;
  double gate = 1.0;
};

namespace detail {

inline void check_input(const KnowledgeInput& in, std::size_t din) {
  for (const Vector* x : in.parts()) {
    require(x->dim() == din, ErrorKind::kInvalidArgument,
            "adapter: input dim " + std::to_string(x->dim()) + " != din " + std::to_string(din));
  }
}

/// sum_m softmax(W x_m) over the three components.
inline Vector softmax_sum(const Matrix& w, const std::array<Vector, 3>& xs) {
  Vector acc(w.rows());
  for (const Vector& x : xs) {
    const Vector p = softmax(matvec(w, x));
    for (std::size_t i = 0; i < acc.dim(); ++i) acc[i] += p[i];
  }
  return acc;
}

}  // namespace detail

inline std::pair<std::size_t, Vector> route_group(const KnowledgeInput& in, const KLGMoELayer& layer) {
  detail::check_input(in, layer.config.din);
  require(layer.Wg.cols() == layer.config.din, ErrorKind::kInvalidArgument, "route_group: Wg width != din");
  Vector scores = detail::softmax_sum(layer.Wg, {in.h, in.r, in.t});
  const std::size_t i = argmax_det(scores);
  return {i, std::move(scores)};
}

struct ExpertRoute {
  std::size_t index = 0;
  Vector sk;
  Vector sl;
};

inline ExpertRoute route_expert(const KnowledgeInput& in, const ExpertGroup& group, const KLGMoELayer& layer) {
  detail::check_input(in, layer.config.din);
  require(group.A.cols() == layer.config.din, ErrorKind::kInvalidArgument, "route_expert: A width != din");
  require(layer.Wl.cols() == group.A.rows(), ErrorKind::kInvalidArgument, "route_expert: Wl width != rank");
  require(layer.Wk.rows() == group.B.size() && layer.Wl.rows() == group.B.size(), ErrorKind::kInvalidArgument,
          "route_expert: router rows != experts per group");
  ExpertRoute out;
  out.sk = detail::softmax_sum(layer.Wk, {in.h, in.r, in.t});
  out.sl = detail::softmax_sum(layer.Wl, {matvec(group.A, in.h), matvec(group.A, in.r), matvec(group.A, in.t)});
  out.index = argmax_det(add(out.sk, out.sl));
  return out;
}

inline RoutingDecision route(const KnowledgeInput& in, const KLGMoELayer& layer) {
  auto [i, gs] = route_group(in, layer);
  ExpertRoute e = route_expert(in, layer.groups[i], layer);
  RoutingDecision d;
  d.group = i;
  d.expert = e.index;
  d.group_scores = std::move(gs);
  d.sk = std::move(e.sk);
  d.sl = std::move(e.sl);
  return d;
}

inline double gate_value(const RoutingDecision& d, MoEMode mode) {
  return mode == MoEMode::kPaperExact ? 1.0 : (d.sk[d.expert] + d.sl[d.expert]) / 6.0;
}

struct MoEOutput {
  std::array<Vector, 3> y;
  RoutingDecision decision;
};

inline MoEOutput forward(const KnowledgeInput& in, const KLGMoELayer& layer, MoEMode mode) {
  MoEOutput out;
  out.decision = route(in, layer);
  out.decision.gate = gate_value(out.decision, mode);
  const ExpertGroup& g = layer.groups[out.decision.group];
  const Matrix& b = g.B[out.decision.expert];
  const auto parts = in.parts();
  for (std::size_t m = 0; m < 3; ++m) {
    const Vector base = matvec(layer.W0, *parts[m]);
    const Vector delta = matvec(b, matvec(g.A, *parts[m]));
    out.y[m] = add(base, scale(delta, out.decision.gate));
  }
  return out;
}

inline MoEOutput forward(const KnowledgeInput& in, const KLGMoELayer& layer) {
  return forward(in, layer, layer.config.mode);
}

// ---- reverse mode -------------------------------------------------------

/// Tape leaves created by one adapter forward. Only the selected A_i and
/// B_ij are recorded; routers appear only in gated mode.
struct AdapterTape {
  std::array<ad::Var, 3> y;
  RoutingDecision decision;
  ad::Var A;
  ad::Var B;
  ad::Var Wk;
  ad::Var Wl;
  MoEMode mode = MoEMode::kGated;
};

namespace detail {

inline Vector column_value(ad::Var v) {
  require(v.cols() == 1, ErrorKind::kInvalidArgument, "adapter: inputs must be column vectors");
  return v.value().as_vector();
}

inline ad::Var softmax_sum_tape(ad::Var w, const std::array<ad::Var, 3>& xs) {
  std::array<ad::Var, 3> parts;
  for (std::size_t m = 0; m < 3; ++m) parts[m] = ad::softmax(ad::matmul(w, xs[m]));
  return ad::add(ad::add(parts[0], parts[1]), parts[2]);
}

}  // namespace detail

/// Forward on a tape. `x` are din x 1 nodes (they may carry gradient from
/// earlier blocks); routing itself is decided on their values.
inline AdapterTape forward_tape(ad::Tape& tape, const std::array<ad::Var, 3>& x, const KLGMoELayer& layer,
                                MoEMode mode) {
  const KnowledgeInput in{detail::column_value(x[0]), detail::column_value(x[1]), detail::column_value(x[2])};
  AdapterTape out;
  out.mode = mode;
  out.decision = route(in, layer);
  const ExpertGroup& g = layer.groups[out.decision.group];
  const ad::Var w0 = tape.constant_ref(layer.W0);
  out.A = tape.parameter_ref(g.A);
  out.B = tape.parameter_ref(g.B[out.decision.expert]);

  std::array<ad::Var, 3> ax;
  for (std::size_t m = 0; m < 3; ++m) ax[m] = ad::matmul(out.A, x[m]);

  ad::Var gate;
  if (mode == MoEMode::kGated) {
    out.Wk = tape.parameter_ref(layer.Wk);
    out.Wl = tape.parameter_ref(layer.Wl);
    const ad::Var sk = detail::softmax_sum_tape(out.Wk, x);
    const ad::Var sl = detail::softmax_sum_tape(out.Wl, ax);
    const std::size_t j = out.decision.expert;
    gate = ad::scale(ad::add(ad::pick(sk, j), ad::pick(sl, j)), 1.0 / 6.0);
    out.decision.gate = gate.scalar();
  } else {
    out.decision.gate = 1.0;
  }

  for (std::size_t m = 0; m < 3; ++m) {
    ad::Var delta = ad::matmul(out.B, ax[m]);
    if (gate.valid()) delta = ad::mul_scalar(delta, gate);
    out.y[m] = ad::add(ad::matmul(w0, x[m]), delta);
  }
  return out;
}

/// Gradients laid out like the layer. Untouched tensors (W0, Wg, unselected
/// experts, routers in paper-exact mode) are exact zeros.
struct LayerGradients {
  Matrix W0;
  std::vector<Matrix> A;
  std::vector<std::vector<Matrix>> B;
  Matrix Wg;
  Matrix Wk;
  Matrix Wl;

  static LayerGradients zeros_like(const KLGMoELayer& layer) {
    LayerGradients g;
    g.W0 = Matrix(layer.W0.rows(), layer.W0.cols());
    for (const auto& grp : layer.groups) {
      g.A.emplace_back(grp.A.rows(), grp.A.cols());
      g.B.emplace_back();
      for (const auto& b : grp.B) g.B.back().emplace_back(b.rows(), b.cols());
    }
    g.Wg = Matrix(layer.Wg.rows(), layer.Wg.cols());
    g.Wk = Matrix(layer.Wk.rows(), layer.Wk.cols());
    g.Wl = Matrix(layer.Wl.rows(), layer.Wl.cols());
    return g;
  }

  /// Same order as KLGMoELayer::trainable().
  std::vector<Matrix*> trainable() {
    std::vector<Matrix*> out;
    for (std::size_t i = 0; i < A.size(); ++i) {
      out.push_back(&A[i]);
      for (auto& b : B[i]) out.push_back(&b);
    }
    out.push_back(&Wg);
    out.push_back(&Wk);
    out.push_back(&Wl);
    return out;
  }
};

/// Adds this forward's gradients into `acc` (after tape.backward).
inline void accumulate_gradients(const ad::Tape& tape, const AdapterTape& fwd, LayerGradients& acc) {
  require(fwd.A.valid() && fwd.B.valid(), ErrorKind::kUsage, "adapter gradients requested without a forward pass");
  require(tape.backpropagated(), ErrorKind::kUsage, "adapter gradients requested before backward");
  const std::size_t i = fwd.decision.group;
  const std::size_t j = fwd.decision.expert;
  acc.A[i] = add(acc.A[i], tape.grad(fwd.A));
  acc.B[i][j] = add(acc.B[i][j], tape.grad(fwd.B));
  if (fwd.mode == MoEMode::kGated) {
    acc.Wk = add(acc.Wk, tape.grad(fwd.Wk));
    acc.Wl = add(acc.Wl, tape.grad(fwd.Wl));
  }
}

inline LayerGradients gradients(const ad::Tape& tape, const AdapterTape& fwd, const KLGMoELayer& layer) {
  LayerGradients g = LayerGradients::zeros_like(layer);
  accumulate_gradients(tape, fwd, g);
  return g;
}

// ---- accounting ---------------------------------------------------------

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t activated = 0;
};

/// Trainable: every A and B plus the three routers. Activated: the one
/// selected A and B plus all routers (they run for every sample).
inline ParamCount count_params(const KLGMoEConfig& c, std::size_t n_layers) {
  const std::size_t routers = c.n_groups * c.din + c.experts_per_group * c.din + c.experts_per_group * c.rank;
  ParamCount p;
  p.trainable = n_layers * (c.n_groups * c.din * c.rank + c.n_groups * c.experts_per_group * c.rank * c.dout + routers);
  p.activated = n_layers * (c.din * c.rank + c.rank * c.dout + routers);
  return p;
}

// ---- persistence --------------------------------------------------------

inline nlohmann::json to_json(const KLGMoEConfig& c) {
  return {{"n_groups", c.n_groups}, {"experts_per_group", c.experts_per_group},
          {"rank", c.rank},         {"din", c.din},
          {"dout", c.dout},         {"mode", to_string(c.mode)}};
}

inline KLGMoEConfig klgmoe_config_from_json(const nlohmann::json& j) {
  KLGMoEConfig c;
  c.n_groups = j.value("n_groups", c.n_groups);
  c.experts_per_group = j.value("experts_per_group", c.experts_per_group);
  c.rank = j.value("rank", c.rank);
  c.din = j.value("din", c.din);
  c.dout = j.value("dout", c.dout);
  c.mode = parse_moe_mode(j.value("mode", to_string(c.mode)));
  c.validate();
  return c;
}

inline void append_layer_tensors(TensorBundle& out, const std::string& prefix, const KLGMoELayer& layer) {
  out.emplace_back(prefix + "W0", layer.W0);
  for (std::size_t i = 0; i < layer.groups.size(); ++i) {
    out.emplace_back(prefix + "A" + std::to_string(i), layer.groups[i].A);
    for (std::size_t j = 0; j < layer.groups[i].B.size(); ++j) {
      out.emplace_back(prefix + "B" + std::to_string(i) + "_" + std::to_string(j), layer.groups[i].B[j]);
    }
  }
  out.emplace_back(prefix + "Wg", layer.Wg);
  out.emplace_back(prefix + "Wk", layer.Wk);
  out.emplace_back(prefix + "Wl", layer.Wl);
}

inline KLGMoELayer layer_from_tensors(const TensorBundle& bundle, const std::string& prefix,
                                      const KLGMoEConfig& config) {
  KLGMoELayer layer;
  layer.config = config;
  layer.W0 = find_tensor(bundle, prefix + "W0");
  for (std::size_t i = 0; i < config.n_groups; ++i) {
    ExpertGroup g;
    g.A = find_tensor(bundle, prefix + "A" + std::to_string(i));
    for (std::size_t j = 0; j < config.experts_per_group; ++j) {
      g.B.push_back(find_tensor(bundle, prefix + "B" + std::to_string(i) + "_" + std::to_string(j)));
    }
    layer.groups.push_back(std::move(g));
  }
  layer.Wg = find_tensor(bundle, prefix + "Wg");
  layer.Wk = find_tensor(bundle, prefix + "Wk");
  layer.Wl = find_tensor(bundle, prefix + "Wl");
  layer.validate();
  return layer;
}

/// <dir>/adapter.json (shape manifest) + <dir>/adapter.bin (tensors).
inline void save_adapter(const std::filesystem::path& dir, const std::vector<KLGMoELayer>& layers) {
  require(!layers.empty(), ErrorKind::kInvalidArgument, "save_adapter: no layers");
  TensorBundle bundle;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    append_layer_tensors(bundle, "layer" + std::to_string(l) + ".", layers[l]);
  }
  write_tensors(dir / "adapter.bin", bundle);
  nlohmann::json manifest = to_json(layers.front().config);
  manifest["n_layers"] = layers.size();
  std::ofstream out(dir / "adapter.json");
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + (dir / "adapter.json").string());
  out << manifest.dump(2) << '\n';
}

inline std::vector<KLGMoELayer> load_adapter(const std::filesystem::path& dir) {
  std::ifstream in(dir / "adapter.json");
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + (dir / "adapter.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, (dir / "adapter.json").string() + ": " + e.what());
  }
  const KLGMoEConfig config = klgmoe_config_from_json(manifest);
  const std::size_t n_layers = manifest.value("n_layers", std::size_t{1});
  const TensorBundle bundle = read_tensors(dir / "adapter.bin");
  std::vector<KLGMoELayer> layers;
  for (std::size_t l = 0; l < n_layers; ++l) {
    layers.push_back(layer_from_tensors(bundle, "layer" + std::to_string(l) + ".", config));
  }
  return layers;
}

// ---- routing log --------------------------------------------------------

struct RoutingRecord {
  std::size_t sample = 0;
  std::size_t layer = 0;
  std::string language;
  std::uint32_t relation = 0;
  RoutingDecision decision;
};

inline nlohmann::json to_json(const RoutingRecord& r) {
  return {{"sample", r.sample},
          {"layer", r.layer},
          {"lang", r.language},
          {"relation", r.relation},
          {"group", r.decision.group},
          {"expert", r.decision.expert},
          {"gate", r.decision.gate},
          {"group_scores", r.decision.group_scores.raw()},
          {"sk", r.decision.sk.raw()},
          {"sl", r.decision.sl.raw()}};
}

inline RoutingRecord routing_record_from_json(const nlohmann::json& j) {
  RoutingRecord r;
  r.sample = j.at("sample").get<std::size_t>();
  r.layer = j.at("layer").get<std::size_t>();
  r.language = j.at("lang").get<std::string>();
  r.relation = j.at("relation").get<std::uint32_t>();
  r.decision.group = j.at("group").get<std::size_t>();
  r.decision.expert = j.at("expert").get<std::size_t>();
  r.decision.gate = j.value("gate", 1.0);
  r.decision.group_scores = Vector(j.at("group_scores").get<std::vector<double>>());
  r.decision.sk = Vector(j.at("sk").get<std::vector<double>>());
  r.decision.sl = Vector(j.at("sl").get<std::vector<double>>());
  return r;
}

}  // namespace mkgc
