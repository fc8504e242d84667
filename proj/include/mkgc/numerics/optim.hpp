#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/numerics/matrix.hpp"

namespace mkgc {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam over a fixed list of parameter matrices. Updates are applied in
/// registration order, so results are reproducible.
class Adam {
 public:
  Adam(std::vector<Matrix*> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    for (const Matrix* p : params_) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }

  void step(const std::vector<Matrix>& grads) {
    require(grads.size() == params_.size(), ErrorKind::kInvalidArgument,
            "Adam::step: gradient count mismatch");
    ++t_;
    if (config_.lr == 0.0) return;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto p = params_[k]->values();
      auto g = grads[k].values();
      auto m = m_[k].values();
      auto v = v_[k].values();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        p[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<Matrix*> params_;
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t t_ = 0;
};

}  // namespace mkgc
