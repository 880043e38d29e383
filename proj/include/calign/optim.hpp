#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "calign/errors.hpp"

namespace calign {

// Adam with bias correction. Each parameter block is identified by a slot index.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw UsageError("adam: learning rate must be positive");
  }

  void begin_step() { ++t_; }

  void update(std::size_t slot, std::span<double> param, std::span<const double> grad) {
    if (t_ == 0) throw UsageError("adam: begin_step() not called");
    if (param.size() != grad.size()) throw UsageError("adam: parameter/gradient size mismatch");
    if (slot >= m_.size()) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
    }
    auto& m = m_[slot];
    auto& v = v_[slot];
    if (m.empty()) {
      m.assign(param.size(), 0.0);
      v.assign(param.size(), 0.0);
    }
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < param.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
      param[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const noexcept { return lr_; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace calign
