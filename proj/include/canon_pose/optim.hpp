#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "canon_pose/layers.hpp"

namespace canon_pose {

struct AdamConfig {
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

// Adam with decoupled weight decay: p <- p(1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps).
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<nn::Param<T>*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), T(0));
      v_.emplace_back(p->value.size(), T(0));
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& value = params_[k]->value.data;
      const auto& grad = params_[k]->grad.data;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const T g = grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        value[i] = value[i] * decay - step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }

  void restore(std::uint64_t t, std::vector<std::vector<T>> m, std::vector<std::vector<T>> v) {
    if (m.size() != params_.size() || v.size() != params_.size())
      throw DimensionError("optimizer state does not match parameter count");
    for (std::size_t k = 0; k < params_.size(); ++k)
      if (m[k].size() != params_[k]->value.size() || v[k].size() != params_[k]->value.size())
        throw DimensionError("optimizer state does not match parameter '" + params_[k]->name + "'");
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<nn::Param<T>*> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

template <typename T>
void clip_parameters(const std::vector<nn::Param<T>*>& params, T c) {
  for (auto* p : params)
    for (auto& v : p->value.data) v = std::clamp(v, -c, c);
}

template <typename T>
T max_abs_parameter(const std::vector<nn::Param<T>*>& params) {
  T m = T(0);
  for (auto* p : params)
    for (auto v : p->value.data) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace canon_pose
