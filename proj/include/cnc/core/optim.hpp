#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cnc/core/nn.hpp"

namespace cnc::nn {

/// Global L2 norm of all gradients of differentiable parameters.
template <typename T>
double grad_norm(ParamStore<T>& store) {
  double s = 0;
  for (auto& p : store.params()) {
    if (!p.var.requires_grad() || !p.var.has_grad()) continue;
    for (T g : p.var.grad().storage()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(ParamStore<T>& store, double max_norm) {
  const double norm = grad_norm(store);
  if (norm > max_norm && norm > 0) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : store.params())
      if (p.var.requires_grad() && p.var.has_grad())
        for (T& g : p.var.grad().storage()) g *= factor;
  }
  return norm;
}

/// Adaptive moment estimation over the differentiable parameters of a store.
template <typename T>
class Adam {
 public:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };

  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore<T>& store) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (auto& p : store.params()) {
      if (!p.var.requires_grad() || !p.var.has_grad()) continue;
      auto& mo = moments_[p.name];
      auto& value = p.var.mutable_value();
      if (mo.m.size() != value.size()) {
        mo.m = Tensor<T>(value.shape());
        mo.v = Tensor<T>(value.shape());
      }
      const auto& g = p.var.grad();
      for (std::size_t i = 0; i < value.size(); ++i) {
        mo.m[i] = static_cast<T>(beta1_ * mo.m[i] + (1.0 - beta1_) * g[i]);
        mo.v[i] = static_cast<T>(beta2_ * mo.v[i] + (1.0 - beta2_) * static_cast<double>(g[i]) * g[i]);
        const double mhat = mo.m[i] / bc1;
        const double vhat = mo.v[i] / bc2;
        value[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long step_count() const { return step_; }
  void set_step_count(long s) { step_ = s; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace cnc::nn
