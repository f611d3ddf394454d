#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cnc/core/ops.hpp"

namespace cnc::nn {

template <typename T>
struct Parameter {
  std::string name;
  std::string group;
  Var<T> var;
};

/// Owns every trainable tensor of a model, tagged with a parameter group.
template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, const std::string& group, Tensor<T> init) {
    require(!index_.count(name), ErrorKind::config, "duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back({name, group, Var<T>::parameter(std::move(init))});
    return params_.back().var;
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }

  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::set<std::string> groups() const {
    std::set<std::string> out;
    for (const auto& p : params_) out.insert(p.group);
    return out;
  }

  /// Marks exactly the listed groups as differentiable.
  void set_trainable(const std::set<std::string>& groups) {
    for (auto& p : params_) p.var.set_requires_grad(groups.count(p.group) > 0);
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  std::size_t count(const std::string& group = {}) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (group.empty() || p.group == group) n += p.var.value().size();
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Creates named parameters under a prefix with seeded initialization.
template <typename T>
class Builder {
 public:
  Builder(ParamStore<T>& store, std::string group, std::mt19937_64& rng, std::string prefix = {})
      : store_(&store), group_(std::move(group)), rng_(&rng), prefix_(std::move(prefix)) {}

  Builder scope(const std::string& name) const {
    Builder b = *this;
    b.prefix_ = prefix_.empty() ? name : prefix_ + "." + name;
    return b;
  }
  Builder with_group(const std::string& group) const {
    Builder b = *this;
    b.group_ = group;
    return b;
  }

  Var<T> normal(const std::string& name, Shape shape, double stddev) {
    return store_->add(full(name), group_, randn<T>(std::move(shape), *rng_, static_cast<T>(stddev)));
  }
  Var<T> constant(const std::string& name, Shape shape, T value) {
    return store_->add(full(name), group_, Tensor<T>(std::move(shape), value));
  }

  const std::string& group() const { return group_; }
  const std::string& prefix() const { return prefix_; }

 private:
  std::string full(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

  ParamStore<T>* store_;
  std::string group_;
  std::mt19937_64* rng_;
  std::string prefix_;
};

enum class Init { fan_in, zero };

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(Builder<T> b, int in_ch, int out_ch, int kernel, int stride_ = 1, Init init = Init::fan_in, bool with_bias = true)
      : stride(stride_), pad(kernel / 2) {
    const double fan_in = static_cast<double>(in_ch) * kernel * kernel;
    weight = init == Init::zero ? b.constant("w", {out_ch, in_ch, kernel, kernel}, T(0))
                                : b.normal("w", {out_ch, in_ch, kernel, kernel}, 1.0 / std::sqrt(fan_in));
    if (with_bias) bias = b.constant("b", {out_ch}, T(0));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
  int out_channels() const { return weight.dim(0); }
};

template <typename T>
struct Linear {
  Var<T> weight;
  Var<T> bias;

  Linear() = default;
  Linear(Builder<T> b, int in_dim, int out_dim, Init init = Init::fan_in, bool with_bias = true) {
    weight = init == Init::zero ? b.constant("w", {out_dim, in_dim}, T(0))
                                : b.normal("w", {out_dim, in_dim}, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    if (with_bias) bias = b.constant("b", {out_dim}, T(0));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
};

inline int default_groups(int channels, int preferred = 8) {
  int g = std::gcd(channels, preferred);
  return std::max(1, g);
}

template <typename T>
struct GroupNorm {
  Var<T> gamma;
  Var<T> beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(Builder<T> b, int channels, int groups_ = 0) : groups(groups_ ? groups_ : default_groups(channels)) {
    gamma = b.constant("gamma", {channels}, T(1));
    beta = b.constant("beta", {channels}, T(0));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::group_norm(x, groups, gamma, beta); }
};

template <typename T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  LayerNorm(Builder<T> b, int dim) {
    gamma = b.constant("gamma", {dim}, T(1));
    beta = b.constant("beta", {dim}, T(0));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma, beta); }
};

}  // namespace cnc::nn
