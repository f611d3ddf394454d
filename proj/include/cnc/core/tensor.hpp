#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cnc/core/error.hpp"

namespace cnc {

using Shape = std::vector<int>;

/// Allocator with a fixed 64-byte alignment. Eigen picks its vectorized summation order from
/// pointer alignment, so a fixed alignment keeps reductions bitwise reproducible across runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Contiguous numeric storage used by tensors and kernel scratch space.
template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Image-like data is laid out NCHW, token data N x L x D.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, Buffer<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_length();
  }
  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_length();
  }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis < 0 ? rank() + axis : axis)); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  Buffer<T>& storage() noexcept { return data_; }
  const Buffer<T>& storage() const noexcept { return data_; }
  std::vector<T> to_vector() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  Tensor reshaped(Shape shape) const {
    require(shape_size(shape) == size(), ErrorKind::shape,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_length() const {
    require(data_.size() == shape_size(shape_), ErrorKind::shape,
            "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  Shape shape_;
  Buffer<T> data_;
};

template <typename T, typename Rng>
Tensor<T> randn(Shape shape, Rng& rng, T stddev = T(1)) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng)) * stddev;
  return t;
}

template <typename T, typename Rng>
Tensor<T> rand_uniform(Shape shape, Rng& rng, T lo, T hi) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.storage().begin(), t.storage().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), ErrorKind::shape, "max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                                                 shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
  T m = 0;
  for (T v : a.storage()) m = std::max(m, static_cast<T>(std::abs(v)));
  return m;
}

template <typename T>
double l2_norm(const Tensor<T>& a) {
  double s = 0;
  for (T v : a.storage()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

/// Select sample `n` of a batched tensor, keeping the batch axis (size 1).
template <typename T>
Tensor<T> batch_item(const Tensor<T>& t, int n) {
  Shape shape = t.shape();
  const std::size_t stride = t.size() / static_cast<std::size_t>(shape[0]);
  shape[0] = 1;
  Tensor<T> out(shape);
  std::copy_n(t.data() + stride * static_cast<std::size_t>(n), stride, out.data());
  return out;
}

/// Stack tensors of identical shape [1, ...] (or [...]) along a new/first batch axis.
template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
  require(!items.empty(), ErrorKind::shape, "stack_batch on empty list");
  Shape item_shape = items[0].shape();
  if (!item_shape.empty() && item_shape[0] == 1) item_shape.erase(item_shape.begin());
  Shape shape = item_shape;
  shape.insert(shape.begin(), static_cast<int>(items.size()));
  Tensor<T> out(shape);
  const std::size_t stride = shape_size(item_shape);
  for (std::size_t i = 0; i < items.size(); ++i) {
    require(items[i].size() == stride, ErrorKind::shape, "stack_batch: inconsistent item sizes");
    std::copy_n(items[i].data(), stride, out.data() + i * stride);
  }
  return out;
}

template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  return stack_batch(std::span<const Tensor<T>>(items));
}

}  // namespace cnc
