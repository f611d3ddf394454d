#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "cnc/core/autograd.hpp"

// Differentiable tensor operations. Every op computes its forward value eagerly and, when
// gradients are being recorded, a closure that scatters the output gradient to its inputs.
namespace cnc::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

/// Row-major Boolean matrix; one per batch sample for attention masking.
struct BoolMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> bits;

  BoolMatrix() = default;
  BoolMatrix(int r, int c, bool value = true)
      : rows(r), cols(c), bits(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), value ? 1 : 0) {}
  bool operator()(int r, int c) const { return bits[static_cast<std::size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { bits[static_cast<std::size_t>(r) * cols + c] = v ? 1 : 0; }
  bool operator==(const BoolMatrix&) const = default;
};

enum class MaskMode {
  additive,  ///< softmax(S + log M'): masked logits are -inf, masked weights exactly 0
  hadamard,  ///< softmax(S * M'): masked logits are 0 (literal elementwise product)
};

// ---------------------------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = grad_sink(self, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_sink(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = grad_sink(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

/// x * m with a constant (non-differentiable) multiplier tensor of the same shape.
template <typename T>
Var<T> mul_const(const Var<T>& x, const Tensor<T>& m) {
  require(x.shape() == m.shape(), ErrorKind::shape, "mul_const shape mismatch");
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
  return make_result<T>(std::move(out), {x}, [m](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * m[i];
  });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = v / (T(1) + std::exp(-v));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    if (auto* g = grad_sink(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-xv[i]));
        (*g)[i] += self.grad[i] * s * (T(1) + xv[i] * (T(1) - s));
      }
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.storage()) v = T(1) / (T(1) + std::exp(-v));
  return make_result<T>(Tensor<T>(out), {x}, [out](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * out[i] * (T(1) - out[i]);
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------------------------
// Layout

/// Adds a per-sample, per-channel vector b [N, C] to every spatial position of x [N, C, H, W].
template <typename T>
Var<T> add_channel(const Var<T>& x, const Var<T>& b) {
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(b.shape() == Shape{N, C}, ErrorKind::shape, "add_channel: bias must be [N, C]");
  Tensor<T> out = x.value();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T bv = b.value()[static_cast<std::size_t>(n) * C + c];
      T* p = out.data() + (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) p[i] += bv;
    }
  return make_result<T>(std::move(out), {x, b}, [N, C, HW](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_sink(self, 1))
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T* p = self.grad.data() + (static_cast<std::size_t>(n) * C + c) * HW;
          T s = 0;
          for (int i = 0; i < HW; ++i) s += p[i];
          (*g)[static_cast<std::size_t>(n) * C + c] += s;
        }
  });
}

/// Concatenate NCHW tensors along channels.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  require(b.dim(0) == N && b.dim(2) == H && b.dim(3) == W, ErrorKind::shape,
          "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  Tensor<T> out({N, Ca + Cb, H, W});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * Ca * HW, Ca * HW, out.data() + n * (Ca + Cb) * HW);
    std::copy_n(b.value().data() + n * Cb * HW, Cb * HW, out.data() + (n * (Ca + Cb) + Ca) * HW);
  }
  return make_result<T>(std::move(out), {a, b}, [N, Ca, Cb, HW](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Ca * HW; ++i) (*g)[n * Ca * HW + i] += self.grad[n * (Ca + Cb) * HW + i];
    if (auto* g = grad_sink(self, 1))
      for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < Cb * HW; ++i)
          (*g)[n * Cb * HW + i] += self.grad[(n * (Ca + Cb) + Ca) * HW + i];
  });
}

/// Concatenate token tensors [N, L_k, D] along the sequence axis.
template <typename T>
Var<T> concat_tokens(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), ErrorKind::shape, "concat_tokens: no parts");
  const int N = parts[0].dim(0), D = parts[0].dim(2);
  int L = 0;
  for (const auto& p : parts) {
    require(p.value().rank() == 3 && p.dim(0) == N && p.dim(2) == D, ErrorKind::shape,
            "concat_tokens: part " + shape_str(p.shape()) + " incompatible with D=" + std::to_string(D));
    L += p.dim(1);
  }
  Tensor<T> out({N, L, D});
  std::vector<int> lens;
  for (int n = 0; n < N; ++n) {
    int off = 0;
    for (const auto& p : parts) {
      const int Lk = p.dim(1);
      std::copy_n(p.value().data() + static_cast<std::size_t>(n) * Lk * D, static_cast<std::size_t>(Lk) * D,
                  out.data() + (static_cast<std::size_t>(n) * L + off) * D);
      off += Lk;
    }
  }
  for (const auto& p : parts) lens.push_back(p.dim(1));
  return make_result<T>(std::move(out), parts, [N, L, D, lens](Node<T>& self) {
    int off = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      const int Lk = lens[k];
      if (auto* g = grad_sink(self, k))
        for (int n = 0; n < N; ++n)
          for (std::size_t i = 0; i < static_cast<std::size_t>(Lk) * D; ++i)
            (*g)[static_cast<std::size_t>(n) * Lk * D + i] += self.grad[(static_cast<std::size_t>(n) * L + off) * D + i];
      off += Lk;
    }
  });
}

/// NCHW -> [N, H*W, C]
template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out({N, HW, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < HW; ++p)
        out[(static_cast<std::size_t>(n) * HW + p) * C + c] = x.value()[(static_cast<std::size_t>(n) * C + c) * HW + p];
  return make_result<T>(std::move(out), {x}, [N, C, HW](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int p = 0; p < HW; ++p)
            (*g)[(static_cast<std::size_t>(n) * C + c) * HW + p] += self.grad[(static_cast<std::size_t>(n) * HW + p) * C + c];
  });
}

/// [N, H*W, C] -> NCHW
template <typename T>
Var<T> from_tokens(const Var<T>& t, int H, int W) {
  const int N = t.dim(0), HW = t.dim(1), C = t.dim(2);
  require(HW == H * W, ErrorKind::shape, "from_tokens: token count does not match H*W");
  Tensor<T> out({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < HW; ++p)
        out[(static_cast<std::size_t>(n) * C + c) * HW + p] = t.value()[(static_cast<std::size_t>(n) * HW + p) * C + c];
  return make_result<T>(std::move(out), {t}, [N, C, HW](Node<T>& self) {
    if (auto* g = grad_sink(self, 0))
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int p = 0; p < HW; ++p)
            (*g)[(static_cast<std::size_t>(n) * HW + p) * C + c] += self.grad[(static_cast<std::size_t>(n) * C + c) * HW + p];
  });
}

// ---------------------------------------------------------------------------------------------
// Resampling

/// Mean over non-overlapping factor x factor windows.
template <typename T>
Tensor<T> area_downsample(const Tensor<T>& x, int factor) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(factor >= 1 && H % factor == 0 && W % factor == 0, ErrorKind::shape,
          "area_downsample: " + shape_str(x.shape()) + " not divisible by " + std::to_string(factor));
  if (factor == 1) return x;
  const int Ho = H / factor, Wo = W / factor;
  Tensor<T> out({N, C, Ho, Wo});
  const T inv = T(1) / static_cast<T>(factor * factor);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < Ho; ++y)
        for (int xo = 0; xo < Wo; ++xo) {
          T s = 0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) s += x.at(n, c, y * factor + dy, xo * factor + dx);
          out.at(n, c, y, xo) = s * inv;
        }
  return out;
}

template <typename T>
Var<T> avg_pool(const Var<T>& x, int factor) {
  Tensor<T> out = area_downsample(x.value(), factor);
  const Shape in_shape = x.shape();
  return make_result<T>(std::move(out), {x}, [factor, in_shape](Node<T>& self) {
    if (auto* g = grad_sink(self, 0)) {
      const int N = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3];
      const T inv = T(1) / static_cast<T>(factor * factor);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) g->at(n, c, y, xx) += self.grad.at(n, c, y / factor, xx / factor) * inv;
    }
  });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out({N, C, H * factor, W * factor});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H * factor; ++y)
        for (int xx = 0; xx < W * factor; ++xx) out.at(n, c, y, xx) = x.value().at(n, c, y / factor, xx / factor);
  return make_result<T>(std::move(out), {x}, [factor](Node<T>& self) {
    if (auto* g = grad_sink(self, 0)) {
      const Shape& s = self.grad.shape();
      for (int n = 0; n < s[0]; ++n)
        for (int c = 0; c < s[1]; ++c)
          for (int y = 0; y < s[2]; ++y)
            for (int xx = 0; xx < s[3]; ++xx) g->at(n, c, y / factor, xx / factor) += self.grad.at(n, c, y, xx);
    }
  });
}

// ---------------------------------------------------------------------------------------------
// Convolution and linear maps

namespace detail {

struct ConvGeometry {
  int C, H, W, k, stride, pad, Ho, Wo;
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const int P = g.Ho * g.Wo;
  for (int c = 0; c < g.C; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * P;
        for (int oy = 0; oy < g.Ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          for (int ox = 0; ox < g.Wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            row[oy * g.Wo + ox] = (iy >= 0 && iy < g.H && ix >= 0 && ix < g.W)
                                      ? x[(static_cast<std::size_t>(c) * g.H + iy) * g.W + ix]
                                      : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
  const int P = g.Ho * g.Wo;
  for (int c = 0; c < g.C; ++c)
    for (int ki = 0; ki < g.k; ++ki)
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = col + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * P;
        for (int oy = 0; oy < g.Ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.H) continue;
          for (int ox = 0; ox < g.Wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.W) x[(static_cast<std::size_t>(c) * g.H + iy) * g.W + ix] += row[oy * g.Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution. x [N, Cin, H, W], w [Cout, Cin, k, k], optional bias [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad) {
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == Cin, ErrorKind::shape,
          "conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const detail::ConvGeometry g{Cin, H, W, k, stride, pad, (H + 2 * pad - k) / stride + 1, (W + 2 * pad - k) / stride + 1};
  const int K = Cin * k * k, P = g.Ho * g.Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);
  Tensor<T> out({N, Cout, g.Ho, g.Wo});
  Buffer<T> col(direct ? 0 : static_cast<std::size_t>(K) * P);
  CMapMat<T> Wm(w.value().data(), Cout, K);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.value().data() + static_cast<std::size_t>(n) * Cin * H * W;
    if (!direct) detail::im2col(xn, g, col.data());
    CMapMat<T> Cm(direct ? xn : col.data(), K, P);
    MapMat<T> Ym(out.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
    Ym.noalias() = Wm * Cm;
    if (bias.defined())
      for (int c = 0; c < Cout; ++c) Ym.row(c).array() += bias.value()[c];
  }
  std::vector<Var<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), inputs, [g, N, Cout, K, P, direct](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    Tensor<T>* gx = grad_sink(self, 0);
    Tensor<T>* gw = grad_sink(self, 1);
    Tensor<T>* gb = self.inputs.size() > 2 ? grad_sink(self, 2) : nullptr;
    Buffer<T> col(direct ? 0 : static_cast<std::size_t>(K) * P);
    Buffer<T> dcol(direct || !gx ? 0 : static_cast<std::size_t>(K) * P);
    CMapMat<T> Wm(wv.data(), Cout, K);
    const std::size_t in_stride = static_cast<std::size_t>(g.C) * g.H * g.W;
    for (int n = 0; n < N; ++n) {
      CMapMat<T> dY(self.grad.data() + static_cast<std::size_t>(n) * Cout * P, Cout, P);
      const T* xn = xv.data() + n * in_stride;
      if (gw) {
        if (!direct) detail::im2col(xn, g, col.data());
        CMapMat<T> Cm(direct ? xn : col.data(), K, P);
        MapMat<T>(gw->data(), Cout, K).noalias() += dY * Cm.transpose();
      }
      if (gb)
        for (int c = 0; c < Cout; ++c) (*gb)[c] += dY.row(c).sum();
      if (gx) {
        if (direct) {
          MapMat<T>(gx->data() + n * in_stride, K, P).noalias() += Wm.transpose() * dY;
        } else {
          MapMat<T>(dcol.data(), K, P).noalias() = Wm.transpose() * dY;
          detail::col2im(dcol.data(), g, gx->data() + n * in_stride);
        }
      }
    }
  });
}

/// y = x W^T + b over the last axis. x [..., Din], w [Dout, Din], optional b [Dout].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int Din = x.dim(-1), Dout = w.dim(0);
  require(w.dim(1) == Din, ErrorKind::shape,
          "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const int R = static_cast<int>(x.value().size() / static_cast<std::size_t>(Din));
  Shape out_shape = x.shape();
  out_shape.back() = Dout;
  Tensor<T> out(out_shape);
  MapMat<T> Y(out.data(), R, Dout);
  Y.noalias() = CMapMat<T>(x.value().data(), R, Din) * CMapMat<T>(w.value().data(), Dout, Din).transpose();
  if (b.defined())
    for (int r = 0; r < R; ++r) Y.row(r) += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), Dout);
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result<T>(std::move(out), inputs, [R, Din, Dout](Node<T>& self) {
    CMapMat<T> dY(self.grad.data(), R, Dout);
    if (auto* g = grad_sink(self, 0))
      MapMat<T>(g->data(), R, Din).noalias() += dY * CMapMat<T>(self.inputs[1]->value.data(), Dout, Din);
    if (auto* g = grad_sink(self, 1))
      MapMat<T>(g->data(), Dout, Din).noalias() += dY.transpose() * CMapMat<T>(self.inputs[0]->value.data(), R, Din);
    if (self.inputs.size() > 2)
      if (auto* g = grad_sink(self, 2))
        for (int r = 0; r < R; ++r)
          for (int o = 0; o < Dout; ++o) (*g)[o] += dY(r, o);
  });
}

// ---------------------------------------------------------------------------------------------
// Normalization

/// Group normalization over (C/groups, H, W) per sample. gamma/beta [C] are optional; with
/// groups == C and no affine this is parameter-free instance normalization.
template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(groups > 0 && C % groups == 0, ErrorKind::shape,
          "group_norm: channels " + std::to_string(C) + " not divisible by groups " + std::to_string(groups));
  const int Cg = C / groups;
  const std::size_t gsize = static_cast<std::size_t>(Cg) * HW;
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(N) * groups);
  for (int n = 0; n < N; ++n)
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + gi * Cg) * HW;
      const T* p = x.value().data() + base;
      double mean = 0;
      for (std::size_t i = 0; i < gsize; ++i) mean += p[i];
      mean /= static_cast<double>(gsize);
      double var = 0;
      for (std::size_t i = 0; i < gsize; ++i) var += (p[i] - mean) * (p[i] - mean);
      var /= static_cast<double>(gsize);
      const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      inv_std[static_cast<std::size_t>(n) * groups + gi] = is;
      for (std::size_t i = 0; i < gsize; ++i) xhat[base + i] = static_cast<T>(p[i] - mean) * is;
    }
  Tensor<T> out = xhat;
  const bool affine = gamma.defined();
  if (affine)
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T* p = out.data() + (static_cast<std::size_t>(n) * C + c) * HW;
        const T gm = gamma.value()[c], bt = beta.value()[c];
        for (int i = 0; i < HW; ++i) p[i] = p[i] * gm + bt;
      }
  std::vector<Var<T>> inputs{x};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  return make_result<T>(std::move(out), inputs,
                        [N, C, HW, groups, Cg, gsize, affine, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)](Node<T>& self) {
                          const T* gamma_v = affine ? self.inputs[1]->value.data() : nullptr;
                          if (affine) {
                            Tensor<T>* gg = grad_sink(self, 1);
                            Tensor<T>* gbt = grad_sink(self, 2);
                            for (int n = 0; n < N; ++n)
                              for (int c = 0; c < C; ++c) {
                                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                                T sg = 0, sb = 0;
                                for (int i = 0; i < HW; ++i) {
                                  sg += self.grad[base + i] * xhat[base + i];
                                  sb += self.grad[base + i];
                                }
                                if (gg) (*gg)[c] += sg;
                                if (gbt) (*gbt)[c] += sb;
                              }
                          }
                          Tensor<T>* gx = grad_sink(self, 0);
                          if (!gx) return;
                          Buffer<T> dxhat(gsize);
                          for (int n = 0; n < N; ++n)
                            for (int gi = 0; gi < groups; ++gi) {
                              const std::size_t base = (static_cast<std::size_t>(n) * C + gi * Cg) * HW;
                              double m1 = 0, m2 = 0;
                              for (int c = 0; c < Cg; ++c) {
                                const T gm = affine ? gamma_v[gi * Cg + c] : T(1);
                                for (int i = 0; i < HW; ++i) {
                                  const std::size_t idx = static_cast<std::size_t>(c) * HW + i;
                                  dxhat[idx] = self.grad[base + idx] * gm;
                                  m1 += dxhat[idx];
                                  m2 += static_cast<double>(dxhat[idx]) * xhat[base + idx];
                                }
                              }
                              m1 /= static_cast<double>(gsize);
                              m2 /= static_cast<double>(gsize);
                              const T is = inv_std[static_cast<std::size_t>(n) * groups + gi];
                              for (std::size_t idx = 0; idx < gsize; ++idx)
                                (*gx)[base + idx] +=
                                    is * static_cast<T>(dxhat[idx] - m1 - xhat[base + idx] * m2);
                            }
                        });
}

/// Layer normalization over the last axis with affine gamma/beta [D].
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const int D = x.dim(-1);
  const int R = static_cast<int>(x.value().size() / static_cast<std::size_t>(D));
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    const T* p = x.value().data() + static_cast<std::size_t>(r) * D;
    double mean = 0, var = 0;
    for (int i = 0; i < D; ++i) mean += p[i];
    mean /= D;
    for (int i = 0; i < D; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= D;
    const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[static_cast<std::size_t>(r)] = is;
    for (int i = 0; i < D; ++i) xhat[static_cast<std::size_t>(r) * D + i] = static_cast<T>(p[i] - mean) * is;
  }
  Tensor<T> out = xhat;
  for (int r = 0; r < R; ++r)
    for (int i = 0; i < D; ++i) {
      auto& v = out[static_cast<std::size_t>(r) * D + i];
      v = v * gamma.value()[i] + beta.value()[i];
    }
  return make_result<T>(std::move(out), {x, gamma, beta},
                        [R, D, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                          const T* gm = self.inputs[1]->value.data();
                          Tensor<T>* gg = grad_sink(self, 1);
                          Tensor<T>* gbt = grad_sink(self, 2);
                          Tensor<T>* gx = grad_sink(self, 0);
                          for (int r = 0; r < R; ++r) {
                            const std::size_t base = static_cast<std::size_t>(r) * D;
                            double m1 = 0, m2 = 0;
                            for (int i = 0; i < D; ++i) {
                              const T dy = self.grad[base + i];
                              if (gg) (*gg)[i] += dy * xhat[base + i];
                              if (gbt) (*gbt)[i] += dy;
                              const T dxh = dy * gm[i];
                              m1 += dxh;
                              m2 += static_cast<double>(dxh) * xhat[base + i];
                            }
                            if (!gx) continue;
                            m1 /= D;
                            m2 /= D;
                            for (int i = 0; i < D; ++i) {
                              const T dxh = self.grad[base + i] * gm[i];
                              (*gx)[base + i] += inv_std[static_cast<std::size_t>(r)] *
                                                 static_cast<T>(dxh - m1 - xhat[base + i] * m2);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------------------------
// Attention

/// Multi-head attention softmax(Q K^T / sqrt(d) (masked)) V.
/// q [N, I, D], k/v [N, J, D]; `masks` holds one I x J matrix per sample (empty: no masking);
/// the same mask is broadcast across heads. When `weights_out` is given it receives the
/// attention probabilities [N, heads, I, J].
template <typename T>
Var<T> masked_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads,
                        std::span<const BoolMatrix> masks, MaskMode mode, Tensor<T>* weights_out = nullptr) {
  const int N = q.dim(0), I = q.dim(1), D = q.dim(2), J = k.dim(1);
  require(k.dim(0) == N && v.dim(0) == N && k.dim(2) == D && v.dim(2) == D && v.dim(1) == J, ErrorKind::shape,
          "masked_attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " + shape_str(v.shape()));
  require(heads > 0 && D % heads == 0, ErrorKind::shape, "masked_attention: model dim not divisible by heads");
  require(masks.empty() || static_cast<int>(masks.size()) == N, ErrorKind::shape,
          "masked_attention: need one mask per batch sample");
  for (const auto& m : masks)
    require(m.rows == I && m.cols == J, ErrorKind::shape,
            "masked_attention: mask " + std::to_string(m.rows) + "x" + std::to_string(m.cols) + " vs logits " +
                std::to_string(I) + "x" + std::to_string(J));
  const int dh = D / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<Buffer<T>>(static_cast<std::size_t>(N) * heads * I * J);
  Tensor<T> out({N, I, D});
  RowMat<T> S(I, J);
  for (int n = 0; n < N; ++n) {
    const BoolMatrix* mask = masks.empty() ? nullptr : &masks[static_cast<std::size_t>(n)];
    for (int h = 0; h < heads; ++h) {
      Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> Qh(q.value().data() + static_cast<std::size_t>(n) * I * D + h * dh,
                                                              I, dh, Eigen::OuterStride<>(D));
      Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> Kh(k.value().data() + static_cast<std::size_t>(n) * J * D + h * dh,
                                                              J, dh, Eigen::OuterStride<>(D));
      Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>> Vh(v.value().data() + static_cast<std::size_t>(n) * J * D + h * dh,
                                                              J, dh, Eigen::OuterStride<>(D));
      S.noalias() = Qh * Kh.transpose();
      S *= inv_sqrt;
      T* P = probs->data() + (static_cast<std::size_t>(n) * heads + h) * I * J;
      for (int i = 0; i < I; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < J; ++j) {
          T s = S(i, j);
          if (mask && !(*mask)(i, j)) {
            if (mode == MaskMode::hadamard)
              s = s * T(0);
            else
              continue;
          }
          S(i, j) = s;
          mx = std::max(mx, s);
        }
        T z = 0;
        for (int j = 0; j < J; ++j) {
          const bool masked = mask && !(*mask)(i, j) && mode == MaskMode::additive;
          const T e = masked ? T(0) : std::exp(S(i, j) - mx);
          P[static_cast<std::size_t>(i) * J + j] = e;
          z += e;
        }
        for (int j = 0; j < J; ++j) P[static_cast<std::size_t>(i) * J + j] /= z;
      }
      Eigen::Map<const RowMat<T>> Pm(P, I, J);
      Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>> Oh(out.data() + static_cast<std::size_t>(n) * I * D + h * dh, I, dh,
                                                        Eigen::OuterStride<>(D));
      Oh.noalias() = Pm * Vh;
    }
  }
  if (weights_out) *weights_out = Tensor<T>({N, heads, I, J}, *probs);
  std::vector<BoolMatrix> mask_copy(masks.begin(), masks.end());
  return make_result<T>(
      std::move(out), {q, k, v},
      [N, I, J, D, heads, dh, inv_sqrt, mode, probs, mask_copy = std::move(mask_copy)](Node<T>& self) {
        const auto& qv = self.inputs[0]->value;
        const auto& kv = self.inputs[1]->value;
        const auto& vv = self.inputs[2]->value;
        Tensor<T>* gq = grad_sink(self, 0);
        Tensor<T>* gk = grad_sink(self, 1);
        Tensor<T>* gv = grad_sink(self, 2);
        using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
        using MStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
        RowMat<T> dP(I, J), dS(I, J);
        for (int n = 0; n < N; ++n) {
          const BoolMatrix* mask = mask_copy.empty() ? nullptr : &mask_copy[static_cast<std::size_t>(n)];
          for (int h = 0; h < heads; ++h) {
            const std::size_t qoff = static_cast<std::size_t>(n) * I * D + h * dh;
            const std::size_t koff = static_cast<std::size_t>(n) * J * D + h * dh;
            Strided dO(self.grad.data() + qoff, I, dh, Eigen::OuterStride<>(D));
            Strided Qh(qv.data() + qoff, I, dh, Eigen::OuterStride<>(D));
            Strided Kh(kv.data() + koff, J, dh, Eigen::OuterStride<>(D));
            Strided Vh(vv.data() + koff, J, dh, Eigen::OuterStride<>(D));
            Eigen::Map<const RowMat<T>> Pm(probs->data() + (static_cast<std::size_t>(n) * heads + h) * I * J, I, J);
            if (gv) MStrided(gv->data() + koff, J, dh, Eigen::OuterStride<>(D)).noalias() += Pm.transpose() * dO;
            if (!gq && !gk) continue;
            dP.noalias() = dO * Vh.transpose();
            for (int i = 0; i < I; ++i) {
              T dot = 0;
              for (int j = 0; j < J; ++j) dot += dP(i, j) * Pm(i, j);
              for (int j = 0; j < J; ++j) {
                T ds = Pm(i, j) * (dP(i, j) - dot);
                if (mask && !(*mask)(i, j)) ds = T(0);  // additive: P == 0; hadamard: d(S*0)/dS == 0
                dS(i, j) = ds * inv_sqrt;
              }
            }
            (void)mode;
            if (gq) MStrided(gq->data() + qoff, I, dh, Eigen::OuterStride<>(D)).noalias() += dS * Kh;
            if (gk) MStrided(gk->data() + koff, J, dh, Eigen::OuterStride<>(D)).noalias() += dS.transpose() * Qh;
          }
        }
      });
}

// ---------------------------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  double s = 0;
  for (T v : x.value().storage()) s += v;
  const std::size_t n = x.value().size();
  Tensor<T> out({1}, static_cast<T>(s / static_cast<double>(n)));
  return make_result<T>(std::move(out), {x}, [n](Node<T>& self) {
    if (auto* g = grad_sink(self, 0)) {
      const T d = self.grad[0] / static_cast<T>(n);
      for (auto& v : g->storage()) v += d;
    }
  });
}

/// Mean squared error against a constant target.
template <typename T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
  require(pred.value().same_shape(target), ErrorKind::shape,
          "mse: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  double s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target[i];
    s += d * d;
  }
  const std::size_t n = target.size();
  Tensor<T> out({1}, static_cast<T>(s / static_cast<double>(n)));
  return make_result<T>(std::move(out), {pred}, [n, target](Node<T>& self) {
    if (auto* g = grad_sink(self, 0)) {
      const T c = T(2) * self.grad[0] / static_cast<T>(n);
      const auto& pv = self.inputs[0]->value;
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += c * (pv[i] - target[i]);
    }
  });
}

/// Mean absolute error against a constant target (subgradient 0 at ties).
template <typename T>
Var<T> l1(const Var<T>& pred, const Tensor<T>& target) {
  require(pred.value().same_shape(target), ErrorKind::shape, "l1: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) s += std::abs(static_cast<double>(pred.value()[i]) - target[i]);
  const std::size_t n = target.size();
  Tensor<T> out({1}, static_cast<T>(s / static_cast<double>(n)));
  return make_result<T>(std::move(out), {pred}, [n, target](Node<T>& self) {
    if (auto* g = grad_sink(self, 0)) {
      const T c = self.grad[0] / static_cast<T>(n);
      const auto& pv = self.inputs[0]->value;
      for (std::size_t i = 0; i < n; ++i) {
        const T d = pv[i] - target[i];
        (*g)[i] += d > 0 ? c : (d < 0 ? -c : T(0));
      }
    }
  });
}

}  // namespace cnc::ops
