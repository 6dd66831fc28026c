#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "adr/tensor.hpp"

namespace adr {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t rank, std::string_view op,
                         std::string_view arg = "input") {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + std::string(arg) + " must be rank " +
                     std::to_string(rank) + ", got " + to_string(s));
  }
}

template <class T>
void check_finite_values(std::span<const T> v, std::string_view op) {
  if (!checked_mode()) return;
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

/// Flat index into `in` for every flat index of `out`, for a same-rank
/// broadcast where each input dimension equals the output or is 1.
inline std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t d = rank; d-- > 0;) {
    in_stride[d] = in[d] == 1 ? 0 : stride;
    stride *= in[d];
  }
  std::vector<std::size_t> map(numel(out));
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    map[i] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += in_stride[d];
      if (idx[d] < out[d]) break;
      offset -= in_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

inline Shape pad_left(const Shape& s, std::size_t rank) {
  Shape r(rank - s.size(), 1);
  r.insert(r.end(), s.begin(), s.end());
  return r;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa = pad_left(a, rank), pb = pad_left(b, rank), out(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] == pb[d] || pb[d] == 1) {
      out[d] = pa[d];
    } else if (pa[d] == 1) {
      out[d] = pb[d];
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                       to_string(b) + " at dimension " + std::to_string(d));
    }
  }
  return out;
}

/// Elementwise unary op. `deriv(x, y)` returns dy/dx.
template <class T, class F, class D>
Tensor<T> unary(std::string_view op, const Tensor<T>& x, F f, D deriv) {
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xs[i]);
  return make_result<T>(op, x.shape(), std::move(y), {x}, [deriv](Node<T>& out) {
    auto& in = *out.parents[0];
    for (std::size_t i = 0; i < out.value.size(); ++i) {
      in.grad[i] += out.grad[i] * deriv(in.value[i], out.value[i]);
    }
  });
}

enum class BinaryKind { add, sub, mul, div, pow };

template <class T>
Tensor<T> binary(BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  static constexpr std::string_view names[] = {"add", "sub", "mul", "div", "pow"};
  const std::string_view op = names[static_cast<int>(kind)];
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  const std::size_t n = numel(out_shape);
  const bool a_same = a.shape() == out_shape;
  const bool b_same = b.shape() == out_shape;
  std::vector<std::size_t> amap, bmap;
  if (!a_same) amap = broadcast_map(out_shape, pad_left(a.shape(), out_shape.size()));
  if (!b_same) bmap = broadcast_map(out_shape, pad_left(b.shape(), out_shape.size()));
  const auto av = a.data();
  const auto bv = b.data();
  auto ai = [&](std::size_t i) { return a_same ? i : amap[i]; };
  auto bi = [&](std::size_t i) { return b_same ? i : bmap[i]; };

  std::vector<T> y(n);
  const bool checked = checked_mode();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[ai(i)], z = bv[bi(i)];
    switch (kind) {
      case BinaryKind::add: y[i] = x + z; break;
      case BinaryKind::sub: y[i] = x - z; break;
      case BinaryKind::mul: y[i] = x * z; break;
      case BinaryKind::div:
        if (checked && z == T(0)) throw NumericError("div: division by zero");
        y[i] = x / z;
        break;
      case BinaryKind::pow:
        if (checked && !(x > T(0))) throw NumericError("pow: non-positive base with tensor exponent");
        y[i] = std::pow(x, z);
        break;
    }
  }
  return make_result<T>(
      op, out_shape, std::move(y), {a, b},
      [kind, a_same, b_same, amap = std::move(amap), bmap = std::move(bmap)](Node<T>& out) {
        auto& pa = out.parents[0];
        auto& pb = out.parents[1];
        const bool ga = wants_grad(pa), gb = wants_grad(pb);
        for (std::size_t i = 0; i < out.value.size(); ++i) {
          const std::size_t ia = a_same ? i : amap[i];
          const std::size_t ib = b_same ? i : bmap[i];
          const T g = out.grad[i];
          const T x = pa->value[ia], z = pb->value[ib];
          switch (kind) {
            case BinaryKind::add:
              if (ga) pa->grad[ia] += g;
              if (gb) pb->grad[ib] += g;
              break;
            case BinaryKind::sub:
              if (ga) pa->grad[ia] += g;
              if (gb) pb->grad[ib] -= g;
              break;
            case BinaryKind::mul:
              if (ga) pa->grad[ia] += g * z;
              if (gb) pb->grad[ib] += g * x;
              break;
            case BinaryKind::div:
              if (ga) pa->grad[ia] += g / z;
              if (gb) pb->grad[ib] -= g * x / (z * z);
              break;
            case BinaryKind::pow:
              if (ga) pa->grad[ia] += g * z * std::pow(x, z - T(1));
              if (gb) pb->grad[ib] += g * out.value[i] * std::log(x);
              break;
          }
        }
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::add, a, b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::sub, a, b);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::mul, a, b);
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::div, a, b);
}
/// a^b with a tensor exponent; requires a > 0 in checked mode.
template <class T>
Tensor<T> pow(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(detail::BinaryKind::pow, a, b);
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::unary<T>("mul_scalar", x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}
/// s - x
template <class T>
Tensor<T> rsub_scalar(T s, const Tensor<T>& x) {
  return detail::unary<T>("rsub_scalar", x, [s](T v) { return s - v; }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary<T>("neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
  if (checked_mode() && p != std::floor(p)) {
    for (T v : x.data()) {
      if (!(v > T(0))) throw NumericError("pow_scalar: non-positive base with fractional exponent");
    }
  }
  return detail::unary<T>(
      "pow_scalar", x, [p](T v) { return std::pow(v, p); },
      [p](T v, T) { return p * std::pow(v, p - T(1)); });
}
template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}
template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log(const Tensor<T>& x) {
  if (checked_mode()) {
    for (T v : x.data()) {
      if (!(v > T(0))) throw NumericError("log: non-positive argument");
    }
  }
  return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
/// |x| with subgradient 0 at x = 0.
template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}
/// max(x, lo); the gradient passes where x >= lo.
template <class T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  return detail::unary<T>(
      "clamp_min", x, [lo](T v) { return v < lo ? lo : v; },
      [lo](T v, T) { return v >= lo ? T(1) : T(0); });
}
template <class T>
Tensor<T> clamp01(const Tensor<T>& x) {
  return detail::unary<T>(
      "clamp01", x, [](T v) { return std::clamp(v, T(0), T(1)); },
      [](T v, T) { return (v >= T(0) && v <= T(1)) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { relu, sigmoid, tanh, gelu };

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}
/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

template <class T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
  switch (kind) {
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
    case Activation::gelu: return gelu(x);
  }
  throw std::invalid_argument("unknown activation");
}

// ---------------------------------------------------------------------------
// Reductions and layout

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("sum: empty tensor");
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>("sum", Shape{1}, {acc}, {x}, [](Node<T>& out) {
    auto& in = *out.parents[0];
    for (auto& g : in.grad) g += out.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  T acc = T(0);
  for (T v : x.data()) acc += v;
  const T count = static_cast<T>(x.numel());
  return detail::make_result<T>("mean", Shape{1}, {acc / count}, {x}, [count](Node<T>& out) {
    auto& in = *out.parents[0];
    const T g = out.grad[0] / count;
    for (auto& v : in.grad) v += g;
  });
}

enum class Reduce { sum, mean };

/// Reduces over the listed axes, keeping them as size-1 dimensions.
template <class T>
Tensor<T> reduce(Reduce kind, const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  if (x.numel() == 0) throw ShapeError("reduce: empty tensor");
  Shape out_shape = x.shape();
  std::size_t count = 1;
  for (auto a : axes) {
    if (a >= x.rank()) {
      throw ShapeError("reduce: axis " + std::to_string(a) + " out of range for " + to_string(x.shape()));
    }
    count *= out_shape[a];
    out_shape[a] = 1;
  }
  auto map = detail::broadcast_map(x.shape(), out_shape);
  std::vector<T> y(numel(out_shape), T(0));
  const auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) y[map[i]] += xs[i];
  const T scale = kind == Reduce::mean ? T(1) / static_cast<T>(count) : T(1);
  if (kind == Reduce::mean) {
    for (auto& v : y) v *= scale;
  }
  return detail::make_result<T>("reduce", out_shape, std::move(y), {x},
                                [map = std::move(map), scale](Node<T>& out) {
                                  auto& in = *out.parents[0];
                                  for (std::size_t i = 0; i < in.grad.size(); ++i) {
                                    in.grad[i] += out.grad[map[i]] * scale;
                                  }
                                });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::make_result<T>("reshape", std::move(shape), x.values(), {x}, [](Node<T>& out) {
    auto& in = *out.parents[0];
    for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += out.grad[i];
  });
}

/// General axis permutation: output dim i is input dim perm[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank) throw ShapeError("permute: permutation length must equal rank");
  Shape out_shape(rank);
  std::vector<std::size_t> in_stride(rank);
  {
    std::size_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
      in_stride[d] = s;
      s *= x.shape()[d];
    }
  }
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (perm[i] >= rank) throw ShapeError("permute: axis out of range");
    out_shape[i] = x.shape()[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    map[i] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      offset -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xs[map[i]];
  return detail::make_result<T>("permute", out_shape, std::move(y), {x},
                                [map = std::move(map)](Node<T>& out) {
                                  auto& in = *out.parents[0];
                                  for (std::size_t i = 0; i < map.size(); ++i) {
                                    in.grad[map[i]] += out.grad[i];
                                  }
                                });
}

/// Concatenates N×Cᵢ×H×W tensors along the channel axis, in list order.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: empty input list");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    detail::require_rank(inputs[i].shape(), 4, "concat_channels", "input " + std::to_string(i));
  }
  const auto& s0 = inputs[0].shape();
  std::size_t channels = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& s = inputs[i].shape();
    for (std::size_t d : {0u, 2u, 3u}) {
      if (s[d] != s0[d]) {
        throw ShapeError("concat_channels: input " + std::to_string(i) + " has shape " + to_string(s) +
                         ", mismatching input 0 " + to_string(s0) + " at dimension " + std::to_string(d));
      }
    }
    channels += s[1];
  }
  const std::size_t n = s0[0], hw = s0[2] * s0[3];
  std::vector<T> y(n * channels * hw);
  std::vector<std::size_t> offsets;
  std::size_t c0 = 0;
  for (const auto& in : inputs) {
    offsets.push_back(c0);
    const std::size_t c = in.dim(1);
    const auto xs = in.data();
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(xs.begin() + b * c * hw, c * hw, y.begin() + (b * channels + c0) * hw);
    }
    c0 += c;
  }
  return detail::make_result<T>(
      "concat_channels", Shape{n, channels, s0[2], s0[3]}, std::move(y), inputs,
      [offsets = std::move(offsets), n, channels, hw](Node<T>& out) {
        for (std::size_t k = 0; k < out.parents.size(); ++k) {
          auto& p = out.parents[k];
          if (!detail::wants_grad(p)) continue;
          const std::size_t c = p->shape[1];
          for (std::size_t b = 0; b < n; ++b) {
            const T* src = out.grad.data() + (b * channels + offsets[k]) * hw;
            T* dst = p->grad.data() + b * c * hw;
            for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
          }
        }
      });
}

/// Channels [start, start+count) of an NCHW tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_rank(x.shape(), 4, "slice_channels");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (start + count > c || count == 0) {
    throw ShapeError("slice_channels: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + std::to_string(c) + " channels");
  }
  std::vector<T> y(n * count * hw);
  const auto xs = x.data();
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(xs.begin() + (b * c + start) * hw, count * hw, y.begin() + b * count * hw);
  }
  return detail::make_result<T>(
      "slice_channels", Shape{n, count, x.dim(2), x.dim(3)}, std::move(y), {x},
      [n, c, hw, start, count](Node<T>& out) {
        auto& in = *out.parents[0];
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t i = 0; i < count * hw; ++i) {
            in.grad[(b * c + start) * hw + i] += out.grad[b * count * hw + i];
          }
        }
      });
}

/// Concatenation along the batch axis.
template <class T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ShapeError("stack_batch: empty input list");
  Shape s = items[0].shape();
  std::size_t n = 0;
  std::vector<T> y;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& si = items[i].shape();
    if (si.size() != s.size() || !std::equal(si.begin() + 1, si.end(), s.begin() + 1)) {
      throw ShapeError("stack_batch: item " + std::to_string(i) + " has shape " + to_string(si));
    }
    n += si[0];
    y.insert(y.end(), items[i].data().begin(), items[i].data().end());
  }
  s[0] = n;
  return detail::make_result<T>("stack_batch", s, std::move(y), items, [](Node<T>& out) {
    std::size_t off = 0;
    for (auto& p : out.parents) {
      const std::size_t len = p->value.size();
      if (detail::wants_grad(p)) {
        for (std::size_t i = 0; i < len; ++i) p->grad[i] += out.grad[off + i];
      }
      off += len;
    }
  });
}

/// Item b of the batch axis, keeping a leading dimension of 1.
template <class T>
Tensor<T> batch_item(const Tensor<T>& x, std::size_t b) {
  Shape s = x.shape();
  if (s.empty() || b >= s[0]) throw ShapeError("batch_item: index out of range");
  const std::size_t len = x.numel() / s[0];
  s[0] = 1;
  std::vector<T> y(x.data().begin() + b * len, x.data().begin() + (b + 1) * len);
  return detail::make_result<T>("batch_item", s, std::move(y), {x}, [b, len](Node<T>& out) {
    auto& in = *out.parents[0];
    for (std::size_t i = 0; i < len; ++i) in.grad[b * len + i] += out.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

/// x: N×F, weight: G×F, bias: G (may be undefined) -> N×G.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank(x.shape(), 2, "linear");
  detail::require_rank(weight.shape(), 2, "linear", "weight");
  const std::size_t n = x.dim(0), f = x.dim(1), g = weight.dim(0);
  if (weight.dim(1) != f) {
    throw ShapeError("linear: input features (dim 1) = " + std::to_string(f) +
                     " but weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.defined() && bias.numel() != g) {
    throw ShapeError("linear: bias length " + std::to_string(bias.numel()) + " != out features " +
                     std::to_string(g));
  }
  std::vector<T> y(n * g);
  {
    detail::CMapMat<T> X(x.data().data(), n, f), W(weight.data().data(), g, f);
    detail::MapMat<T> Y(y.data(), n, g);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < g; ++c) Y(r, c) += bias[c];
    }
  }
  return detail::make_result<T>("linear", Shape{n, g}, std::move(y), {x, weight, bias},
                                [n, f, g](Node<T>& out) {
                                  auto& px = out.parents[0];
                                  auto& pw = out.parents[1];
                                  auto& pb = out.parents[2];
                                  detail::CMapMat<T> G(out.grad.data(), n, g);
                                  if (detail::wants_grad(px)) {
                                    detail::MapMat<T> GX(px->grad.data(), n, f);
                                    detail::CMapMat<T> W(pw->value.data(), g, f);
                                    GX.noalias() += G * W;
                                  }
                                  if (detail::wants_grad(pw)) {
                                    detail::MapMat<T> GW(pw->grad.data(), g, f);
                                    detail::CMapMat<T> X(px->value.data(), n, f);
                                    GW.noalias() += G.transpose() * X;
                                  }
                                  if (detail::wants_grad(pb)) {
                                    for (std::size_t r = 0; r < n; ++r)
                                      for (std::size_t c = 0; c < g; ++c) pb->grad[c] += G(r, c);
                                  }
                                });
}

/// a: B×M×K, b: B×K×P -> B×M×P.
template <class T>
Tensor<T> matmul_batched(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 3, "matmul_batched", "a");
  detail::require_rank(b.shape(), 3, "matmul_batched", "b");
  const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), P = b.dim(2);
  if (b.dim(0) != B) throw ShapeError("matmul_batched: batch dims differ (dim 0)");
  if (b.dim(1) != K) {
    throw ShapeError("matmul_batched: inner dims differ, a dim 2 = " + std::to_string(K) +
                     ", b dim 1 = " + std::to_string(b.dim(1)));
  }
  std::vector<T> y(B * M * P);
  for (std::size_t i = 0; i < B; ++i) {
    detail::CMapMat<T> A(a.data().data() + i * M * K, M, K), Bm(b.data().data() + i * K * P, K, P);
    detail::MapMat<T> Y(y.data() + i * M * P, M, P);
    Y.noalias() = A * Bm;
  }
  return detail::make_result<T>("matmul_batched", Shape{B, M, P}, std::move(y), {a, b},
                                [B, M, K, P](Node<T>& out) {
                                  auto& pa = out.parents[0];
                                  auto& pb = out.parents[1];
                                  for (std::size_t i = 0; i < B; ++i) {
                                    detail::CMapMat<T> G(out.grad.data() + i * M * P, M, P);
                                    if (detail::wants_grad(pa)) {
                                      detail::MapMat<T> GA(pa->grad.data() + i * M * K, M, K);
                                      detail::CMapMat<T> Bm(pb->value.data() + i * K * P, K, P);
                                      GA.noalias() += G * Bm.transpose();
                                    }
                                    if (detail::wants_grad(pb)) {
                                      detail::MapMat<T> GB(pb->grad.data() + i * K * P, K, P);
                                      detail::CMapMat<T> A(pa->value.data() + i * M * K, M, K);
                                      GB.noalias() += A.transpose() * G;
                                    }
                                  }
                                });
}

/// Softmax over the last axis with max subtraction.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("softmax_lastdim: empty last dimension");
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  std::vector<T> y(x.numel());
  const auto xs = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xs.data() + r * d;
    T* o = y.data() + r * d;
    const T m = *std::max_element(in, in + d);
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - m);
      s += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= s;
  }
  return detail::make_result<T>("softmax_lastdim", x.shape(), std::move(y), {x}, [d, rows](Node<T>& out) {
    auto& in = *out.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yv = out.value.data() + r * d;
      const T* g = out.grad.data() + r * d;
      T dot = T(0);
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * yv[j];
      for (std::size_t j = 0; j < d; ++j) in.grad[r * d + j] += yv[j] * (g[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial ops (NCHW)

namespace detail {

template <class T>
void im2col(const T* img, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ch * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - p;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(dst, wo, T(0));
            continue;
          }
          const T* src = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - p;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                std::size_t pad, std::size_t ho, std::size_t wo, T* img) {
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ch * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - p;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = img + (ch * h + static_cast<std::size_t>(iy)) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - p;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

/// Source index pairs and weights for align-corners=false linear resampling
/// of one axis from `in` to `out` samples.
template <class T>
struct AxisInterp {
  std::vector<std::size_t> lo, hi;
  std::vector<T> w_hi;
};

template <class T>
AxisInterp<T> axis_interp(std::size_t in, std::size_t out) {
  AxisInterp<T> a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.w_hi.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    a.lo[o] = i0;
    a.hi[o] = i1;
    a.w_hi[o] = static_cast<T>(src - static_cast<double>(i0));
  }
  return a;
}

}  // namespace detail

/// 2-D cross-correlation. weight: Cout×Cin×k×k, bias: Cout (may be undefined).
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t pad = 0) {
  detail::require_rank(input.shape(), 4, "conv2d");
  detail::require_rank(weight.shape(), 4, "conv2d", "weight");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: input channels (dim 1) = " + std::to_string(cin) +
                     " but weight expects " + std::to_string(weight.dim(1)));
  }
  if (weight.dim(3) != k) throw ShapeError("conv2d: kernel must be square (weight dims 2, 3)");
  if (bias.defined() && bias.numel() != cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.numel()) + " != output channels " +
                     std::to_string(cout));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (h + 2 * pad < k || w + 2 * pad < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " + to_string(input.shape()));
  }
  const std::size_t ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  const std::size_t ckk = cin * k * k, hw_in = h * w, hw_out = ho * wo;
  const bool pointwise = k == 1 && stride == 1 && pad == 0;

  std::vector<T> y(n * cout * hw_out);
  std::vector<T> cols(pointwise ? 0 : ckk * hw_out);
  detail::CMapMat<T> W(weight.data().data(), cout, ckk);
  for (std::size_t b = 0; b < n; ++b) {
    const T* img = input.data().data() + b * cin * hw_in;
    if (!pointwise) detail::im2col(img, cin, h, w, k, stride, pad, ho, wo, cols.data());
    detail::CMapMat<T> C(pointwise ? img : cols.data(), ckk, hw_out);
    detail::MapMat<T> Y(y.data() + b * cout * hw_out, cout, hw_out);
    Y.noalias() = W * C;
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) Y.row(o).array() += bias[o];
    }
  }
  return detail::make_result<T>(
      "conv2d", Shape{n, cout, ho, wo}, std::move(y), {input, weight, bias},
      [=](Node<T>& out) {
        auto& px = out.parents[0];
        auto& pw = out.parents[1];
        auto& pb = out.parents[2];
        const bool gx = detail::wants_grad(px), gw = detail::wants_grad(pw), gb = detail::wants_grad(pb);
        std::vector<T> buf(pointwise ? 0 : ckk * hw_out);
        detail::CMapMat<T> Wt(pw->value.data(), cout, ckk);
        for (std::size_t b = 0; b < n; ++b) {
          detail::CMapMat<T> G(out.grad.data() + b * cout * hw_out, cout, hw_out);
          const T* img = px->value.data() + b * cin * hw_in;
          if (gw) {
            if (!pointwise) detail::im2col(img, cin, h, w, k, stride, pad, ho, wo, buf.data());
            detail::CMapMat<T> C(pointwise ? img : buf.data(), ckk, hw_out);
            detail::MapMat<T> GW(pw->grad.data(), cout, ckk);
            GW.noalias() += G * C.transpose();
          }
          if (gb) {
            const T* g = out.grad.data() + b * cout * hw_out;
            for (std::size_t o = 0; o < cout; ++o) {
              T s = T(0);
              for (std::size_t i = 0; i < hw_out; ++i) s += g[o * hw_out + i];
              pb->grad[o] += s;
            }
          }
          if (gx) {
            if (pointwise) {
              detail::MapMat<T> GX(px->grad.data() + b * cin * hw_in, cin, hw_in);
              GX.noalias() += Wt.transpose() * G;
            } else {
              detail::MapMat<T> GC(buf.data(), ckk, hw_out);
              GC.noalias() = Wt.transpose() * G;
              detail::col2im_add(buf.data(), cin, h, w, k, stride, pad, ho, wo,
                                 px->grad.data() + b * cin * hw_in);
            }
          }
        }
      });
}

/// Non-overlapping k×k max pooling. Ties route the gradient to the first
/// maximum in row-major window order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k = 2) {
  detail::require_rank(x.shape(), 4, "max_pool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || h % k != 0) {
    throw ShapeError("max_pool2d: height (dim 2) = " + std::to_string(h) + " not divisible by " + std::to_string(k));
  }
  if (w % k != 0) {
    throw ShapeError("max_pool2d: width (dim 3) = " + std::to_string(w) + " not divisible by " + std::to_string(k));
  }
  const std::size_t ho = h / k, wo = w / k;
  std::vector<T> y(n * c * ho * wo);
  std::vector<std::size_t> arg(y.size());
  const auto xs = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* plane = xs.data() + p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = (oy * k) * w + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy) {
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t idx = (oy * k + dy) * w + ox * k + dx;
            if (plane[idx] > plane[best]) best = idx;
          }
        }
        const std::size_t o = (p * ho + oy) * wo + ox;
        y[o] = plane[best];
        arg[o] = p * h * w + best;
      }
    }
  }
  return detail::make_result<T>("max_pool2d", Shape{n, c, ho, wo}, std::move(y), {x},
                                [arg = std::move(arg)](Node<T>& out) {
                                  auto& in = *out.parents[0];
                                  for (std::size_t i = 0; i < arg.size(); ++i) in.grad[arg[i]] += out.grad[i];
                                });
}

/// Bilinear resampling to an arbitrary size, align-corners = false.
template <class T>
Tensor<T> interp_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x.shape(), 4, "interp_bilinear");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == 0 || w == 0 || out_h == 0 || out_w == 0) throw ShapeError("interp_bilinear: empty spatial extent");
  auto ay = detail::axis_interp<T>(h, out_h);
  auto ax = detail::axis_interp<T>(w, out_w);
  std::vector<T> y(n * c * out_h * out_w);
  const auto xs = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xs.data() + p * h * w;
    T* dst = y.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T wy = ay.w_hi[oy];
      const T* r0 = src + ay.lo[oy] * w;
      const T* r1 = src + ay.hi[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T wx = ax.w_hi[ox];
        const std::size_t x0 = ax.lo[ox], x1 = ax.hi[ox];
        const T top = r0[x0] * (T(1) - wx) + r0[x1] * wx;
        const T bot = r1[x0] * (T(1) - wx) + r1[x1] * wx;
        dst[oy * out_w + ox] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return detail::make_result<T>(
      "interp_bilinear", Shape{n, c, out_h, out_w}, std::move(y), {x},
      [n, c, h, w, out_h, out_w, ay = std::move(ay), ax = std::move(ax)](Node<T>& out) {
        auto& in = *out.parents[0];
        for (std::size_t p = 0; p < n * c; ++p) {
          T* g = in.grad.data() + p * h * w;
          const T* go = out.grad.data() + p * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T wy = ay.w_hi[oy];
            T* r0 = g + ay.lo[oy] * w;
            T* r1 = g + ay.hi[oy] * w;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const T wx = ax.w_hi[ox];
              const T v = go[oy * out_w + ox];
              const std::size_t x0 = ax.lo[ox], x1 = ax.hi[ox];
              r0[x0] += v * (T(1) - wy) * (T(1) - wx);
              r0[x1] += v * (T(1) - wy) * wx;
              r1[x0] += v * wy * (T(1) - wx);
              r1[x1] += v * wy * wx;
            }
          }
        }
      });
}

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t scale) {
  if (scale == 0) throw ShapeError("upsample_bilinear: scale must be >= 1");
  detail::require_rank(x.shape(), 4, "upsample_bilinear");
  return interp_bilinear(x, x.dim(2) * scale, x.dim(3) * scale);
}

/// N×C×H×W -> N×C spatial mean.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  const T inv = T(1) / static_cast<T>(hw);
  std::vector<T> y(n * c);
  const auto xs = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    T s = T(0);
    for (std::size_t i = 0; i < hw; ++i) s += xs[p * hw + i];
    y[p] = s * inv;
  }
  return detail::make_result<T>("global_avg_pool", Shape{n, c}, std::move(y), {x}, [hw, inv](Node<T>& out) {
    auto& in = *out.parents[0];
    for (std::size_t p = 0; p < out.value.size(); ++p) {
      const T g = out.grad[p] * inv;
      for (std::size_t i = 0; i < hw; ++i) in.grad[p * hw + i] += g;
    }
  });
}

/// Depthwise separable filtering with a fixed 1-D kernel applied along both
/// axes, keeping only windows that fit entirely inside the image.
template <class T>
Tensor<T> separable_filter_valid(const Tensor<T>& x, const std::vector<T>& kernel) {
  detail::require_rank(x.shape(), 4, "separable_filter_valid");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), k = kernel.size();
  if (k == 0 || h < k || w < k) {
    throw ShapeError("separable_filter_valid: image " + to_string(x.shape()) + " smaller than window " +
                     std::to_string(k));
  }
  const std::size_t ho = h - k + 1, wo = w - k + 1;
  std::vector<T> y(n * c * ho * wo);
  std::vector<T> tmp(h * wo);
  const auto xs = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xs.data() + p * h * w;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t j = 0; j < wo; ++j) {
        T s = T(0);
        for (std::size_t b = 0; b < k; ++b) s += kernel[b] * src[r * w + j + b];
        tmp[r * wo + j] = s;
      }
    }
    T* dst = y.data() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        T s = T(0);
        for (std::size_t a = 0; a < k; ++a) s += kernel[a] * tmp[(i + a) * wo + j];
        dst[i * wo + j] = s;
      }
    }
  }
  return detail::make_result<T>(
      "separable_filter_valid", Shape{n, c, ho, wo}, std::move(y), {x},
      [n, c, h, w, k, ho, wo, kernel](Node<T>& out) {
        auto& in = *out.parents[0];
        std::vector<T> gtmp(h * wo);
        for (std::size_t p = 0; p < n * c; ++p) {
          std::fill(gtmp.begin(), gtmp.end(), T(0));
          const T* go = out.grad.data() + p * ho * wo;
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t j = 0; j < wo; ++j) gtmp[(i + a) * wo + j] += kernel[a] * go[i * wo + j];
          T* g = in.grad.data() + p * h * w;
          for (std::size_t r = 0; r < h; ++r)
            for (std::size_t j = 0; j < wo; ++j)
              for (std::size_t b = 0; b < k; ++b) g[r * w + j + b] += kernel[b] * gtmp[r * wo + j];
        }
      });
}

/// Layer normalization over the last axis with affine gain and shift
/// (shapes broadcastable against the last axis).
template <class T>
Tensor<T> layer_norm_lastdim(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps = T(1e-5)) {
  const std::size_t last = x.rank() - 1;
  auto centered = sub(x, reduce(Reduce::mean, x, {last}));
  auto var = reduce(Reduce::mean, square(centered), {last});
  auto normed = mul(centered, pow_scalar(add_scalar(var, eps), T(-0.5)));
  return add(mul(normed, gain), shift);
}

}  // namespace adr
