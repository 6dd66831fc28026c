#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "adr/nn.hpp"
#include "adr/pipeline.hpp"

namespace adr {

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double c1 = 1e-4;
  double c2 = 9e-4;
};

/// Normalized 1-D Gaussian taps.
template <class T>
std::vector<T> gaussian_kernel(std::size_t size, double sigma) {
  std::vector<double> k(size);
  const double c = (static_cast<double>(size) - 1) / 2;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    k[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += k[i];
  }
  std::vector<T> out(size);
  for (std::size_t i = 0; i < size; ++i) out[i] = static_cast<T>(k[i] / total);
  return out;
}

namespace detail {
inline void require_same_shape(const Shape& a, const Shape& b, std::string_view who) {
  if (a != b) throw ShapeError(std::string(who) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}
}  // namespace detail

/// Per-window SSIM map over N×C×H×W images (valid windows only).
template <class T>
Tensor<T> ssim_map(const Tensor<T>& x, const Tensor<T>& y, const SsimParams& p = {}) {
  detail::require_same_shape(x.shape(), y.shape(), "ssim");
  if (x.rank() != 4) throw ShapeError("ssim: expected N×C×H×W, got " + to_string(x.shape()));
  const auto k = gaussian_kernel<T>(p.window, p.sigma);
  auto mx = separable_filter_valid(x, k);
  auto my = separable_filter_valid(y, k);
  auto mxx = mul(mx, mx), myy = mul(my, my), mxy = mul(mx, my);
  auto sxx = sub(separable_filter_valid(mul(x, x), k), mxx);
  auto syy = sub(separable_filter_valid(mul(y, y), k), myy);
  auto sxy = sub(separable_filter_valid(mul(x, y), k), mxy);
  const T c1 = static_cast<T>(p.c1), c2 = static_cast<T>(p.c2);
  auto num = mul(add_scalar(mul_scalar(mxy, T(2)), c1), add_scalar(mul_scalar(sxy, T(2)), c2));
  auto den = mul(add_scalar(add(mxx, myy), c1), add_scalar(add(sxx, syy), c2));
  return div(num, den);
}

/// Mean SSIM over all windows, channels and batch items. 1 for x = y.
template <class T>
Tensor<T> ssim(const Tensor<T>& x, const Tensor<T>& y, const SsimParams& p = {}) {
  return mean(ssim_map(x, y, p));
}

template <class T>
Tensor<T> ssim_loss(const Tensor<T>& pred, const Tensor<T>& target, const SsimParams& p = {}) {
  return rsub_scalar(T(1), ssim(pred, target, p));
}

template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred.shape(), target.shape(), "l1_loss");
  return mean(abs(sub(pred, target)));
}

template <class T>
Tensor<T> dehaze_loss(const Tensor<T>& J_dehazed, const Tensor<T>& J_gt) {
  detail::require_same_shape(J_dehazed.shape(), J_gt.shape(), "dehaze_loss");
  return mean(abs(sub(J_dehazed, J_gt)));
}

/// mean |L·R − J| with the single-channel L broadcast over R's channels.
template <class T>
Tensor<T> retinex_loss(const Tensor<T>& L, const Tensor<T>& R, const Tensor<T>& J_gt) {
  detail::require_same_shape(R.shape(), J_gt.shape(), "retinex_loss");
  if (L.rank() != 4 || L.dim(1) != 1 || L.dim(0) != R.dim(0) || L.dim(2) != R.dim(2) || L.dim(3) != R.dim(3)) {
    throw ShapeError("retinex_loss: illumination " + to_string(L.shape()) + " does not match reflectance " +
                     to_string(R.shape()));
  }
  return mean(abs(sub(mul(L, R), J_gt)));
}

/// Frozen VGG-style feature extractor: four conv-ReLU-conv-ReLU blocks of
/// widths 16, 32, 64, 128 with 2×2 max-pooling between blocks.
template <class T>
class PhiNetwork {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0xADA0;
  static constexpr std::size_t kWidths[4] = {16, 32, 64, 128};

  explicit PhiNetwork(std::uint64_t seed = kDefaultSeed) : store_(seed) {
    std::size_t cin = 3;
    for (std::size_t b = 0; b < 4; ++b) {
      const std::string name = "phi.block" + std::to_string(b);
      blocks_[b][0] = Conv2d<T>(store_, name + ".conv0", cin, kWidths[b], 3, false);
      blocks_[b][1] = Conv2d<T>(store_, name + ".conv1", kWidths[b], kWidths[b], 3, false);
      cin = kWidths[b];
    }
  }

  PhiNetwork(const PhiNetwork&) = delete;
  PhiNetwork& operator=(const PhiNetwork&) = delete;

  const ParameterStore<T>& parameters() const { return store_; }

  /// Output of each block's last ReLU.
  std::vector<Tensor<T>> features(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("phi: expected N×3×H×W, got " + to_string(x.shape()));
    std::vector<Tensor<T>> out;
    Tensor<T> h = x;
    for (std::size_t b = 0; b < 4; ++b) {
      if (b > 0) h = max_pool2d(h);
      h = relu(blocks_[b][1](relu(blocks_[b][0](h))));
      out.push_back(h);
    }
    return out;
  }

 private:
  ParameterStore<T> store_;
  Conv2d<T> blocks_[4][2];
};

/// Σ over blocks of the mean squared feature difference.
template <class T>
Tensor<T> perceptual_loss(const Tensor<T>& pred, const Tensor<T>& target, const PhiNetwork<T>& phi) {
  detail::require_same_shape(pred.shape(), target.shape(), "perceptual_loss");
  const auto fp = phi.features(pred);
  std::vector<Tensor<T>> ft;
  {
    NoGradGuard ng;
    ft = phi.features(target);
  }
  Tensor<T> total;
  for (std::size_t b = 0; b < fp.size(); ++b) {
    auto term = mean(square(sub(fp[b], ft[b])));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

struct LossWeights {
  double lambda1 = 1.0, lambda2 = 0.5, lambda3 = 0.1, lambda4 = 0.3, lambda5 = 0.2;
};

/// Which terms enter the total. A disabled term is neither evaluated nor
/// differentiated and is reported as 0.
struct LossMask {
  bool l1 = true, ssim = true, perc = true, dehaze = true, retinex = true;
};

template <class T>
struct LossReport {
  Tensor<T> total;  // differentiable
  double l1 = 0, ssim = 0, perc = 0, dehaze = 0, retinex = 0;
  double total_value = 0;
  bool retinex_active = false;
};

/// λ1·L1 + λ2·SSIM + λ3·perc + λ4·dehaze + λ5·retinex, accumulated in that order.
template <class T>
LossReport<T> total_loss(const PipelineOutput<T>& out, const Tensor<T>& J_gt, const PhiNetwork<T>& phi,
                         const LossWeights& w = {}, const LossMask& mask = {}) {
  LossReport<T> r;
  auto accumulate = [&](bool on, double lambda, auto&& term, double& slot) {
    if (!on) return;
    Tensor<T> v = term();
    slot = double(v.item());
    auto weighted = mul_scalar(v, static_cast<T>(lambda));
    r.total = r.total.defined() ? add(r.total, weighted) : weighted;
  };
  const bool has_retinex = out.stage2.L.defined();
  r.retinex_active = has_retinex;
  accumulate(mask.l1, w.lambda1, [&] { return l1_loss(out.J_enhanced, J_gt); }, r.l1);
  accumulate(mask.ssim, w.lambda2, [&] { return ssim_loss(out.J_enhanced, J_gt); }, r.ssim);
  accumulate(mask.perc, w.lambda3, [&] { return perceptual_loss(out.J_enhanced, J_gt, phi); }, r.perc);
  accumulate(mask.dehaze, w.lambda4, [&] { return dehaze_loss(out.stage1.J_dehazed, J_gt); }, r.dehaze);
  accumulate(mask.retinex && has_retinex, w.lambda5, [&] { return retinex_loss(out.stage2.L, out.stage2.R, J_gt); },
             r.retinex);
  if (!r.total.defined()) r.total = Tensor<T>::scalar(T(0));
  r.total_value = double(r.total.item());
  return r;
}

/// Recomputes the weighted total from the reported terms with the same
/// precision and order as `total_loss`.
template <class T>
T recompute_total(const LossReport<T>& r, const LossWeights& w = {}, const LossMask& mask = {}) {
  T acc = T(0);
  bool first = true;
  auto push = [&](bool on, double lambda, double v) {
    if (!on) return;
    const T term = static_cast<T>(v) * static_cast<T>(lambda);
    acc = first ? term : acc + term;
    first = false;
  };
  push(mask.l1, w.lambda1, r.l1);
  push(mask.ssim, w.lambda2, r.ssim);
  push(mask.perc, w.lambda3, r.perc);
  push(mask.dehaze, w.lambda4, r.dehaze);
  push(mask.retinex && r.retinex_active, w.lambda5, r.retinex);
  return acc;
}

}  // namespace adr
