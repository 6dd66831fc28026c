#pragma once

#include <string>

#include "adr/nn.hpp"

namespace adr {

/// Lower bound applied to the transmission in the dehazing denominator.
inline constexpr double kTransmissionFloor = 0.1;

/// Stage-1 outputs. Images are N×C×H×W; A is N×3.
template <class T>
struct DehazeBundle {
  Tensor<T> D;          // N×1×H×W depth in (0,1)
  Tensor<T> t;          // N×3×H×W transmission in (0,1)
  Tensor<T> A;          // N×3 background light in (0,1)
  Tensor<T> N;          // N×3×H×W composed noise
  Tensor<T> S;          // N×3×H×W composed turbidity
  Tensor<T> J_dehazed;  // N×3×H×W recovered radiance
};

template <class T>
struct EncoderFeatures {
  Tensor<T> level0;  // 32×H×W
  Tensor<T> level1;  // 64×H/2×W/2
  Tensor<T> level2;  // 128×H/4×W/4
};

/// N×3 or N×3×1×1 background light as a per-channel broadcastable tensor.
template <class T>
Tensor<T> as_channel_vector(const Tensor<T>& A) {
  if (A.rank() == 4) return A;
  if (A.rank() != 2) throw ShapeError("background light must be N×C or N×C×1×1, got " + to_string(A.shape()));
  return reshape(A, Shape{A.dim(0), A.dim(1), 1, 1});
}

/// N = α_N · N̂ · exp(−γ_D · D); D is broadcast over channels.
template <class T>
Tensor<T> compose_noise(const Tensor<T>& noise_map, const Tensor<T>& D, const Tensor<T>& alpha_N,
                        const Tensor<T>& gamma_D) {
  auto attenuation = exp(neg(mul(D, gamma_D)));
  return mul(mul(noise_map, alpha_N), attenuation);
}

/// S = β_T · tanh(Ŝ) · (1 − t) · D; D is broadcast over channels.
template <class T>
Tensor<T> compose_turbidity(const Tensor<T>& turbidity_map, const Tensor<T>& t, const Tensor<T>& D,
                            const Tensor<T>& beta_T) {
  auto saturated = mul(tanh(turbidity_map), beta_T);
  return mul(mul(saturated, rsub_scalar(T(1), t)), D);
}

/// Inverts I = J·t + A·(1−t) + N + S for J, flooring the denominator at 0.1.
template <class T>
Tensor<T> dehaze(const Tensor<T>& I, const Tensor<T>& t, const Tensor<T>& A, const Tensor<T>& N,
                 const Tensor<T>& S) {
  auto veil = mul(as_channel_vector(A), rsub_scalar(T(1), t));
  auto numerator = sub(sub(sub(I, veil), N), S);
  return div(numerator, clamp_min(t, static_cast<T>(kTransmissionFloor)));
}

struct PhysicsOptions {
  bool noise_term = true;
  bool turbidity_term = true;
};

/// Conv(128→256)→ReLU→Conv(256→128)→ReLU→Conv(128→out), then ×4 bilinear
/// upsampling back to input resolution. The last conv is linear.
template <class T>
struct BranchHead {
  Conv2d<T> conv0, conv1, conv2;

  BranchHead() = default;
  BranchHead(ParameterStore<T>& store, const std::string& name, std::size_t out_channels)
      : conv0(store, name + ".conv0", 128, 256),
        conv1(store, name + ".conv1", 256, 128),
        conv2(store, name + ".conv2", 128, out_channels) {}

  Tensor<T> operator()(const Tensor<T>& deep) const {
    return upsample_bilinear(conv2(relu(conv1(relu(conv0(deep))))), 4);
  }
};

/// Shared encoder with five branches (depth, transmission, background light,
/// noise, turbidity) and the extended-model inversion.
template <class T>
class PhysicsStage {
 public:
  PhysicsStage() = default;
  PhysicsStage(ParameterStore<T>& store, PhysicsOptions opts = {}) : opts_(opts) {
    const std::string p = "stage1.";
    enc0_ = Conv2d<T>(store, p + "encoder.conv0", 3, 32);
    enc1_ = Conv2d<T>(store, p + "encoder.conv1", 32, 64);
    enc2_ = Conv2d<T>(store, p + "encoder.conv2", 64, 128);
    depth_ = BranchHead<T>(store, p + "depth_branch", 1);
    transmission_ = BranchHead<T>(store, p + "transmission_branch", 3);
    bg_fc0_ = Linear<T>(store, p + "background_branch.fc0", 128, 64);
    bg_fc1_ = Linear<T>(store, p + "background_branch.fc1", 64, 3);
    if (opts_.noise_term) {
      noise_ = BranchHead<T>(store, p + "noise_branch", 3);
      alpha_N_ = store.add_constant(p + "alpha_N", Shape{1}, T(0.1));
      gamma_D_ = store.add_constant(p + "gamma_D", Shape{1}, T(1.0));
    }
    if (opts_.turbidity_term) {
      turbidity_ = BranchHead<T>(store, p + "turbidity_branch", 3);
      beta_T_ = store.add_constant(p + "beta_T", Shape{1}, T(0.1));
    }
  }

  const PhysicsOptions& options() const { return opts_; }
  const Tensor<T>& alpha_N() const { return alpha_N_; }
  const Tensor<T>& gamma_D() const { return gamma_D_; }
  const Tensor<T>& beta_T() const { return beta_T_; }

  static void check_input(const Tensor<T>& I, std::size_t multiple, std::string_view who) {
    if (I.rank() != 4 || I.dim(1) != 3) {
      throw ShapeError(std::string(who) + ": expected N×3×H×W input, got " + to_string(I.shape()));
    }
    if (I.dim(2) % multiple != 0) {
      throw ShapeError(std::string(who) + ": height (dim 2) = " + std::to_string(I.dim(2)) +
                       " not divisible by " + std::to_string(multiple));
    }
    if (I.dim(3) % multiple != 0) {
      throw ShapeError(std::string(who) + ": width (dim 3) = " + std::to_string(I.dim(3)) +
                       " not divisible by " + std::to_string(multiple));
    }
  }

  EncoderFeatures<T> encode(const Tensor<T>& I) const {
    check_input(I, 4, "shared_encode");
    EncoderFeatures<T> f;
    f.level0 = relu(enc0_(I));
    f.level1 = relu(enc1_(max_pool2d(f.level0)));
    f.level2 = relu(enc2_(max_pool2d(f.level1)));
    return f;
  }

  Tensor<T> depth(const EncoderFeatures<T>& f) const { return sigmoid(depth_(f.level2)); }
  Tensor<T> transmission(const EncoderFeatures<T>& f) const { return sigmoid(transmission_(f.level2)); }
  Tensor<T> background(const EncoderFeatures<T>& f) const {
    return sigmoid(bg_fc1_(relu(bg_fc0_(global_avg_pool(f.level2)))));
  }
  Tensor<T> noise_map(const EncoderFeatures<T>& f) const { return noise_(f.level2); }
  Tensor<T> turbidity_map(const EncoderFeatures<T>& f) const { return turbidity_(f.level2); }

  DehazeBundle<T> operator()(const Tensor<T>& I) const {
    const auto f = encode(I);
    DehazeBundle<T> b;
    b.D = depth(f);
    b.t = transmission(f);
    b.A = background(f);
    const Shape field{I.dim(0), 3, I.dim(2), I.dim(3)};
    b.N = opts_.noise_term ? compose_noise(noise_map(f), b.D, alpha_N_, gamma_D_) : Tensor<T>::zeros(field);
    b.S = opts_.turbidity_term ? compose_turbidity(turbidity_map(f), b.t, b.D, beta_T_) : Tensor<T>::zeros(field);
    b.J_dehazed = dehaze(I, b.t, b.A, b.N, b.S);
    return b;
  }

 private:
  PhysicsOptions opts_;
  Conv2d<T> enc0_, enc1_, enc2_;
  BranchHead<T> depth_, transmission_, noise_, turbidity_;
  Linear<T> bg_fc0_, bg_fc1_;
  Tensor<T> alpha_N_, gamma_D_, beta_T_;
};

}  // namespace adr
