#pragma once

#include <string>

#include "adr/nn.hpp"

namespace adr {

/// Floor applied to the illumination before the learned power, keeping
/// d(L^γ)/dγ = L^γ·log L finite.
inline constexpr double kIlluminationFloor = 1e-6;

template <class T>
struct RetinexBundle {
  Tensor<T> L;           // N×1×H×W illumination
  Tensor<T> R;           // N×3×H×W reflectance
  Tensor<T> gamma;       // N×1×H×W exponent in (0.5, 1.5)
  Tensor<T> L_enhanced;  // L^γ
  Tensor<T> R_refined;   // N×3×H×W
};

/// L^γ elementwise with L floored at 1e-6.
template <class T>
Tensor<T> gamma_correct(const Tensor<T>& L, const Tensor<T>& gamma) {
  return pow(clamp_min(L, static_cast<T>(kIlluminationFloor)), gamma);
}

/// Encoder 3→32→64 with one pooling level; mirrored decoders for
/// illumination and reflectance; a gamma head on the illumination decoder's
/// last hidden layer; a 3→3 reflectance refinement layer.
template <class T>
class RetinexStage {
 public:
  RetinexStage() = default;
  explicit RetinexStage(ParameterStore<T>& store) {
    const std::string p = "stage2.";
    enc0_ = Conv2d<T>(store, p + "encoder.conv0", 3, 32);
    enc1_ = Conv2d<T>(store, p + "encoder.conv1", 32, 64);
    illum_hidden_ = Conv2d<T>(store, p + "illumination_decoder.conv0", 64, 32);
    illum_out_ = Conv2d<T>(store, p + "illumination_decoder.conv1", 32, 1);
    refl_hidden_ = Conv2d<T>(store, p + "reflectance_decoder.conv0", 64, 32);
    refl_out_ = Conv2d<T>(store, p + "reflectance_decoder.conv1", 32, 3);
    gamma_head_ = Conv2d<T>(store, p + "gamma_head", 32, 1);
    refine_ = Conv2d<T>(store, p + "refine", 3, 3);
  }

  struct Decomposition {
    Tensor<T> L, R, illumination_features;
  };

  Decomposition decompose(const Tensor<T>& J) const {
    if (J.rank() != 4 || J.dim(1) != 3) throw ShapeError("retinex_decompose: expected N×3×H×W, got " + to_string(J.shape()));
    auto shared = relu(enc1_(max_pool2d(relu(enc0_(J)))));
    auto up = upsample_bilinear(shared, 2);
    Decomposition d;
    d.illumination_features = relu(illum_hidden_(up));
    d.L = sigmoid(illum_out_(d.illumination_features));
    d.R = sigmoid(refl_out_(relu(refl_hidden_(up))));
    return d;
  }

  /// sigmoid(conv(features)) + 0.5
  Tensor<T> predict_gamma(const Tensor<T>& illumination_features) const {
    return add_scalar(sigmoid(gamma_head_(illumination_features)), T(0.5));
  }

  Tensor<T> refine_reflectance(const Tensor<T>& R) const { return sigmoid(refine_(R)); }

  RetinexBundle<T> operator()(const Tensor<T>& J) const {
    auto d = decompose(J);
    RetinexBundle<T> b;
    b.L = d.L;
    b.R = d.R;
    b.gamma = predict_gamma(d.illumination_features);
    b.L_enhanced = gamma_correct(b.L, b.gamma);
    b.R_refined = refine_reflectance(b.R);
    return b;
  }

  const Conv2d<T>& gamma_head() const { return gamma_head_; }

 private:
  Conv2d<T> enc0_, enc1_, illum_hidden_, illum_out_, refl_hidden_, refl_out_, gamma_head_, refine_;
};

}  // namespace adr
