#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>

#include "adr/enhance.hpp"
#include "adr/physics.hpp"
#include "adr/retinex.hpp"

namespace adr {

/// Architecture switches. Each corresponds to one ablation row.
struct PipelineOptions {
  bool noise_term = true;
  bool turbidity_term = true;
  bool retinex_stage = true;
  bool unetpp_stage = true;
  bool dense_skips = true;
  bool attention_feed_forward = false;

  bool operator==(const PipelineOptions&) const = default;
};

template <class T>
struct PipelineOutput {
  DehazeBundle<T> stage1;
  RetinexBundle<T> stage2;  // L, R, gamma undefined when the Retinex stage is off
  Tensor<T> stage3_input;   // N×20×H×W
  Tensor<T> J_enhanced;     // N×3×H×W
};

/// Name of the first output field holding a NaN or infinity, or an empty
/// string when every field is finite.
template <class T>
std::string first_non_finite(const PipelineOutput<T>& out) {
  const std::pair<const char*, const Tensor<T>*> fields[] = {
      {"D", &out.stage1.D},         {"t", &out.stage1.t},
      {"A", &out.stage1.A},         {"N", &out.stage1.N},
      {"S", &out.stage1.S},         {"J_dehazed", &out.stage1.J_dehazed},
      {"L", &out.stage2.L},         {"R", &out.stage2.R},
      {"gamma", &out.stage2.gamma}, {"L_enhanced", &out.stage2.L_enhanced},
      {"R_refined", &out.stage2.R_refined}, {"J_enhanced", &out.J_enhanced},
  };
  for (const auto& [name, t] : fields) {
    if (!t->defined()) continue;
    for (T v : t->data()) {
      if (!std::isfinite(v)) return name;
    }
  }
  return {};
}

/// The three-stage network and the parameters it owns.
template <class T>
class Pipeline {
 public:
  explicit Pipeline(PipelineOptions opts = {}, std::uint64_t seed = 0) : opts_(opts), store_(seed) {
    physics_ = PhysicsStage<T>(store_, PhysicsOptions{opts.noise_term, opts.turbidity_term});
    if (opts.retinex_stage) retinex_.emplace(store_);
    if (opts.unetpp_stage) {
      enhance_.emplace(store_, EnhanceOptions{opts.dense_skips, opts.attention_feed_forward});
    } else {
      bypass_.weight = store_.add_constant("stage3.bypass.weight", Shape{3, 3, 3, 3}, T(0));
      bypass_.bias = store_.add_constant("stage3.bypass.bias", Shape{3}, T(0));
      bypass_.pad = 1;
    }
  }

  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;
  Pipeline(Pipeline&&) = default;
  Pipeline& operator=(Pipeline&&) = default;

  const PipelineOptions& options() const { return opts_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const PhysicsStage<T>& physics() const { return physics_; }
  const RetinexStage<T>* retinex() const { return retinex_ ? &*retinex_ : nullptr; }
  const EnhanceNet<T>* enhancer() const { return enhance_ ? &*enhance_ : nullptr; }

  /// I: N×3×H×W with H, W divisible by 8.
  PipelineOutput<T> operator()(const Tensor<T>& I, EnhanceTrace<T>* trace = nullptr) const {
    PhysicsStage<T>::check_input(I, 8, "pipeline");
    PipelineOutput<T> out;
    out.stage1 = physics_(I);
    const auto& J = out.stage1.J_dehazed;
    if (retinex_) {
      out.stage2 = (*retinex_)(J);
    } else {
      out.stage2.L_enhanced = Tensor<T>::ones(Shape{I.dim(0), 1, I.dim(2), I.dim(3)});
      out.stage2.R_refined = J;
    }
    out.stage3_input = assemble_input(I, out.stage1, out.stage2);
    if (enhance_) {
      out.J_enhanced = (*enhance_)(out.stage3_input, trace);
    } else {
      auto x = clamp01(J);
      out.J_enhanced = clamp01(add(x, bypass_(x)));
    }
    return out;
  }

 private:
  PipelineOptions opts_;
  ParameterStore<T> store_;
  PhysicsStage<T> physics_;
  std::optional<RetinexStage<T>> retinex_;
  std::optional<EnhanceNet<T>> enhance_;
  Conv2d<T> bypass_;
};

/// L2 norm of each parameter's gradient, keyed by parameter name. Parameters
/// without a gradient map to 0.
template <class T>
std::map<std::string, double> gradient_fingerprint(const ParameterStore<T>& store) {
  std::map<std::string, double> fp;
  for (const auto& [name, t] : store) {
    double s = 0;
    if (t.has_grad()) {
      for (T g : t.grad()) s += double(g) * double(g);
    }
    fp[name] = std::sqrt(s);
  }
  return fp;
}

/// True when the two fingerprints name different parameters or any shared
/// norm differs by more than `rel_tol` relative.
inline bool fingerprints_differ(const std::map<std::string, double>& a, const std::map<std::string, double>& b,
                                double rel_tol = 1e-6) {
  if (a.size() != b.size()) return true;
  for (const auto& [name, va] : a) {
    auto it = b.find(name);
    if (it == b.end()) return true;
    const double vb = it->second;
    if (std::abs(va - vb) > rel_tol * std::max({std::abs(va), std::abs(vb), 1e-30})) return true;
  }
  return false;
}

}  // namespace adr
