#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "adr/nn.hpp"

namespace adr {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers follow the parameter store's
/// order and shapes.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(const ParameterStore<T>& params, AdamOptions opts = {}) : opts_(opts) {
    for (const auto& [name, t] : params) {
      names_.push_back(name);
      m_.emplace_back(t.numel(), T(0));
      v_.emplace_back(t.numel(), T(0));
    }
  }

  const AdamOptions& options() const { return opts_; }
  void set_lr(double lr) { opts_.lr = lr; }
  std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t s) { step_ = s; }

  std::vector<T>& first_moment(std::size_t i) { return m_[i]; }
  std::vector<T>& second_moment(std::size_t i) { return v_[i]; }
  const std::vector<T>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<T>& second_moment(std::size_t i) const { return v_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  /// One update over every parameter that holds a gradient. Parameters
  /// without a gradient (unused this step, or frozen) are left untouched.
  void step(ParameterStore<T>& params) {
    if (params.size() != names_.size()) {
      throw ShapeError("adam: optimizer tracks " + std::to_string(names_.size()) + " parameters, store has " +
                       std::to_string(params.size()));
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    const T step_size = static_cast<T>(opts_.lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(opts_.eps);
    const bool checked = checked_mode();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T> p = params[i].second;
      if (!p.requires_grad() || !p.has_grad()) continue;
      if (m_[i].size() != p.numel()) {
        throw ShapeError("adam: moment buffer for " + names_[i] + " does not match parameter shape");
      }
      auto value = p.mutable_data();
      const auto grad = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        const T g = grad[j];
        if (checked && !std::isfinite(g)) throw NumericError("adam: non-finite gradient in " + names_[i]);
        m[j] = b1 * m[j] + (T(1) - b1) * g;
        v[j] = b2 * v[j] + (T(1) - b2) * g * g;
        value[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
      }
    }
  }

 private:
  AdamOptions opts_;
  std::uint64_t step_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace adr
