#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "adr/nn.hpp"

namespace adr {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t input_index = 0;
  std::size_t element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t probes = 0;
};

struct GradCheckOptions {
  double eps = 1e-6;
  /// Entries with |analytic| and |numeric| both below this are compared
  /// absolutely against it instead of relatively.
  double abs_floor = 1e-8;
  /// 0 probes every element; otherwise at most this many per input.
  std::size_t max_probes_per_input = 0;
  std::uint64_t seed = 0x5eed;
};

/// Relative disagreement between an analytic and a numeric derivative.
inline double relative_error(double analytic, double numeric, double abs_floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / scale;
}

/// Compares reverse-mode gradients of `f(inputs)` against central finite
/// differences. A non-scalar output is contracted with a fixed random
/// weighting so every output element contributes.
inline GradCheckResult grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                                  std::vector<Tensor<double>> inputs, const GradCheckOptions& opts = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }

  Tensor<double> projection;
  auto scalarize = [&](const Tensor<double>& out) {
    if (out.numel() == 1) return out;
    if (!projection.defined() || projection.numel() != out.numel()) {
      std::mt19937_64 gen(opts.seed ^ 0xabcdefULL);
      std::uniform_real_distribution<double> u(0.5, 1.5);
      std::vector<double> w(out.numel());
      for (auto& x : w) x = u(gen);
      projection = Tensor<double>(out.shape(), std::move(w));
    }
    return sum(mul(out, projection));
  };

  backward(scalarize(f(inputs)));
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    analytic.emplace_back(in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                        : std::vector<double>(in.numel(), 0.0));
  }

  auto eval = [&]() {
    NoGradGuard guard;
    return scalarize(f(inputs)).item();
  };

  GradCheckResult result;
  std::mt19937_64 gen(opts.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_data();
    std::vector<std::size_t> probe(values.size());
    for (std::size_t j = 0; j < probe.size(); ++j) probe[j] = j;
    if (opts.max_probes_per_input && probe.size() > opts.max_probes_per_input) {
      std::shuffle(probe.begin(), probe.end(), gen);
      probe.resize(opts.max_probes_per_input);
    }
    for (std::size_t j : probe) {
      const double saved = values[j];
      values[j] = saved + opts.eps;
      const double up = eval();
      values[j] = saved - opts.eps;
      const double down = eval();
      values[j] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double err = relative_error(analytic[i][j], numeric, opts.abs_floor);
      ++result.probes;
      if (err > result.max_rel_error || result.probes == 1) {
        result.max_rel_error = std::max(err, result.max_rel_error);
        if (err >= result.max_rel_error) {
          result.input_index = i;
          result.element = j;
          result.analytic = analytic[i][j];
          result.numeric = numeric;
        }
      }
    }
  }
  for (auto& in : inputs) in.zero_grad();
  return result;
}

}  // namespace adr
