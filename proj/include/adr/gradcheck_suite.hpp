#pragma once

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "adr/gradcheck.hpp"
#include "adr/losses.hpp"
#include "adr/pipeline.hpp"

namespace adr {

struct ComponentCheck {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t probes = 0;
  double seconds = 0;
  bool passed = false;
};

struct GradSuiteOptions {
  double op_tolerance = 1e-4;
  double composite_tolerance = 1e-3;
  std::size_t composite_size = 8;
  /// Probed entries per parameter tensor in the composite checks.
  std::size_t composite_probes = 3;
  /// Adds a component whose backward pass is deliberately wrong.
  bool inject_fault = false;
  std::uint64_t seed = 0x6C;
  std::function<void(const ComponentCheck&)> on_result;
};

namespace gradsuite {

using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

inline Tensor<double> uniform(Shape s, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = u(gen);
  return Tensor<double>(std::move(s), std::move(v));
}

/// Values at least `gap` away from `kink`.
inline Tensor<double> away(Shape s, std::uint64_t seed, double kink = 0, double gap = 0.05, double spread = 1) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(gap, spread);
  std::bernoulli_distribution b(0.5);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = kink + (b(gen) ? u(gen) : -u(gen));
  return Tensor<double>(std::move(s), std::move(v));
}

/// y = x² with the backward pass returning x instead of 2x.
inline Tensor<double> faulty_square(const Tensor<double>& x) {
  std::vector<double> y(x.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i];
  return detail::make_result<double>("faulty_square", x.shape(), std::move(y), {x}, [](Node<double>& out) {
    auto& in = *out.parents[0];
    for (std::size_t i = 0; i < in.grad.size(); ++i) in.grad[i] += out.grad[i] * in.value[i];
  });
}

struct Case {
  std::string name;
  Fn f;
  std::vector<Tensor<double>> inputs;
  GradCheckOptions opts{};
};

/// Small-shape checks for every tensor op and each loss term.
inline std::vector<Case> op_cases(std::uint64_t s) {
  std::vector<Case> c;
  auto u = [&](Shape sh, double lo = -1, double hi = 1) { return uniform(std::move(sh), s++, lo, hi); };
  auto a = [&](Shape sh, double kink = 0, double gap = 0.05) { return away(std::move(sh), s++, kink, gap); };
  auto one = [](auto op) { return Fn([op](const auto& x) { return op(x[0]); }); };
  auto two = [](auto op) { return Fn([op](const auto& x) { return op(x[0], x[1]); }); };

  c.push_back({"add", two([](auto& x, auto& y) { return add(x, y); }), {u({2, 3, 4}), u({3, 1})}});
  c.push_back({"sub", two([](auto& x, auto& y) { return sub(x, y); }), {u({2, 1, 4}), u({2, 3, 1})}});
  c.push_back({"mul", two([](auto& x, auto& y) { return mul(x, y); }), {u({2, 3, 4}), u({4})}});
  c.push_back({"div", two([](auto& x, auto& y) { return div(x, y); }), {u({2, 3}), u({2, 3}, 0.5, 2)}});
  c.push_back({"pow", two([](auto& x, auto& y) { return pow(x, y); }), {u({2, 3}, 0.2, 2), u({2, 3}, 0.5, 1.5)}});
  c.push_back({"add_scalar", one([](auto& x) { return add_scalar(x, 0.7); }), {u({5})}});
  c.push_back({"mul_scalar", one([](auto& x) { return mul_scalar(x, -1.3); }), {u({5})}});
  c.push_back({"rsub_scalar", one([](auto& x) { return rsub_scalar(1.0, x); }), {u({5})}});
  c.push_back({"neg", one([](auto& x) { return neg(x); }), {u({5})}});
  c.push_back({"pow_scalar", one([](auto& x) { return pow_scalar(x, 1.7); }), {u({6}, 0.2, 2)}});
  c.push_back({"square", one([](auto& x) { return square(x); }), {u({6})}});
  c.push_back({"exp", one([](auto& x) { return exp(x); }), {u({6})}});
  c.push_back({"log", one([](auto& x) { return log(x); }), {u({6}, 0.2, 3)}});
  c.push_back({"abs", one([](auto& x) { return abs(x); }), {a({8})}});
  c.push_back({"clamp_min", one([](auto& x) { return clamp_min(x, 0.1); }), {a({8}, 0.1)}});
  c.push_back({"clamp01", one([](auto& x) { return clamp01(x); }), {uniform({8}, s++, 0.05, 0.95)}});
  c.push_back({"relu", one([](auto& x) { return relu(x); }), {a({8})}});
  c.push_back({"sigmoid", one([](auto& x) { return sigmoid(x); }), {u({8}, -4, 4)}});
  c.push_back({"tanh", one([](auto& x) { return tanh(x); }), {u({8}, -3, 3)}});
  c.push_back({"gelu", one([](auto& x) { return gelu(x); }), {u({8}, -3, 3)}});
  c.push_back({"sum", one([](auto& x) { return sum(x); }), {u({3, 4})}});
  c.push_back({"mean", one([](auto& x) { return mean(x); }), {u({3, 4})}});
  c.push_back({"reduce", one([](auto& x) { return reduce(Reduce::mean, x, {0, 2}); }), {u({2, 3, 4})}});
  c.push_back({"reshape", one([](auto& x) { return reshape(x, Shape{4, 6}); }), {u({2, 3, 4})}});
  c.push_back({"permute", one([](auto& x) { return permute(x, {2, 0, 1}); }), {u({2, 3, 4})}});
  c.push_back({"concat_channels",
               Fn([](const auto& x) { return concat_channels<double>({x[0], x[1]}); }),
               {u({2, 2, 3, 3}), u({2, 3, 3, 3})}});
  c.push_back({"slice_channels", one([](auto& x) { return slice_channels(x, 1, 2); }), {u({2, 4, 3, 3})}});
  c.push_back({"stack_batch", Fn([](const auto& x) { return stack_batch<double>({x[0], x[1]}); }),
               {u({1, 2, 3}), u({2, 2, 3})}});
  c.push_back({"batch_item", one([](auto& x) { return batch_item(x, 1); }), {u({3, 2, 2})}});
  c.push_back({"linear", Fn([](const auto& x) { return linear(x[0], x[1], x[2]); }),
               {u({3, 5}), u({4, 5}), u({4})}, GradCheckOptions{.eps = 1e-2}});
  c.push_back({"matmul_batched", two([](auto& x, auto& y) { return matmul_batched(x, y); }),
               {u({2, 3, 4}), u({2, 4, 5})}, GradCheckOptions{.eps = 1e-2}});
  c.push_back({"softmax_lastdim", one([](auto& x) { return softmax_lastdim(x); }), {u({2, 3, 5}, -2, 2)}});
  c.push_back({"conv2d", Fn([](const auto& x) { return conv2d(x[0], x[1], x[2], 1, 1); }),
               {u({2, 3, 5, 5}), u({4, 3, 3, 3}), u({4})}, GradCheckOptions{.eps = 1e-2}});
  c.push_back({"conv2d_stride2", Fn([](const auto& x) { return conv2d(x[0], x[1], x[2], 2, 1); }),
               {u({1, 2, 6, 6}), u({3, 2, 3, 3}), u({3})}, GradCheckOptions{.eps = 1e-2}});
  c.push_back({"conv2d_1x1", Fn([](const auto& x) { return conv2d(x[0], x[1], x[2], 1, 0); }),
               {u({2, 3, 4, 4}), u({2, 3, 1, 1}), u({2})}, GradCheckOptions{.eps = 1e-2}});
  {
    // Distinct, well-separated values so no probe moves the arg-max.
    std::vector<double> v(2 * 2 * 4 * 4);
    std::mt19937_64 gen(s++);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i);
    std::shuffle(v.begin(), v.end(), gen);
    c.push_back({"max_pool2d", one([](auto& x) { return max_pool2d(x); }), {Tensor<double>(Shape{2, 2, 4, 4}, v)}});
  }
  c.push_back({"interp_bilinear", one([](auto& x) { return interp_bilinear(x, 5, 7); }), {u({1, 2, 3, 4})}});
  c.push_back({"upsample_bilinear", one([](auto& x) { return upsample_bilinear(x, 2); }), {u({2, 1, 3, 3})}});
  c.push_back({"global_avg_pool", one([](auto& x) { return global_avg_pool(x); }), {u({2, 3, 3, 3})}});
  c.push_back({"separable_filter_valid",
               one([](auto& x) { return separable_filter_valid(x, std::vector<double>{0.25, 0.5, 0.25}); }),
               {u({1, 2, 5, 6})}});
  c.push_back({"layer_norm_lastdim", Fn([](const auto& x) { return layer_norm_lastdim(x[0], x[1], x[2]); }),
               {u({3, 6}), u({6}, 0.5, 1.5), u({6})}});

  // Loss terms.
  c.push_back({"loss.l1", two([](auto& p, auto& t) { return l1_loss(p, t); }),
               {u({1, 3, 4, 4}, 0, 1), u({1, 3, 4, 4}, 0, 1)}});
  c.push_back({"loss.ssim", two([](auto& p, auto& t) { return ssim_loss(p, t); }),
               {u({1, 3, 12, 12}, 0, 1), u({1, 3, 12, 12}, 0, 1)},
               GradCheckOptions{.eps = 1e-4, .abs_floor = 1e-7}});
  c.push_back({"loss.dehaze", two([](auto& p, auto& t) { return dehaze_loss(p, t); }),
               {u({1, 3, 4, 4}, 0, 1), u({1, 3, 4, 4}, 0, 1)}});
  c.push_back({"loss.retinex", Fn([](const auto& x) { return retinex_loss(x[0], x[1], x[2]); }),
               {u({1, 1, 4, 4}, 0, 1), u({1, 3, 4, 4}, 0, 1), u({1, 3, 4, 4}, 0, 1)}});
  return c;
}

}  // namespace gradsuite

/// Runs every component check. Returns one entry per component, in order.
inline std::vector<ComponentCheck> run_grad_suite(const GradSuiteOptions& o = {}) {
  using namespace gradsuite;
  std::vector<ComponentCheck> results;
  CheckedModeGuard checked(true);
  auto record = [&](const std::string& name, double tol, auto&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckResult r = body();
    ComponentCheck c;
    c.name = name;
    c.max_rel_error = r.max_rel_error;
    c.tolerance = tol;
    c.probes = r.probes;
    c.passed = std::isfinite(r.max_rel_error) && r.max_rel_error < tol;
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.on_result) o.on_result(c);
    results.push_back(c);
  };

  std::uint64_t seed = o.seed;
  for (auto& k : op_cases(seed)) {
    record(k.name, o.op_tolerance, [&] { return grad_check(k.f, k.inputs, k.opts); });
  }

  // Perceptual loss with its own frozen network.
  {
    PhiNetwork<double> phi;
    const auto target = uniform({1, 3, 8, 8}, seed + 102, 0, 1);
    record("loss.perc", o.op_tolerance, [&] {
      return grad_check([&](const auto& x) { return perceptual_loss(x[0], target, phi); },
                        {uniform({1, 3, 8, 8}, seed + 101, 0, 1)});
    });
  }

  // Stage formulas and blocks.
  record("physics.compose_noise", o.op_tolerance, [&] {
    return grad_check([](const auto& x) { return compose_noise(x[0], x[1], x[2], x[3]); },
                      {uniform({1, 3, 3, 3}, seed + 201), uniform({1, 1, 3, 3}, seed + 202, 0, 1),
                       uniform({1}, seed + 203, 0.05, 0.2), uniform({1}, seed + 204, 0.5, 1.5)});
  });
  record("physics.compose_turbidity", o.op_tolerance, [&] {
    return grad_check([](const auto& x) { return compose_turbidity(x[0], x[1], x[2], x[3]); },
                      {uniform({1, 3, 3, 3}, seed + 211), uniform({1, 3, 3, 3}, seed + 212, 0, 1),
                       uniform({1, 1, 3, 3}, seed + 213, 0, 1), uniform({1}, seed + 214, 0.05, 0.2)});
  });
  record("physics.dehaze", o.op_tolerance, [&] {
    return grad_check([](const auto& x) { return dehaze(x[0], x[1], x[2], x[3], x[4]); },
                      {uniform({1, 3, 3, 3}, seed + 221, 0, 1), uniform({1, 3, 3, 3}, seed + 222, 0.2, 1),
                       uniform({1, 3}, seed + 223, 0, 1), uniform({1, 3, 3, 3}, seed + 224, -0.1, 0.1),
                       uniform({1, 3, 3, 3}, seed + 225, -0.1, 0.1)});
  });
  record("retinex.gamma_correct", o.op_tolerance, [&] {
    return grad_check([](const auto& x) { return gamma_correct(x[0], x[1]); },
                      {uniform({1, 1, 3, 3}, seed + 231, 0.05, 1), uniform({1, 1, 3, 3}, seed + 232, 0.5, 1.5)});
  });
  {
    ParameterStore<double> store(seed + 241);
    SelfAttention2d<double> attn(store, "attn", 8, 4);
    std::vector<Tensor<double>> inputs{uniform({1, 8, 2, 2}, seed + 242)};
    for (const auto& [_, t] : store) inputs.push_back(t);
    record("enhance.attention", o.op_tolerance, [&] {
      return grad_check([&](const auto& x) { return attn(x[0]); }, inputs,
                        GradCheckOptions{.eps = 1e-4, .abs_floor = 1e-6});
    });
  }

  if (o.inject_fault) {
    record("fault_fixture.faulty_square", o.op_tolerance, [&] {
      return grad_check([](const auto& x) { return faulty_square(x[0]); }, {uniform({4}, seed + 251, 0.5, 1)});
    });
  }

  // Full three-stage graph. SSIM needs an 11×11 window, so at the 8×8 size
  // it is masked out; a 16×16 run covers all five terms.
  auto composite = [&](const std::string& name, std::size_t size, bool with_ssim) {
    Pipeline<double> model(PipelineOptions{}, seed + 300);
    PhiNetwork<double> phi;
    const auto I = uniform({1, 3, size, size}, seed + 301, 0.05, 0.95);
    const auto J = uniform({1, 3, size, size}, seed + 302, 0.05, 0.95);
    LossMask mask;
    mask.ssim = with_ssim;
    std::vector<Tensor<double>> inputs{I};
    for (const auto& [_, t] : model.parameters()) inputs.push_back(t);
    GradCheckOptions go;
    go.max_probes_per_input = o.composite_probes;
    go.eps = 1e-5;
    go.abs_floor = 1e-7;
    go.seed = seed + 303;
    record(name, o.composite_tolerance, [&] {
      return grad_check([&](const auto& x) { return total_loss(model(x[0]), J, phi, LossWeights{}, mask).total; },
                        inputs, go);
    });
  };
  composite("pipeline.composite_" + std::to_string(o.composite_size) + "x" + std::to_string(o.composite_size),
            o.composite_size, o.composite_size >= 11);
  composite("pipeline.composite_16x16", 16, true);
  return results;
}

}  // namespace adr
