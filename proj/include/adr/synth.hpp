#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "adr/image_io.hpp"
#include "adr/nn.hpp"

namespace adr {

enum class DepthKind { linear_gradient, radial, value_noise, mixed };

inline std::string to_string(DepthKind k) {
  switch (k) {
    case DepthKind::linear_gradient: return "linear_gradient";
    case DepthKind::radial: return "radial";
    case DepthKind::value_noise: return "value_noise";
    case DepthKind::mixed: return "mixed";
  }
  return "?";
}

inline DepthKind parse_depth_kind(const std::string& s) {
  for (auto k : {DepthKind::linear_gradient, DepthKind::radial, DepthKind::value_noise, DepthKind::mixed}) {
    if (to_string(k) == s) return k;
  }
  throw DataError("unknown depth_kind '" + s + "'");
}

/// Parameters of the forward degradation. `mixed` picks one of the three
/// depth kinds per sample.
struct SceneSpec {
  DepthKind depth_kind = DepthKind::value_noise;
  std::array<double, 3> A{0.10, 0.45, 0.55};
  std::array<double, 3> beta{1.2, 0.5, 0.4};
  double noise_sigma = 0.01;
  double turbidity_strength = 0.05;
  std::uint64_t seed = 7;

  void validate() const {
    for (double a : A)
      if (!(a > 0 && a < 1)) throw DataError("scene spec: A must lie in (0,1)");
    for (double b : beta)
      if (!(b >= 0)) throw DataError("scene spec: beta must be >= 0");
    if (!(noise_sigma >= 0)) throw DataError("scene spec: noise_sigma must be >= 0");
    if (!(turbidity_strength >= 0)) throw DataError("scene spec: turbidity_strength must be >= 0");
  }
};

inline nlohmann::json to_json(const SceneSpec& s) {
  return {{"depth_kind", to_string(s.depth_kind)}, {"A", s.A},
          {"beta", s.beta},                        {"noise_sigma", s.noise_sigma},
          {"turbidity_strength", s.turbidity_strength}, {"seed", s.seed}};
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  for (const auto& [key, v] : j.items()) {
    if (key == "depth_kind") s.depth_kind = parse_depth_kind(v.get<std::string>());
    else if (key == "A") s.A = v.get<std::array<double, 3>>();
    else if (key == "beta") s.beta = v.get<std::array<double, 3>>();
    else if (key == "noise_sigma") s.noise_sigma = v.get<double>();
    else if (key == "turbidity_strength") s.turbidity_strength = v.get<double>();
    else if (key == "seed") s.seed = v.get<std::uint64_t>();
    else throw DataError("scene spec: unknown key '" + key + "'");
  }
  s.validate();
  return s;
}

/// Smooth random field in [0,1]: bicubic-smoothstep value noise over two
/// octaves, min-max normalized.
inline Tensor<float> value_noise(std::size_t h, std::size_t w, std::uint64_t seed, std::size_t cells = 4) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> field(h * w, 0.0);
  double amp = 1.0;
  for (std::size_t octave = 0; octave < 2; ++octave, cells *= 2, amp *= 0.5) {
    const std::size_t g = cells + 1;
    std::vector<double> lattice(g * g);
    for (auto& v : lattice) v = u(gen);
    for (std::size_t y = 0; y < h; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(h) * static_cast<double>(cells);
      const std::size_t y0 = std::min(static_cast<std::size_t>(fy), cells - 1);
      double ty = fy - static_cast<double>(y0);
      ty = ty * ty * (3 - 2 * ty);
      for (std::size_t x = 0; x < w; ++x) {
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(w) * static_cast<double>(cells);
        const std::size_t x0 = std::min(static_cast<std::size_t>(fx), cells - 1);
        double tx = fx - static_cast<double>(x0);
        tx = tx * tx * (3 - 2 * tx);
        const double a = lattice[y0 * g + x0], b = lattice[y0 * g + x0 + 1];
        const double c = lattice[(y0 + 1) * g + x0], d = lattice[(y0 + 1) * g + x0 + 1];
        field[y * w + x] += amp * ((a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty);
      }
    }
  }
  const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
  const double a = *lo, span = *hi - *lo;
  std::vector<float> out(h * w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(span > 0 ? (field[i] - a) / span : 0.5);
  return Tensor<float>(Shape{1, h, w}, std::move(out));
}

/// 1×H×W depth in [0,1].
inline Tensor<float> gen_depth(DepthKind kind, std::size_t h, std::size_t w, std::uint64_t seed) {
  if (kind == DepthKind::mixed) {
    kind = static_cast<DepthKind>(mix64(seed) % 3);
  }
  std::vector<float> d(h * w);
  switch (kind) {
    case DepthKind::linear_gradient:
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          d[y * w + x] = h > 1 ? static_cast<float>(double(y) / double(h - 1)) : 0.f;
      break;
    case DepthKind::radial: {
      std::mt19937_64 gen(seed);
      std::uniform_real_distribution<double> u(0.25, 0.75);
      const double cy = u(gen) * double(h - 1), cx = u(gen) * double(w - 1);
      double far = 0;
      for (double py : {0.0, double(h - 1)})
        for (double px : {0.0, double(w - 1)}) far = std::max(far, std::hypot(py - cy, px - cx));
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          d[y * w + x] = static_cast<float>(far > 0 ? std::hypot(double(y) - cy, double(x) - cx) / far : 0.0);
      break;
    }
    case DepthKind::value_noise:
    case DepthKind::mixed:
      return value_noise(h, w, seed);
  }
  return Tensor<float>(Shape{1, h, w}, std::move(d));
}

/// t_c = exp(−β_c·D), 3×H×W.
inline Tensor<float> beer_lambert_t(const Tensor<float>& D, const std::array<double, 3>& beta) {
  const std::size_t plane = D.numel();
  std::vector<float> t(3 * plane);
  const auto d = D.data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) t[c * plane + i] = static_cast<float>(std::exp(-beta[c] * double(d[i])));
  return Tensor<float>(Shape{3, D.dim(1), D.dim(2)}, std::move(t));
}

/// Procedural clean image: a two-color gradient with random discs and
/// rectangles, values in [0.05, 0.95].
inline Tensor<float> procedural_chart(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto color = [&] { return std::array<double, 3>{0.05 + 0.9 * u(gen), 0.05 + 0.9 * u(gen), 0.05 + 0.9 * u(gen)}; };
  const auto c0 = color(), c1 = color();
  const double angle = u(gen) * 6.283185307179586;
  const double dx = std::cos(angle), dy = std::sin(angle);
  std::vector<double> img(3 * h * w);
  const std::size_t plane = h * w;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double s = 0.5 + 0.5 * ((double(x) / double(w) - 0.5) * dx + (double(y) / double(h) - 0.5) * dy) * 1.4;
      const double a = std::clamp(s, 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * w + x] = c0[c] * (1 - a) + c1[c] * a;
    }
  }
  const int shapes = 3 + static_cast<int>(u(gen) * 4);
  for (int k = 0; k < shapes; ++k) {
    const auto col = color();
    const double cy = u(gen) * double(h), cx = u(gen) * double(w);
    const double ry = (0.08 + 0.2 * u(gen)) * double(h), rx = (0.08 + 0.2 * u(gen)) * double(w);
    const bool disc = u(gen) < 0.5;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double ny = (double(y) - cy) / ry, nx = (double(x) - cx) / rx;
        const bool inside = disc ? nx * nx + ny * ny <= 1.0 : std::abs(nx) <= 1.0 && std::abs(ny) <= 1.0;
        if (!inside) continue;
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + y * w + x] = col[c];
      }
    }
  }
  std::vector<float> out(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(std::clamp(img[i], 0.05, 0.95));
  return Tensor<float>(Shape{3, h, w}, std::move(out));
}

/// One degraded/clean pair with the fields that produced it. N and S are
/// retained before clamping; `clamp_free` is true when no pixel of I was
/// clamped.
struct PairSample {
  Tensor<float> I, J, D, t, N, S;
  std::array<double, 3> A{};
  bool clamp_free = true;
};

/// I = clamp01(J·t + A·(1−t) + N + S) with t from Beer–Lambert,
/// N ~ Normal(0, σ)·exp(−D) and S = strength·(1−t)·D·field.
inline PairSample degrade(const Tensor<float>& J, const SceneSpec& spec, std::uint64_t seed) {
  if (J.rank() != 3 || J.dim(0) != 3) throw ShapeError("degrade: expected 3×H×W, got " + to_string(J.shape()));
  const std::size_t h = J.dim(1), w = J.dim(2), plane = h * w;
  PairSample s;
  s.J = J;
  s.A = spec.A;
  s.D = gen_depth(spec.depth_kind, h, w, stream_seed(seed, 1));
  s.t = beer_lambert_t(s.D, spec.beta);
  const auto field = value_noise(h, w, stream_seed(seed, 2), 3);
  std::mt19937_64 gen(stream_seed(seed, 3));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<float> I(3 * plane), N(3 * plane), S(3 * plane);
  const auto d = s.D.data(), t = s.t.data(), j = J.data(), f = field.data();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t k = c * plane + i;
      const double depth = d[i];
      const double n = spec.noise_sigma > 0 ? spec.noise_sigma * normal(gen) * std::exp(-depth) : 0.0;
      const double tk = t[k];
      const double sc = spec.turbidity_strength * (1.0 - tk) * depth * double(f[i]);
      N[k] = static_cast<float>(n);
      S[k] = static_cast<float>(sc);
      const double v = double(j[k]) * tk + spec.A[c] * (1.0 - tk) + double(N[k]) + double(S[k]);
      if (v < 0.0 || v > 1.0) s.clamp_free = false;
      I[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  s.I = Tensor<float>(Shape{3, h, w}, std::move(I));
  s.N = Tensor<float>(Shape{3, h, w}, std::move(N));
  s.S = Tensor<float>(Shape{3, h, w}, std::move(S));
  return s;
}

struct Dataset {
  SceneSpec spec;
  std::size_t size = 0;
  std::vector<PairSample> train, test;
  std::vector<std::size_t> train_ids, test_ids;
};

/// `n` pairs at size×size, the last `n_test` sample indices of a seeded
/// permutation going to the test split. Sample k uses the RNG stream
/// stream_seed(spec.seed, k), so any subset can be regenerated alone.
/// `base_images`, when given, replace the procedural charts (cycled and
/// resized).
inline Dataset make_dataset(std::size_t n, const SceneSpec& spec, std::size_t size, std::size_t n_test,
                            const std::vector<Tensor<float>>& base_images = {}) {
  if (n == 0) throw DataError("make_dataset: n must be >= 1");
  if (n_test >= n && n > 1) throw DataError("make_dataset: test split must leave at least one training sample");
  if (size == 0 || size % 8 != 0) throw DataError("make_dataset: size must be a positive multiple of 8");
  spec.validate();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 gen(stream_seed(spec.seed, 0xD5));
  std::shuffle(order.begin(), order.end(), gen);
  Dataset ds;
  ds.spec = spec;
  ds.size = size;
  ds.test_ids.assign(order.end() - static_cast<std::ptrdiff_t>(std::min(n_test, n)), order.end());
  ds.train_ids.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(std::min(n_test, n)));
  std::sort(ds.train_ids.begin(), ds.train_ids.end());
  std::sort(ds.test_ids.begin(), ds.test_ids.end());
  auto sample = [&](std::size_t k) {
    const std::uint64_t s = stream_seed(spec.seed, k);
    Tensor<float> J = base_images.empty() ? procedural_chart(size, size, stream_seed(s, 0))
                                          : resize_bilinear(base_images[k % base_images.size()], size, size);
    return degrade(J, spec, s);
  };
  for (auto k : ds.train_ids) ds.train.push_back(sample(k));
  for (auto k : ds.test_ids) ds.test.push_back(sample(k));
  return ds;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string sample_name(std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", k);
  return buf;
}

/// Writes train/, test/, optional truth/ and manifest.json. Returns the
/// FNV-1a hash of the manifest bytes.
inline std::uint64_t write_dataset(const Dataset& ds, const std::filesystem::path& root, bool with_truth = false) {
  namespace fs = std::filesystem;
  nlohmann::json files = nlohmann::json::array();
  auto emit = [&](const fs::path& rel, const std::vector<std::uint8_t>& bytes) {
    detail::write_file(root / rel, bytes);
    std::string_view view(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    files.push_back({{"path", rel.generic_string()}, {"fnv1a64", hex64(fnv1a64(view))}});
  };
  auto emit_split = [&](const std::string& split, const std::vector<PairSample>& samples,
                        const std::vector<std::size_t>& ids) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const std::string stem = sample_name(ids[i]);
      emit(fs::path(split) / (stem + "_input.ppm"), encode_ppm(samples[i].I));
      emit(fs::path(split) / (stem + "_gt.ppm"), encode_ppm(samples[i].J));
      if (with_truth) {
        const std::pair<const char*, const Tensor<float>*> fields[] = {
            {"D", &samples[i].D}, {"t", &samples[i].t}, {"N", &samples[i].N}, {"S", &samples[i].S}};
        for (const auto& [name, f] : fields) {
          const fs::path rel = fs::path("truth") / (stem + "_" + name + ".f32");
          save_field(*f, root / rel);
          const auto bytes = detail::read_file(root / rel);
          std::string_view view(reinterpret_cast<const char*>(bytes.data()), bytes.size());
          files.push_back({{"path", rel.generic_string()}, {"fnv1a64", hex64(fnv1a64(view))}});
        }
      }
    }
  };
  emit_split("train", ds.train, ds.train_ids);
  emit_split("test", ds.test, ds.test_ids);
  nlohmann::json manifest = {{"spec", to_json(ds.spec)},
                             {"seed", ds.spec.seed},
                             {"size", ds.size},
                             {"train", ds.train_ids},
                             {"test", ds.test_ids},
                             {"files", files}};
  const std::string text = manifest.dump(2) + "\n";
  detail::write_file(root / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  return fnv1a64(text);
}

}  // namespace adr
