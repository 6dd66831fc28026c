#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "adr/ops.hpp"

namespace adr {

/// SplitMix64 finalizer, used to derive independent RNG stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix64(seed ^ mix64(stream));
}

/// Named parameters in registration order. Names are unique.
template <class T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Tensor<T> add(const std::string& name, Tensor<T> t, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    t.set_requires_grad(trainable);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, t);
    return t;
  }

  /// He (fan-in) normal initialization from a stream keyed by the name, so a
  /// parameter's initial value does not depend on which other modules exist.
  Tensor<T> add_he(const std::string& name, Shape shape, std::size_t fan_in, bool trainable = true) {
    std::mt19937_64 gen(stream_seed(seed_, fnv1a64(name)));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(gen));
    return add(name, Tensor<T>(std::move(shape), std::move(v)), trainable);
  }

  Tensor<T> add_constant(const std::string& name, Shape shape, T value, bool trainable = true) {
    return add(name, Tensor<T>(std::move(shape), value), trainable);
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  const std::pair<std::string, Tensor<T>>& operator[](std::size_t i) const { return entries_[i]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) {
      Tensor<T> h = t;
      h.zero_grad();
    }
  }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// k×k convolution with "same" padding at stride 1.
template <class T>
struct Conv2d {
  Tensor<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t k = 3, bool trainable = true)
      : pad(k / 2) {
    weight = store.add_he(name + ".weight", Shape{cout, cin, k, k}, cin * k * k, trainable);
    bias = store.add_constant(name + ".bias", Shape{cout}, T(0), trainable);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
  std::size_t out_channels() const { return weight.dim(0); }
};

template <class T>
struct Linear {
  Tensor<T> weight, bias;

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out) {
    weight = store.add_he(name + ".weight", Shape{out, in}, in);
    bias = store.add_constant(name + ".bias", Shape{out}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain, shift;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, std::size_t dim) {
    gain = store.add_constant(name + ".gain", Shape{dim}, T(1));
    shift = store.add_constant(name + ".shift", Shape{dim}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm_lastdim(x, gain, shift); }
};

}  // namespace adr
