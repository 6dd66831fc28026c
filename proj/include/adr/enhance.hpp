#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "adr/nn.hpp"
#include "adr/physics.hpp"
#include "adr/retinex.hpp"

namespace adr {

/// Channel layout of the Stage-3 input, in concatenation order.
struct StageInputLayout {
  static constexpr std::array<std::pair<const char*, std::size_t>, 8> fields{{
      {"I", 3},
      {"J_dehazed", 3},
      {"L_enhanced", 1},
      {"R_refined", 3},
      {"D", 1},
      {"t", 3},
      {"N", 3},
      {"S", 3},
  }};
  static constexpr std::size_t channels = 20;

  /// First channel of the named field.
  static constexpr std::size_t offset(std::string_view name) {
    std::size_t off = 0;
    for (const auto& [n, c] : fields) {
      if (std::string_view(n) == name) return off;
      off += c;
    }
    return channels;
  }
};

/// [I, J_dehazed, L_enhanced, R_refined, D, t, N, S] → N×20×H×W.
template <class T>
Tensor<T> assemble_input(const Tensor<T>& I, const DehazeBundle<T>& s1, const Tensor<T>& L_enhanced,
                         const Tensor<T>& R_refined) {
  auto x = concat_channels<T>({I, s1.J_dehazed, L_enhanced, R_refined, s1.D, s1.t, s1.N, s1.S});
  if (x.dim(1) != StageInputLayout::channels) {
    throw ShapeError("assemble_input: expected 20 channels, got " + std::to_string(x.dim(1)));
  }
  return x;
}

template <class T>
Tensor<T> assemble_input(const Tensor<T>& I, const DehazeBundle<T>& s1, const RetinexBundle<T>& s2) {
  return assemble_input(I, s1, s2.L_enhanced, s2.R_refined);
}

/// Pre-norm multi-head self-attention over spatial positions with a
/// residual connection. No positional encoding, so the block is equivariant
/// to permutations of the spatial positions.
template <class T>
class SelfAttention2d {
 public:
  SelfAttention2d() = default;
  SelfAttention2d(ParameterStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads,
                  bool feed_forward = false)
      : dim_(dim), heads_(heads), feed_forward_(feed_forward) {
    if (dim % heads != 0) throw std::invalid_argument("attention: model dim must be divisible by head count");
    norm_ = LayerNorm<T>(store, name + ".norm", dim);
    q_ = Linear<T>(store, name + ".q_proj", dim, dim);
    k_ = Linear<T>(store, name + ".k_proj", dim, dim);
    v_ = Linear<T>(store, name + ".v_proj", dim, dim);
    o_ = Linear<T>(store, name + ".out_proj", dim, dim);
    if (feed_forward_) {
      ff_norm_ = LayerNorm<T>(store, name + ".ff_norm", dim);
      ff0_ = Linear<T>(store, name + ".ff0", dim, 2 * dim);
      ff1_ = Linear<T>(store, name + ".ff1", 2 * dim, dim);
    }
  }

  std::size_t heads() const { return heads_; }

  /// f: N×C×h×w. When `weights` is non-null it receives the (N·heads)×T×T
  /// attention matrices.
  Tensor<T> operator()(const Tensor<T>& f, Tensor<T>* weights = nullptr) const {
    if (f.rank() != 4 || f.dim(1) != dim_) {
      throw ShapeError("attention: expected N×" + std::to_string(dim_) + "×h×w, got " + to_string(f.shape()));
    }
    const std::size_t n = f.dim(0), h = f.dim(2), w = f.dim(3), tokens = h * w, hd = dim_ / heads_;
    auto x = permute(reshape(f, Shape{n, dim_, tokens}), {0, 2, 1});  // N×T×C
    auto flat = reshape(norm_(x), Shape{n * tokens, dim_});
    auto split = [&](const Tensor<T>& proj) {
      return reshape(permute(reshape(proj, Shape{n, tokens, heads_, hd}), {0, 2, 1, 3}), Shape{n * heads_, tokens, hd});
    };
    auto q = split(q_(flat)), k = split(k_(flat)), v = split(v_(flat));
    auto scores = mul_scalar(matmul_batched(q, permute(k, {0, 2, 1})), T(1) / std::sqrt(static_cast<T>(hd)));
    auto attn = softmax_lastdim(scores);
    if (weights) *weights = attn;
    auto ctx = reshape(permute(reshape(matmul_batched(attn, v), Shape{n, heads_, tokens, hd}), {0, 2, 1, 3}),
                       Shape{n * tokens, dim_});
    auto y = add(x, reshape(o_(ctx), Shape{n, tokens, dim_}));
    if (feed_forward_) {
      auto z = reshape(ff_norm_(y), Shape{n * tokens, dim_});
      y = add(y, reshape(ff1_(gelu(ff0_(z))), Shape{n, tokens, dim_}));
    }
    return reshape(permute(y, {0, 2, 1}), Shape{n, dim_, h, w});
  }

 private:
  std::size_t dim_ = 0, heads_ = 1;
  bool feed_forward_ = false;
  LayerNorm<T> norm_, ff_norm_;
  Linear<T> q_, k_, v_, o_, ff0_, ff1_;
};

/// Two 3×3 conv + ReLU layers.
template <class T>
struct ConvPair {
  Conv2d<T> first, second;

  ConvPair() = default;
  ConvPair(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout)
      : first(store, name + ".conv0", cin, cout), second(store, name + ".conv1", cout, cout) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return relu(second(relu(first(x)))); }
};

struct EnhanceOptions {
  bool dense_skips = true;
  bool attention_feed_forward = false;
};

/// Shapes of every computed U-Net++ node and the bottleneck attention
/// matrices from the last forward pass, for structural audits.
template <class T>
struct EnhanceTrace {
  std::map<std::pair<int, int>, Shape> nodes;
  Tensor<T> attention;
};

/// U-Net++ over the 20-channel input: four backbone levels (64, 128, 256,
/// 512), four-head self-attention on the deepest node, nested dense skip
/// nodes X^{i,j} = block([X^{i,0..j-1}, up(X^{i+1,j-1})]), and a sigmoid 1×1
/// projection of X^{0,3} to RGB.
template <class T>
class EnhanceNet {
 public:
  static constexpr int kLevels = 4;
  static constexpr std::size_t kBaseWidth = 64;
  static constexpr std::size_t kHeads = 4;

  static constexpr std::size_t width(int level) { return kBaseWidth << level; }

  EnhanceNet() = default;
  EnhanceNet(ParameterStore<T>& store, EnhanceOptions opts = {}) : opts_(opts) {
    const std::string p = "stage3.";
    for (int i = 0; i < kLevels; ++i) {
      const std::size_t cin = i == 0 ? StageInputLayout::channels : width(i - 1);
      backbone_[i] = ConvPair<T>(store, p + node_name(i, 0), cin, width(i));
    }
    attention_ = SelfAttention2d<T>(store, p + "attention", width(kLevels - 1), kHeads, opts_.attention_feed_forward);
    for (int j = 1; j < kLevels; ++j) {
      for (int i = 0; i + j < kLevels; ++i) {
        if (!computes(i, j)) continue;
        const std::size_t w = width(i);
        up_[i][j] = Conv2d<T>(store, p + "up_" + std::to_string(i) + "_" + std::to_string(j), width(i + 1), w, 1);
        const std::size_t skips = opts_.dense_skips ? static_cast<std::size_t>(j) : 1;
        nested_[i][j] = ConvPair<T>(store, p + node_name(i, j), (skips + 1) * w, w);
      }
    }
    head_ = Conv2d<T>(store, p + "head", kBaseWidth, 3, 1);
  }

  const EnhanceOptions& options() const { return opts_; }

  /// Whether node X^{i,j} (j ≥ 1) exists. Without dense skips only the
  /// plain U-Net decoder path i + j = 3 is built.
  bool computes(int i, int j) const { return opts_.dense_skips || i + j == kLevels - 1; }

  static std::string node_name(int i, int j) { return "X_" + std::to_string(i) + "_" + std::to_string(j); }

  std::vector<Tensor<T>> encode(const Tensor<T>& x) const {
    check(x);
    std::vector<Tensor<T>> nodes(kLevels);
    nodes[0] = backbone_[0](x);
    for (int i = 1; i < kLevels; ++i) nodes[i] = backbone_[i](max_pool2d(nodes[i - 1]));
    return nodes;
  }

  Tensor<T> bottleneck(const Tensor<T>& f, Tensor<T>* weights = nullptr) const { return attention_(f, weights); }

  /// Runs the nested decoder and returns X^{0,3} (N×64×H×W).
  Tensor<T> decode(const std::vector<Tensor<T>>& backbone, EnhanceTrace<T>* trace = nullptr) const {
    std::array<std::array<Tensor<T>, kLevels>, kLevels> X;
    for (int i = 0; i < kLevels; ++i) X[i][0] = backbone[i];
    for (int j = 1; j < kLevels; ++j) {
      for (int i = 0; i + j < kLevels; ++i) {
        if (!computes(i, j)) continue;
        std::vector<Tensor<T>> parts;
        if (opts_.dense_skips) {
          for (int k = 0; k < j; ++k) parts.push_back(X[i][k]);
        } else {
          parts.push_back(X[i][0]);
        }
        parts.push_back(upsample_bilinear(up_[i][j](X[i + 1][j - 1]), 2));
        X[i][j] = nested_[i][j](concat_channels(parts));
      }
    }
    if (trace) {
      for (int i = 0; i < kLevels; ++i)
        for (int j = 0; i + j < kLevels; ++j)
          if (X[i][j].defined()) trace->nodes[{i, j}] = X[i][j].shape();
    }
    return X[0][kLevels - 1];
  }

  Tensor<T> project_output(const Tensor<T>& f) const { return sigmoid(head_(f)); }

  Tensor<T> operator()(const Tensor<T>& x, EnhanceTrace<T>* trace = nullptr) const {
    auto nodes = encode(x);
    nodes[kLevels - 1] = bottleneck(nodes[kLevels - 1], trace ? &trace->attention : nullptr);
    return project_output(decode(nodes, trace));
  }

 private:
  static void check(const Tensor<T>& x) {
    if (x.rank() != 4 || x.dim(1) != StageInputLayout::channels) {
      throw ShapeError("unetpp_encode: expected N×20×H×W, got " + to_string(x.shape()));
    }
    if (x.dim(2) % 8 != 0) throw ShapeError("unetpp_encode: height (dim 2) not divisible by 8");
    if (x.dim(3) % 8 != 0) throw ShapeError("unetpp_encode: width (dim 3) not divisible by 8");
  }

  EnhanceOptions opts_;
  std::array<ConvPair<T>, kLevels> backbone_;
  std::array<std::array<ConvPair<T>, kLevels>, kLevels> nested_;
  std::array<std::array<Conv2d<T>, kLevels>, kLevels> up_;
  SelfAttention2d<T> attention_;
  Conv2d<T> head_;
};

}  // namespace adr
