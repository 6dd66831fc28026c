#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "adr/checkpoint.hpp"
#include "adr/config.hpp"
#include "adr/image_io.hpp"
#include "adr/losses.hpp"
#include "adr/metrics.hpp"
#include "adr/optim.hpp"
#include "adr/pipeline.hpp"

namespace adr {

/// Brings a 3×H×W image to size×size. Resizing is an error in strict mode;
/// otherwise `warn` is told about it.
inline Tensor<float> fit_image(const Tensor<float>& img, std::size_t size, bool strict, const std::string& id,
                               const std::function<void(const std::string&)>& warn = {}) {
  if (img.dim(1) == size && img.dim(2) == size) return img;
  if (strict) {
    throw DataError(id + ": image is " + std::to_string(img.dim(1)) + "×" + std::to_string(img.dim(2)) +
                    ", expected " + std::to_string(size) + "×" + std::to_string(size));
  }
  if (warn) warn(id + ": resized to " + std::to_string(size) + "×" + std::to_string(size));
  return resize_bilinear(img, size, size);
}

/// Reads NAME_input.ppm / NAME_gt.ppm pairs from `dir` in lexicographic order.
inline std::vector<PairedImage> load_pairs(const std::filesystem::path& dir, std::size_t size, bool strict,
                                           const std::function<void(const std::string&)>& warn = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::string> stems;
  const std::string suffix = "_input.ppm";
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw DataError("no *_input.ppm files in " + dir.string());
  std::vector<PairedImage> out;
  for (const auto& s : stems) {
    const auto gt = dir / (s + "_gt.ppm");
    if (!fs::exists(gt)) throw DataError("missing ground truth " + gt.string());
    PairedImage p;
    p.id = s;
    p.input = fit_image(load_image(dir / (s + "_input.ppm")), size, strict, s, warn);
    p.target = fit_image(load_image(gt), size, strict, s, warn);
    out.push_back(std::move(p));
  }
  return out;
}

/// Training pairs for a config. A dataset root with a train/ directory is
/// used as-is; a flat directory of pairs is split lexicographically with
/// the last 190/890 of the files held out.
inline std::vector<PairedImage> load_training_pairs(const Config& cfg,
                                                    const std::function<void(const std::string&)>& warn = {}) {
  namespace fs = std::filesystem;
  const fs::path root(cfg.dataset);
  if (fs::is_directory(root / "train")) return load_pairs(root / "train", cfg.image_size, cfg.strict, warn);
  auto all = load_pairs(root, cfg.image_size, cfg.strict, warn);
  const std::size_t n_test = all.size() > 1 ? std::max<std::size_t>(1, all.size() * 190 / 890) : 0;
  if (warn) {
    warn("no train/ split in " + root.string() + "; using a lexicographic split with " + std::to_string(n_test) +
         " held-out pairs, which may differ from any published split");
  }
  all.resize(all.size() - n_test);
  return all;
}

/// Stacks 3×H×W images into a B×3×H×W batch.
inline Tensor<float> make_batch(const std::vector<const Tensor<float>*>& items) {
  const Shape s = items.front()->shape();
  std::vector<float> v;
  v.reserve(items.size() * items.front()->numel());
  for (const auto* t : items) {
    if (t->shape() != s) throw ShapeError("make_batch: image shapes differ");
    v.insert(v.end(), t->values().begin(), t->values().end());
  }
  return Tensor<float>(Shape{items.size(), s[0], s[1], s[2]}, std::move(v));
}

struct StepRecord {
  std::size_t step = 0, epoch = 0;
  double l1 = 0, ssim = 0, perc = 0, dehaze = 0, retinex = 0, total = 0;
  double wall_ms = 0;
};

inline std::string run_log_header() { return "step,epoch,l1,ssim,perc,dehaze,retinex,total,wall_ms\n"; }

inline std::string run_log_row(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n", r.step, r.epoch, r.l1, r.ssim, r.perc,
                r.dehaze, r.retinex, r.total, r.wall_ms);
  return buf;
}

/// Joint training of all stages with one optimizer and one backward pass
/// per batch.
class Trainer {
 public:
  Trainer(Config cfg, std::vector<PairedImage> data)
      : cfg_(std::move(cfg)),
        data_(std::move(data)),
        model_(cfg_.pipeline_options(), cfg_.seed),
        opt_(model_.parameters(), AdamOptions{cfg_.lr}),
        rng_(stream_seed(cfg_.seed, 0x5EED)) {
    cfg_.validate();
    if (data_.empty()) throw DataError("train: empty training set");
    for (const auto& p : data_) {
      if (p.input.shape() != Shape{3, cfg_.image_size, cfg_.image_size} || p.target.shape() != p.input.shape()) {
        throw DataError("train: sample " + p.id + " has shape " + to_string(p.input.shape()));
      }
    }
  }

  const Config& config() const { return cfg_; }
  Pipeline<float>& model() { return model_; }
  const Pipeline<float>& model() const { return model_; }
  const PhiNetwork<float>& phi() const { return phi_; }
  Adam<float>& optimizer() { return opt_; }
  std::size_t steps_done() const { return step_; }

  std::size_t batches_per_epoch() const { return (data_.size() + cfg_.batch_size - 1) / cfg_.batch_size; }
  std::size_t total_steps() const { return cfg_.epochs * batches_per_epoch(); }

  /// Forward and backward on one batch without updating parameters.
  LossReport<float> forward_backward(const std::vector<std::size_t>& idx) {
    CheckedModeGuard cg(cfg_.checked);
    std::vector<const Tensor<float>*> in, gt;
    for (auto i : idx) {
      in.push_back(&data_[i].input);
      gt.push_back(&data_[i].target);
    }
    const auto I = make_batch(in), J = make_batch(gt);
    model_.parameters().zero_grad();
    auto out = model_(I);
    auto rep = total_loss(out, J, phi_, cfg_.weights, cfg_.loss_mask());
    if (!std::isfinite(rep.total_value)) {
      std::string field = first_non_finite(out);
      if (field.empty()) {
        const std::pair<const char*, double> terms[] = {
            {"l1", rep.l1}, {"ssim", rep.ssim}, {"perc", rep.perc}, {"dehaze", rep.dehaze}, {"retinex", rep.retinex}};
        for (const auto& [n, v] : terms)
          if (!std::isfinite(v)) {
            field = std::string("loss term ") + n;
            break;
          }
      }
      throw NumericError("non-finite loss at step " + std::to_string(step_ + 1) + "; first non-finite tensor: " +
                         (field.empty() ? std::string("total") : field));
    }
    if (rep.total.requires_grad()) backward(rep.total);
    return rep;
  }

  /// One optimizer step on the given sample indices.
  StepRecord step(const std::vector<std::size_t>& idx, std::size_t epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto rep = forward_backward(idx);
    {
      CheckedModeGuard cg(cfg_.checked);
      opt_.step(model_.parameters());
    }
    ++step_;
    StepRecord r;
    r.step = step_;
    r.epoch = epoch;
    r.l1 = rep.l1;
    r.ssim = rep.ssim;
    r.perc = rep.perc;
    r.dehaze = rep.dehaze;
    r.retinex = rep.retinex;
    r.total = rep.total_value;
    if (!cfg_.strict) {
      r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    return r;
  }

  /// Runs every epoch. `on_step` sees each record as it is produced.
  std::vector<StepRecord> run(const std::function<void(const StepRecord&)>& on_step = {}) {
    std::vector<StepRecord> log;
    std::ofstream csv;
    if (!cfg_.run_log.empty()) {
      const std::filesystem::path p(cfg_.run_log);
      if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
      csv.open(p, std::ios::binary);
      if (!csv) throw DataError("cannot write run log " + cfg_.run_log);
      csv << run_log_header();
    }
    std::vector<std::size_t> order(data_.size());
    for (std::size_t e = 1; e <= cfg_.epochs; ++e) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng_);
      for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
        std::vector<std::size_t> idx(order.begin() + b, order.begin() + std::min(order.size(), b + cfg_.batch_size));
        auto r = step(idx, e);
        if (csv) csv << run_log_row(r) << std::flush;
        if (on_step) on_step(r);
        log.push_back(r);
      }
      epoch_ = e;
      if (cfg_.checkpoint_every > 0 && e % cfg_.checkpoint_every == 0 && e != cfg_.epochs && !cfg_.checkpoint.empty()) {
        checkpoint().save(cfg_.checkpoint);
      }
    }
    if (!cfg_.checkpoint.empty()) checkpoint().save(cfg_.checkpoint);
    return log;
  }

  Checkpoint checkpoint() const {
    TrainingState st;
    st.config = cfg_;
    std::ostringstream rs;
    rs << rng_;
    st.rng_state = rs.str();
    st.epoch = epoch_;
    return make_checkpoint(st, model_, opt_);
  }

 private:
  Config cfg_;
  std::vector<PairedImage> data_;
  Pipeline<float> model_;
  PhiNetwork<float> phi_;
  Adam<float> opt_;
  std::mt19937_64 rng_;
  std::size_t step_ = 0, epoch_ = 0;
};

/// Builds a model with the checkpoint's architecture and weights.
inline Pipeline<float> load_model(const Checkpoint& ck) {
  const Config cfg = checkpoint_config(ck);
  Pipeline<float> model(cfg.pipeline_options(), cfg.seed);
  restore_checkpoint(ck, model);
  return model;
}

/// Runs the model on one 3×H×W image without recording gradients.
inline PipelineOutput<float> run_model(const Pipeline<float>& model, const Tensor<float>& img) {
  NoGradGuard ng;
  return model(reshape(img, Shape{1, img.dim(0), img.dim(1), img.dim(2)}));
}

inline Tensor<float> enhance_image(const Pipeline<float>& model, const Tensor<float>& img) {
  auto out = run_model(model, img);
  return Tensor<float>(img.shape(), out.J_enhanced.values());
}

/// Names of the files written by `dump_intermediates`, in order.
inline const std::vector<std::string>& intermediate_names() {
  static const std::vector<std::string> names{"depth.ppm",    "transmission.ppm", "turbidity_norm.ppm",
                                              "noise_norm.ppm", "dehazed.ppm",     "illumination.ppm",
                                              "reflectance.ppm", "enhanced.ppm"};
  return names;
}

/// Writes the enhanced image and the intermediate panels into `dir`.
inline void dump_intermediates(const PipelineOutput<float>& out, const std::filesystem::path& dir) {
  auto item = [](const Tensor<float>& t) {
    return Tensor<float>(Shape{t.dim(1), t.dim(2), t.dim(3)}, t.values());
  };
  const auto& n = intermediate_names();
  save_image(item(out.stage1.D), dir / n[0]);
  save_image(item(out.stage1.t), dir / n[1]);
  save_normalized(item(out.stage1.S), dir / n[2]);
  save_normalized(item(out.stage1.N), dir / n[3]);
  save_image(item(out.stage1.J_dehazed), dir / n[4]);
  save_image(item(out.stage2.L.defined() ? out.stage2.L : out.stage2.L_enhanced), dir / n[5]);
  save_image(item(out.stage2.R.defined() ? out.stage2.R : out.stage2.R_refined), dir / n[6]);
  save_image(item(out.J_enhanced), dir / n[7]);
}

}  // namespace adr
