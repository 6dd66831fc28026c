#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "adr/losses.hpp"
#include "adr/pipeline.hpp"
#include "adr/tensor.hpp"

namespace adr {

/// Training and architecture configuration. Serialized as flat JSON;
/// unknown keys are rejected.
struct Config {
  std::size_t image_size = 256;
  std::size_t batch_size = 8;
  std::size_t epochs = 100;
  double lr = 1e-4;
  std::string lr_schedule = "constant";
  LossWeights weights;
  bool turbidity_term = true;
  bool noise_term = true;
  bool retinex_stage = true;
  bool unetpp_stage = true;
  bool dense_skips = true;
  bool attention_feed_forward = false;
  bool perc_loss = true;
  bool ssim_loss = true;
  std::uint64_t seed = 0;
  std::string dataset;
  std::string checkpoint = "model.adr";
  std::string run_log;
  std::size_t checkpoint_every = 0;
  bool strict = false;
  bool checked = true;

  void validate() const {
    if (image_size == 0 || image_size % 8 != 0) {
      throw DataError("config: image_size must be a positive multiple of 8, got " + std::to_string(image_size));
    }
    if (batch_size < 1) throw DataError("config: batch_size must be >= 1");
    if (!(lr > 0)) throw DataError("config: lr must be positive");
    if (lr_schedule != "constant") throw DataError("config: unsupported lr_schedule '" + lr_schedule + "'");
    for (double l : {weights.lambda1, weights.lambda2, weights.lambda3, weights.lambda4, weights.lambda5}) {
      if (!(l >= 0)) throw DataError("config: loss weights must be >= 0");
    }
  }

  PipelineOptions pipeline_options() const {
    PipelineOptions o;
    o.noise_term = noise_term;
    o.turbidity_term = turbidity_term;
    o.retinex_stage = retinex_stage;
    o.unetpp_stage = unetpp_stage;
    o.dense_skips = dense_skips;
    o.attention_feed_forward = attention_feed_forward;
    return o;
  }

  LossMask loss_mask() const {
    LossMask m;
    m.perc = perc_loss;
    m.ssim = ssim_loss;
    m.retinex = retinex_stage;
    return m;
  }
};

inline nlohmann::ordered_json to_json(const Config& c) {
  nlohmann::ordered_json j;
  j["image_size"] = c.image_size;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["lr"] = c.lr;
  j["lr_schedule"] = c.lr_schedule;
  j["lambda1"] = c.weights.lambda1;
  j["lambda2"] = c.weights.lambda2;
  j["lambda3"] = c.weights.lambda3;
  j["lambda4"] = c.weights.lambda4;
  j["lambda5"] = c.weights.lambda5;
  j["turbidity_term"] = c.turbidity_term;
  j["noise_term"] = c.noise_term;
  j["retinex_stage"] = c.retinex_stage;
  j["unetpp_stage"] = c.unetpp_stage;
  j["dense_skips"] = c.dense_skips;
  j["attention_feed_forward"] = c.attention_feed_forward;
  j["perc_loss"] = c.perc_loss;
  j["ssim_loss"] = c.ssim_loss;
  j["seed"] = c.seed;
  j["dataset"] = c.dataset;
  j["checkpoint"] = c.checkpoint;
  j["run_log"] = c.run_log;
  j["checkpoint_every"] = c.checkpoint_every;
  j["strict"] = c.strict;
  j["checked"] = c.checked;
  return j;
}

/// Overlays the keys of `j` on `base`.
inline Config config_from_json(const nlohmann::json& j, Config base = {}) {
  if (!j.is_object()) throw DataError("config: expected a JSON object");
  Config& c = base;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "image_size") c.image_size = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "lr_schedule") c.lr_schedule = v.get<std::string>();
      else if (key == "lambda1") c.weights.lambda1 = v.get<double>();
      else if (key == "lambda2") c.weights.lambda2 = v.get<double>();
      else if (key == "lambda3") c.weights.lambda3 = v.get<double>();
      else if (key == "lambda4") c.weights.lambda4 = v.get<double>();
      else if (key == "lambda5") c.weights.lambda5 = v.get<double>();
      else if (key == "turbidity_term") c.turbidity_term = v.get<bool>();
      else if (key == "noise_term") c.noise_term = v.get<bool>();
      else if (key == "retinex_stage") c.retinex_stage = v.get<bool>();
      else if (key == "unetpp_stage") c.unetpp_stage = v.get<bool>();
      else if (key == "dense_skips") c.dense_skips = v.get<bool>();
      else if (key == "attention_feed_forward") c.attention_feed_forward = v.get<bool>();
      else if (key == "perc_loss") c.perc_loss = v.get<bool>();
      else if (key == "ssim_loss") c.ssim_loss = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "dataset") c.dataset = v.get<std::string>();
      else if (key == "checkpoint") c.checkpoint = v.get<std::string>();
      else if (key == "run_log") c.run_log = v.get<std::string>();
      else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
      else if (key == "strict") c.strict = v.get<bool>();
      else if (key == "checked") c.checked = v.get<bool>();
      else throw DataError("config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline Config parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

inline Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace adr
