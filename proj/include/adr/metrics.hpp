#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "adr/losses.hpp"

namespace adr {

/// Reported PSNR for identical images.
inline constexpr double kPsnrCapDb = 100.0;

template <class T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mse");
  if (a.numel() == 0) throw ShapeError("mse: empty tensor");
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

/// 10·log10(peak²/MSE) in dB, capped at 100 dB.
template <class T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target, double peak = 1.0) {
  const double m = mse(pred, target);
  if (m == 0) return kPsnrCapDb;
  return std::min(kPsnrCapDb, 10.0 * std::log10(peak * peak / m));
}

/// SSIM evaluated in double through the same kernel as the training loss.
template <class T>
double ssim_metric(const Tensor<T>& pred, const Tensor<T>& target) {
  NoGradGuard ng;
  auto as4 = [](const Tensor<double>& t) {
    return t.rank() == 3 ? reshape(t, Shape{1, t.dim(0), t.dim(1), t.dim(2)}) : t;
  };
  return ssim(as4(pred.template cast<double>()), as4(target.template cast<double>())).item();
}

/// Mean over blocks of the squared φ feature difference for single images.
/// Not comparable to published LPIPS values.
inline double phi_distance(const Tensor<double>& pred, const Tensor<double>& target, const PhiNetwork<double>& phi) {
  NoGradGuard ng;
  return perceptual_loss(pred, target, phi).item();
}

struct MetricsRow {
  std::string image_id;
  double psnr_db = 0, ssim = 0, phi_distance = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  double mean_psnr = 0, mean_ssim = 0, mean_phi = 0;
  bool has_phi = false;

  std::size_t count() const { return rows.size(); }

  void finalize() {
    if (rows.empty()) throw DataError("metrics: empty dataset");
    double p = 0, s = 0, f = 0;
    for (const auto& r : rows) {
      p += r.psnr_db;
      s += r.ssim;
      f += r.phi_distance;
    }
    const double n = static_cast<double>(rows.size());
    mean_psnr = p / n;
    mean_ssim = s / n;
    mean_phi = f / n;
  }

  void write_csv(std::ostream& os) const {
    os << "image_id,psnr_db,ssim" << (has_phi ? ",phi_distance" : "") << "\n";
    char buf[128];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, ",%.6f,%.6f", r.psnr_db, r.ssim);
      os << r.image_id << buf;
      if (has_phi) {
        std::snprintf(buf, sizeof buf, ",%.6f", r.phi_distance);
        os << buf;
      }
      os << "\n";
    }
  }

  /// Table layout: method, SSIM, PSNR, phi-distance.
  void write_table(std::ostream& os, const std::string& label) const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-16s %8s %9s %12s\n", "method", "SSIM", "PSNR(dB)", "phi-dist*");
    os << buf;
    if (has_phi) {
      std::snprintf(buf, sizeof buf, "%-16s %8.4f %9.2f %12.4f\n", label.c_str(), mean_ssim, mean_psnr, mean_phi);
    } else {
      std::snprintf(buf, sizeof buf, "%-16s %8.4f %9.2f %12s\n", label.c_str(), mean_ssim, mean_psnr, "-");
    }
    os << buf;
  }
};

/// One paired image, values in [0,1], shape 3×H×W.
struct PairedImage {
  std::string id;
  Tensor<float> input;
  Tensor<float> target;
};

/// Scores `enhance(input)` against each target in order. With `phi`, also
/// fills the phi-distance column.
inline MetricsReport evaluate(const std::function<Tensor<float>(const Tensor<float>&)>& enhance,
                              const std::vector<PairedImage>& data, const PhiNetwork<double>* phi = nullptr) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  MetricsReport rep;
  rep.has_phi = phi != nullptr;
  for (const auto& p : data) {
    auto pred = enhance(p.input);
    MetricsRow row;
    row.image_id = p.id;
    row.psnr_db = psnr(pred, p.target);
    row.ssim = ssim_metric(pred, p.target);
    if (phi) {
      auto a = pred.cast<double>(), b = p.target.cast<double>();
      row.phi_distance = phi_distance(reshape(a, Shape{1, a.dim(0), a.dim(1), a.dim(2)}),
                                      reshape(b, Shape{1, b.dim(0), b.dim(1), b.dim(2)}), *phi);
    }
    rep.rows.push_back(std::move(row));
  }
  rep.finalize();
  return rep;
}

}  // namespace adr
