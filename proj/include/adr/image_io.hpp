#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "adr/ops.hpp"

namespace adr {

/// 8-bit quantization: clamp to [0,1], then round half up.
inline std::uint8_t quantize(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

/// Cursor over a PNM header: whitespace and '#' comments between tokens.
struct PnmReader {
  const std::vector<std::uint8_t>& buf;
  std::string source;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(source + ": " + what + " at byte " + std::to_string(pos));
  }

  void skip_space() {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  }

  unsigned long number(const char* what) {
    skip_space();
    if (pos >= buf.size() || !std::isdigit(buf[pos])) fail(std::string("expected ") + what);
    unsigned long v = 0;
    while (pos < buf.size() && std::isdigit(buf[pos])) {
      v = v * 10 + (buf[pos] - '0');
      if (v > (1ul << 24)) fail(std::string(what) + " too large");
      ++pos;
    }
    return v;
  }
};

}  // namespace detail

/// Decodes a binary PPM (P6, maxval 255) into a 3×H×W tensor in [0,1].
inline Tensor<float> decode_ppm(const std::vector<std::uint8_t>& buf, const std::string& source = "ppm") {
  detail::PnmReader r{buf, source};
  if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '6') {
    r.fail("bad magic (expected P6)");
  }
  r.pos = 2;
  const auto w = r.number("width");
  const auto h = r.number("height");
  const auto maxval = r.number("maxval");
  if (w == 0 || h == 0) r.fail("zero image dimension");
  if (maxval != 255) r.fail("unsupported maxval " + std::to_string(maxval));
  if (r.pos >= buf.size() || !std::isspace(buf[r.pos])) r.fail("expected whitespace after header");
  ++r.pos;
  const std::size_t need = w * h * 3;
  if (buf.size() - r.pos < need) {
    r.fail("truncated payload: need " + std::to_string(need) + " bytes, have " + std::to_string(buf.size() - r.pos));
  }
  std::vector<float> v(need);
  const std::size_t plane = w * h;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) v[c * plane + i] = static_cast<float>(buf[r.pos + i * 3 + c] / 255.0);
  }
  return Tensor<float>(Shape{3, h, w}, std::move(v));
}

/// C×H×W with C ∈ {1, 3}. Single-channel images are written as gray RGB.
template <class T>
std::vector<std::uint8_t> encode_ppm(const Tensor<T>& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
    throw ShapeError("encode_ppm: expected 1×H×W or 3×H×W, got " + to_string(img.shape()));
  }
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2), plane = h * w;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + plane * 3);
  const auto d = img.data();
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t k = 0; k < 3; ++k) out.push_back(quantize(double(d[(c == 1 ? 0 : k) * plane + i])));
  }
  return out;
}

inline Tensor<float> load_image(const std::filesystem::path& path) {
  return decode_ppm(detail::read_file(path), path.string());
}

template <class T>
void save_image(const Tensor<T>& img, const std::filesystem::path& path) {
  detail::write_file(path, encode_ppm(img));
}

/// Min-max scales to [0,1] before saving; a constant map becomes 0.5.
template <class T>
Tensor<T> normalize_minmax(const Tensor<T>& img) {
  const auto d = img.data();
  if (d.empty()) return img;
  const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
  const T a = *lo, b = *hi;
  std::vector<T> v(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) v[i] = b > a ? (d[i] - a) / (b - a) : T(0.5);
  return Tensor<T>(img.shape(), std::move(v));
}

template <class T>
void save_normalized(const Tensor<T>& img, const std::filesystem::path& path) {
  save_image(normalize_minmax(img), path);
}

/// Bilinear resize (align-corners false) of a C×H×W image.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 3) throw ShapeError("resize_bilinear: expected C×H×W, got " + to_string(img.shape()));
  if (out_h == 0 || out_w == 0 || out_h % 8 != 0 || out_w % 8 != 0) {
    throw ShapeError("resize_bilinear: target " + std::to_string(out_h) + "×" + std::to_string(out_w) +
                     " must be positive and divisible by 8");
  }
  if (img.dim(1) == out_h && img.dim(2) == out_w) return img.detach();
  NoGradGuard ng;
  auto y = interp_bilinear(reshape(img, Shape{1, img.dim(0), img.dim(1), img.dim(2)}), out_h, out_w);
  return Tensor<T>(Shape{img.dim(0), out_h, out_w}, y.values());
}

/// Raw float field: "ADRF", u32 C, H, W, then C·H·W little-endian f32.
template <class T>
void save_field(const Tensor<T>& f, const std::filesystem::path& path) {
  if (f.rank() != 3) throw ShapeError("save_field: expected C×H×W, got " + to_string(f.shape()));
  std::vector<std::uint8_t> out{'A', 'D', 'R', 'F'};
  auto put32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  for (std::size_t i = 0; i < 3; ++i) put32(static_cast<std::uint32_t>(f.dim(i)));
  for (T v : f.data()) {
    std::uint32_t bits;
    const float x = static_cast<float>(v);
    std::memcpy(&bits, &x, 4);
    put32(bits);
  }
  detail::write_file(path, out);
}

inline Tensor<float> load_field(const std::filesystem::path& path) {
  const auto buf = detail::read_file(path);
  if (buf.size() < 16 || std::memcmp(buf.data(), "ADRF", 4) != 0) throw DataError(path.string() + ": bad field magic at byte 0");
  auto get32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[at + i]) << (8 * i);
    return v;
  };
  const Shape s{get32(4), get32(8), get32(12)};
  if (buf.size() != 16 + 4 * numel(s)) throw DataError(path.string() + ": truncated field payload at byte 16");
  std::vector<float> v(numel(s));
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::uint32_t bits = get32(16 + 4 * i);
    std::memcpy(&v[i], &bits, 4);
  }
  return Tensor<float>(s, std::move(v));
}

}  // namespace adr
