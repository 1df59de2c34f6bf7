#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "advpatch/core.hpp"

namespace advpatch {

inline constexpr int kHistBins = 256;
// Hue gradient is zeroed below this saturation; hue is undefined at gray.
inline constexpr double kHueGradMinSaturation = 1e-4;

enum class ColorSpace { RGB, HSV };

inline std::string to_string(ColorSpace s) { return s == ColorSpace::RGB ? "RGB" : "HSV"; }
inline ColorSpace parse_color_space(std::string_view s) {
  if (s == "RGB" || s == "rgb") return ColorSpace::RGB;
  if (s == "HSV" || s == "hsv") return ColorSpace::HSV;
  throw std::invalid_argument("unknown color space '" + std::string(s) + "'");
}

// Hexcone HSV with all three components in [0,1] (hue = degrees / 360).
struct Hsv {
  double h = 0, s = 0, v = 0;
};

// Rows: d(h,s,v)/d(r,g,b).
struct HsvJacobian {
  std::array<double, 3> dh{}, ds{}, dv{};
};

namespace detail {
inline int argmax3(const double c[3]) {
  int i = 0;
  if (c[1] > c[i]) i = 1;
  if (c[2] > c[i]) i = 2;
  return i;
}
inline int argmin3(const double c[3]) {
  int i = 0;
  if (c[1] < c[i]) i = 1;
  if (c[2] < c[i]) i = 2;
  return i;
}
}  // namespace detail

inline Hsv rgb_to_hsv(double r, double g, double b, HsvJacobian* jac = nullptr) {
  const double c[3] = {r, g, b};
  const int imax = detail::argmax3(c), imin = detail::argmin3(c);
  const double v = c[imax], m = c[imin], chroma = v - m;
  Hsv out;
  out.v = v;
  out.s = v > 0 ? chroma / v : 0.0;
  double hue_deg = 0.0;
  int ia = 0, ib = 0;
  double offset = 0.0;
  if (chroma > 0) {
    if (imax == 0) { ia = 1; ib = 2; offset = 0.0; }
    else if (imax == 1) { ia = 2; ib = 0; offset = 120.0; }
    else { ia = 0; ib = 1; offset = 240.0; }
    hue_deg = 60.0 * (c[ia] - c[ib]) / chroma + offset;
    if (hue_deg < 0) hue_deg += 360.0;
    if (hue_deg >= 360.0) hue_deg -= 360.0;
  }
  out.h = hue_deg / 360.0;

  if (jac) {
    *jac = HsvJacobian{};
    jac->dv[imax] = 1.0;
    if (v > 0) {
      jac->ds[imax] += m / (v * v);
      jac->ds[imin] -= 1.0 / v;
    }
    if (chroma > 0 && out.s >= kHueGradMinSaturation) {
      const double n = c[ia] - c[ib];
      const double k = 60.0 / 360.0;
      jac->dh[ia] += k / chroma;
      jac->dh[ib] -= k / chroma;
      jac->dh[imax] -= k * n / (chroma * chroma);
      jac->dh[imin] += k * n / (chroma * chroma);
    }
  }
  return out;
}

// Per-channel normalized histogram. Channel values in [0,1] map to the bin axis as
// u = 255 * value; bin k collects u in [k - 0.5, k + 0.5).
struct Histogram {
  int bins = kHistBins;
  std::vector<std::vector<double>> channels;

  Histogram() : channels(3, std::vector<double>(kHistBins, 0.0)) {}
  explicit Histogram(int nbins, int nchannels = 3)
      : bins(nbins), channels(nchannels, std::vector<double>(nbins, 0.0)) {}

  int channel_count() const { return static_cast<int>(channels.size()); }

  void normalize() {
    for (auto& ch : channels) {
      double s = 0;
      for (double v : ch) s += v;
      if (s > 0)
        for (double& v : ch) v /= s;
    }
  }
};

inline double bin_coordinate(double value, int bins) {
  return std::clamp(value, 0.0, 1.0) * (bins - 1);
}

inline int hard_bin(double value, int bins) {
  const int k = static_cast<int>(std::floor(bin_coordinate(value, bins) + 0.5));
  return std::clamp(k, 0, bins - 1);
}

// Converts a raster pixel to the three channel values of the requested space.
inline std::array<double, 3> color_channels(const Raster& img, int y, int x, ColorSpace space) {
  const double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
  if (space == ColorSpace::RGB) return {r, g, b};
  const Hsv hsv = rgb_to_hsv(r, g, b);
  return {hsv.h, hsv.s, hsv.v};
}

// Hard-binned histogram over a pixel rectangle [x0,x1) x [y0,y1).
inline Histogram hard_histogram(const Raster& img, ColorSpace space, int bins, int x0, int y0,
                                int x1, int y1) {
  if (img.channels() != 3) throw std::invalid_argument("histogram: expected RGB raster");
  if (x1 <= x0 || y1 <= y0) throw std::invalid_argument("histogram: empty region");
  Histogram h(bins);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const auto ch = color_channels(img, y, x, space);
      for (int c = 0; c < 3; ++c) h.channels[c][hard_bin(ch[c], bins)] += 1.0;
    }
  h.normalize();
  return h;
}

// Triangular-kernel (width one bin) soft histogram; mass of each sample is split
// between the two nearest bin centers, so every channel still sums to 1.
inline Histogram soft_histogram(const Raster& img, ColorSpace space, int bins) {
  Histogram h(bins);
  const double inv = 1.0 / (static_cast<double>(img.height()) * img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) {
      const auto ch = color_channels(img, y, x, space);
      for (int c = 0; c < 3; ++c) {
        const double u = bin_coordinate(ch[c], bins);
        const int k0 = std::min(static_cast<int>(std::floor(u)), bins - 1);
        const double a = u - k0;
        h.channels[c][k0] += (1.0 - a) * inv;
        if (k0 + 1 < bins) h.channels[c][k0 + 1] += a * inv;
      }
    }
  return h;
}

}  // namespace advpatch
