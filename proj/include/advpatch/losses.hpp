#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "advpatch/color.hpp"
#include "advpatch/core.hpp"
#include "advpatch/geometry.hpp"

namespace advpatch {

inline constexpr double kTvEps = 1e-8;
inline constexpr double kHistEps = 1e-10;
inline constexpr double kAssociationIou = 0.1;

using Rgb = std::array<double, 3>;

struct PrintPalette {
  std::vector<Rgb> colors;

  void validate() const {
    if (colors.empty()) throw std::invalid_argument("PrintPalette: empty palette");
    for (const auto& c : colors)
      for (double v : c)
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("PrintPalette: value outside [0,1]");
  }

  // 5 x 5 x 5 RGB lattice.
  static PrintPalette lattice(int levels = 5) {
    PrintPalette p;
    for (int r = 0; r < levels; ++r)
      for (int g = 0; g < levels; ++g)
        for (int b = 0; b < levels; ++b)
          p.colors.push_back({r / double(levels - 1), g / double(levels - 1), b / double(levels - 1)});
    return p;
  }
};

// One "r g b" triplet per line; blank lines and '#' comments are skipped.
inline PrintPalette parse_palette(std::istream& in, const std::string& origin = "<palette>") {
  PrintPalette p;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    Rgb c{};
    if (!(ls >> c[0])) continue;
    std::string extra;
    if (!(ls >> c[1] >> c[2]) || (ls >> extra))
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected 'r g b'");
    p.colors.push_back(c);
  }
  p.validate();
  return p;
}

inline PrintPalette load_palette(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open palette file " + path);
  return parse_palette(in, path);
}

// ---------------------------------------------------------------------------
// Adversarial detection losses. Each takes an optional RawGrad to accumulate
// d(loss)/d(scores) into; `scale` multiplies what is accumulated.

// Predictions with IoU > 0.1 against the patched object's box; when none, the single
// highest-objectness prediction whose box contains the patch center.
inline std::vector<std::size_t> associate_predictions(const RawDetections& raw,
                                                      const BoundingBox& object,
                                                      std::optional<std::array<double, 2>> patch_center = {}) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < raw.preds.size(); ++i)
    if (iou(raw.preds[i].box, object) > kAssociationIou) out.push_back(i);
  if (!out.empty()) return out;
  const auto [px, py] = patch_center.value_or(std::array<double, 2>{object.cx, object.cy});
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < raw.preds.size(); ++i) {
    if (!box_contains(raw.preds[i].box, px, py)) continue;
    if (!best || raw.preds[i].obj > raw.preds[*best].obj) best = i;
  }
  if (best) out.push_back(*best);
  return out;
}

namespace detail {
inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}
}  // namespace detail

// max(y_cls) | max(y_obj) | max(y_obj * max(y_cls)) over the associated predictions.
inline double loss_hiding_adv(const RawDetections& raw, const std::vector<std::size_t>& assoc,
                              AdvMode mode, RawGrad* grad = nullptr, double scale = 1.0) {
  double best = 0.0;
  std::optional<std::size_t> arg;
  for (std::size_t i : assoc) {
    const Prediction& p = raw.preds[i];
    const double mc = p.cls.empty() ? 0.0 : p.cls[detail::argmax(p.cls)];
    double score = 0.0;
    switch (mode) {
      case AdvMode::ClsOnly: score = mc; break;
      case AdvMode::ObjOnly: score = p.obj; break;
      case AdvMode::Both: score = p.obj * mc; break;
    }
    if (!arg || score > best) {
      best = score;
      arg = i;
    }
  }
  if (!arg) return 0.0;
  if (grad) {
    const Prediction& p = raw.preds[*arg];
    const std::size_t c = detail::argmax(p.cls);
    switch (mode) {
      case AdvMode::ClsOnly: grad->cls[*arg][c] += scale; break;
      case AdvMode::ObjOnly: grad->obj[*arg] += scale; break;
      case AdvMode::Both:
        grad->obj[*arg] += scale * p.cls[c];
        grad->cls[*arg][c] += scale * p.obj;
        break;
    }
  }
  return best;
}

inline double loss_hiding_adv(const RawDetections& raw, const BoundingBox& patched_box,
                              AdvMode mode, RawGrad* grad = nullptr, double scale = 1.0) {
  return loss_hiding_adv(raw, associate_predictions(raw, patched_box), mode, grad, scale);
}

// 1 - max(y_obj * y_cls[t]) over predictions whose box center lies inside rm.
inline double loss_creating_adv(const RawDetections& raw, const Corners& rm, int target,
                                RawGrad* grad = nullptr, double scale = 1.0) {
  double best = 0.0;
  std::optional<std::size_t> arg;
  for (std::size_t i = 0; i < raw.preds.size(); ++i) {
    const Prediction& p = raw.preds[i];
    if (p.box.cx < rm.x1 || p.box.cx > rm.x2 || p.box.cy < rm.y1 || p.box.cy > rm.y2) continue;
    const double score = p.obj * p.cls.at(target);
    if (!arg || score > best) {
      best = score;
      arg = i;
    }
  }
  if (!arg) return 1.0;
  if (grad) {
    const Prediction& p = raw.preds[*arg];
    grad->obj[*arg] -= scale * p.cls[target];
    grad->cls[*arg][target] -= scale * p.obj;
  }
  return 1.0 - best;
}

inline double loss_creating_adv(const RawDetections& raw, const CreatingPlacement& placement,
                                int target, RawGrad* grad = nullptr, double scale = 1.0) {
  return loss_creating_adv(raw, placement.rm, target, grad, scale);
}

// max(y_cls | cls != t) + 2 (1 - y_cls[t]) at the associated prediction with the
// highest objectness. Range [0, 3]; 2 when nothing is associated.
inline double loss_altering_adv(const RawDetections& raw, const std::vector<std::size_t>& assoc,
                                int target, RawGrad* grad = nullptr, double scale = 1.0) {
  std::optional<std::size_t> arg;
  for (std::size_t i : assoc)
    if (!arg || raw.preds[i].obj > raw.preds[*arg].obj) arg = i;
  if (!arg) return 2.0;
  const Prediction& p = raw.preds[*arg];
  double other = 0.0;
  std::optional<std::size_t> other_arg;
  for (std::size_t c = 0; c < p.cls.size(); ++c) {
    if (static_cast<int>(c) == target) continue;
    if (!other_arg || p.cls[c] > other) {
      other = p.cls[c];
      other_arg = c;
    }
  }
  if (grad) {
    if (other_arg) grad->cls[*arg][*other_arg] += scale;
    grad->cls[*arg][target] -= 2.0 * scale;
  }
  return other + 2.0 * (1.0 - p.cls.at(target));
}

inline double loss_altering_adv(const RawDetections& raw, const BoundingBox& patched_box,
                                int target, RawGrad* grad = nullptr, double scale = 1.0) {
  return loss_altering_adv(raw, associate_predictions(raw, patched_box), target, grad, scale);
}

// ---------------------------------------------------------------------------
// Patch-only losses. `grad`, when given, must have the patch's shape and is
// accumulated into (times `scale`).

// Mean over pixels having both a right and a lower neighbour, and over channels, of
// sqrt(dx^2 + dy^2 + eps^2).
inline double loss_tv(const Raster& p, Raster* grad = nullptr, double scale = 1.0) {
  if (p.height() < 2 || p.width() < 2) throw std::invalid_argument("loss_tv: patch side must be >= 2");
  const int H = p.height(), W = p.width(), C = p.channels();
  const double n = static_cast<double>(H - 1) * (W - 1) * C;
  double sum = 0;
  for (int i = 0; i < H - 1; ++i)
    for (int j = 0; j < W - 1; ++j)
      for (int c = 0; c < C; ++c) {
        const double dx = p.at(i, j + 1, c) - p.at(i, j, c);
        const double dy = p.at(i + 1, j, c) - p.at(i, j, c);
        const double t = std::sqrt(dx * dx + dy * dy + kTvEps * kTvEps);
        sum += t;
        if (grad) {
          const double k = scale / (n * t);
          grad->at(i, j + 1, c) += k * dx;
          grad->at(i + 1, j, c) += k * dy;
          grad->at(i, j, c) -= k * (dx + dy);
        }
      }
  return sum / n;
}

// Mean over pixels of the Euclidean RGB distance to the nearest palette color.
inline double loss_nps(const Raster& p, const PrintPalette& palette, Raster* grad = nullptr,
                       double scale = 1.0) {
  palette.validate();
  if (p.channels() != 3) throw std::invalid_argument("loss_nps: expected RGB patch");
  const double n = static_cast<double>(p.height()) * p.width();
  double sum = 0;
  for (int y = 0; y < p.height(); ++y)
    for (int x = 0; x < p.width(); ++x) {
      double best = std::numeric_limits<double>::infinity();
      const Rgb* nearest = nullptr;
      for (const Rgb& c : palette.colors) {
        const double d0 = p.at(y, x, 0) - c[0], d1 = p.at(y, x, 1) - c[1], d2 = p.at(y, x, 2) - c[2];
        const double d = d0 * d0 + d1 * d1 + d2 * d2;
        if (d < best) {
          best = d;
          nearest = &c;
        }
      }
      const double dist = std::sqrt(best);
      sum += dist;
      if (grad && dist > 0)
        for (int c = 0; c < 3; ++c)
          grad->at(y, x, c) += scale * (p.at(y, x, c) - (*nearest)[c]) / (n * dist);
    }
  return sum / n;
}

struct PixelRect {
  int x0, y0, x1, y1;  // half-open
  int area() const { return std::max(0, x1 - x0) * std::max(0, y1 - y0); }
};

inline PixelRect box_pixel_rect(const BoundingBox& b, int width, int height) {
  const Corners c = box_center_to_corners(b);
  return {std::clamp(static_cast<int>(std::lround(c.x1 * width)), 0, width),
          std::clamp(static_cast<int>(std::lround(c.y1 * height)), 0, height),
          std::clamp(static_cast<int>(std::lround(c.x2 * width)), 0, width),
          std::clamp(static_cast<int>(std::lround(c.y2 * height)), 0, height)};
}

// Crop -> HSV -> 256-bin per-channel histogram, normalized.
inline Histogram reference_histogram(const Raster& x_ref, const BoundingBox& y_ref) {
  if (!is_valid_box(y_ref)) throw std::invalid_argument("reference_histogram: invalid box");
  const PixelRect r = box_pixel_rect(y_ref, x_ref.width(), x_ref.height());
  if (r.area() < 4) throw std::invalid_argument("reference_histogram: degenerate crop (< 4 px)");
  return hard_histogram(x_ref, ColorSpace::HSV, kHistBins, r.x0, r.y0, r.x1, r.y1);
}

// Alternative chi-square distance sum over the enabled channels.
inline double chi_square(const Histogram& a, const Histogram& b,
                         std::array<bool, 3> channels = {true, true, true}) {
  double d = 0;
  for (int c = 0; c < a.channel_count(); ++c) {
    if (c < 3 && !channels[c]) continue;
    for (int k = 0; k < a.bins; ++k) {
      const double r = a.channels[c][k], p = b.channels[c][k];
      d += (r - p) * (r - p) / (r + p + kHistEps);
    }
  }
  return d;
}

// Chi-square distance between the reference histogram and the soft HSV histogram of
// the patch, differentiable w.r.t. patch pixels.
inline double loss_hist(const Raster& p, const Histogram& ref, Raster* grad = nullptr,
                        double scale = 1.0, std::array<bool, 3> channels = {true, true, true}) {
  if (p.channels() != 3) throw std::invalid_argument("loss_hist: expected RGB patch");
  if (ref.channel_count() != 3) throw std::invalid_argument("loss_hist: expected 3-channel histogram");
  const Histogram hp = soft_histogram(p, ColorSpace::HSV, ref.bins);
  const double value = chi_square(ref, hp, channels);
  if (!grad) return value;

  // d(loss)/d(bin mass)
  std::vector<std::vector<double>> dbin(3, std::vector<double>(ref.bins, 0.0));
  for (int c = 0; c < 3; ++c) {
    if (!channels[c]) continue;
    for (int k = 0; k < ref.bins; ++k) {
      const double r = ref.channels[c][k], q = hp.channels[c][k];
      const double den = r + q + kHistEps;
      dbin[c][k] = -(r - q) * (3 * r + q + 2 * kHistEps) / (den * den);
    }
  }
  const double inv_n = 1.0 / (static_cast<double>(p.height()) * p.width());
  const double du_dval = ref.bins - 1;
  for (int y = 0; y < p.height(); ++y)
    for (int x = 0; x < p.width(); ++x) {
      HsvJacobian jac;
      const Hsv hsv = rgb_to_hsv(p.at(y, x, 0), p.at(y, x, 1), p.at(y, x, 2), &jac);
      const double vals[3] = {hsv.h, hsv.s, hsv.v};
      const std::array<double, 3>* rows[3] = {&jac.dh, &jac.ds, &jac.dv};
      for (int c = 0; c < 3; ++c) {
        if (!channels[c]) continue;
        const double u = bin_coordinate(vals[c], ref.bins);
        const int k0 = std::min(static_cast<int>(std::floor(u)), ref.bins - 1);
        if (k0 + 1 >= ref.bins) continue;
        const double dl_du = (dbin[c][k0 + 1] - dbin[c][k0]) * inv_n;
        const double dl_dval = dl_du * du_dval * scale;
        for (int ch = 0; ch < 3; ++ch) grad->at(y, x, ch) += dl_dval * (*rows[c])[ch];
      }
    }
  return value;
}

// ---------------------------------------------------------------------------

struct LossTerms {
  double adv = 0;
  double tv = 0;
  double nps = 0;
  std::optional<double> his;
};

// Hiding:            adv*L_adv + tv*L_TV + nps*L_NPS (no saliency term exists)
// Creating/Altering: adv*L_adv + tv*L_TV + nps*L_NPS + his*L_His
inline double composite_loss(const AttackSpec& spec, const LossTerms& t) {
  const LossWeights& w = spec.weights;
  w.validate();
  double total = w.adv * t.adv + w.tv * t.tv + w.nps * t.nps;
  if (spec.type == AttackType::Hiding) return total;
  if (w.his > 0) {
    if (!t.his) throw std::invalid_argument("composite_loss: L_His required when lambda_His > 0");
    total += w.his * *t.his;
  }
  return total;
}

}  // namespace advpatch
