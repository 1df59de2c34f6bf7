#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "advpatch/core.hpp"
#include "advpatch/geometry.hpp"
#include "advpatch/rng.hpp"

namespace advpatch {

// Sampling ranges for p = p0 * f_const + f_bright + f_noise.
struct PhysRanges {
  double contrast_lo = 0.8;
  double contrast_hi = 1.2;
  double brightness_lo = -0.10;
  double brightness_hi = 0.10;
  double noise = 0.10;

  static PhysRanges identity() { return {1.0, 1.0, 0.0, 0.0, 0.0}; }
};

struct PhysParams {
  double contrast = 1.0;
  double brightness = 0.0;
  Raster noise;  // per pixel, per channel; empty means zero

  void validate() const {
    if (!(contrast > 0)) throw std::invalid_argument("PhysParams: contrast must be > 0");
  }
};

inline PhysParams sample_phys_params(const PhysRanges& r, int side, Rng& rng) {
  PhysParams p;
  p.contrast = r.contrast_lo == r.contrast_hi ? r.contrast_lo
                                              : uniform(rng, r.contrast_lo, r.contrast_hi);
  p.brightness = r.brightness_lo == r.brightness_hi
                     ? r.brightness_lo
                     : uniform(rng, r.brightness_lo, r.brightness_hi);
  if (r.noise > 0) {
    p.noise = Raster(side, side, 3);
    for (double& v : p.noise.data()) v = uniform(rng, -r.noise, r.noise);
  }
  return p;
}

inline double transformed_value(const PhysParams& params, const Raster& p0, std::size_t i) {
  const double n = params.noise.empty() ? 0.0 : params.noise.data()[i];
  return p0.data()[i] * params.contrast + params.brightness + n;
}

inline Patch transform_patch(const Patch& p0, const PhysParams& params) {
  params.validate();
  if (!params.noise.empty() && !params.noise.same_shape(p0))
    throw std::invalid_argument("transform_patch: noise shape mismatch");
  Patch out = p0;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = std::clamp(transformed_value(params, p0, i), 0.0, 1.0);
  return out;
}

// d/dp0 of transform_patch: f_const where the output was not clamped, 0 elsewhere.
inline Raster transform_patch_backward(const Patch& p0, const PhysParams& params,
                                       const Raster& grad_out) {
  Raster g(p0.height(), p0.width(), p0.channels(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double v = transformed_value(params, p0, i);
    if (v > 0.0 && v < 1.0) g.data()[i] = grad_out.data()[i] * params.contrast;
  }
  return g;
}

namespace detail {

struct BilinearTap {
  int x0, y0, x1, y1;
  double w00, w01, w10, w11;
};

// Footprint-local coords -> bilinear taps on the patch grid (clamp-to-edge).
inline BilinearTap bilinear_tap(double u, double v, double footprint_side, int patch_side) {
  const double scale = patch_side / footprint_side;
  const double pu = u * scale - 0.5, pv = v * scale - 0.5;
  const double fu = std::floor(pu), fv = std::floor(pv);
  const double ax = pu - fu, ay = pv - fv;
  auto clampi = [patch_side](double q) {
    return static_cast<int>(std::clamp(q, 0.0, static_cast<double>(patch_side - 1)));
  };
  return {clampi(fu),
          clampi(fv),
          clampi(fu + 1),
          clampi(fv + 1),
          (1 - ax) * (1 - ay),
          ax * (1 - ay),
          (1 - ax) * ay,
          ax * ay};
}

struct PixelSpan {
  int x0, x1, y0, y1;
};

inline PixelSpan footprint_span(const Footprint& f, int width, int height) {
  double xmin = f.cx, xmax = f.cx, ymin = f.cy, ymax = f.cy;
  for (const auto& v : f.polygon()) {
    xmin = std::min(xmin, v[0]);
    xmax = std::max(xmax, v[0]);
    ymin = std::min(ymin, v[1]);
    ymax = std::max(ymax, v[1]);
  }
  return {std::max(0, static_cast<int>(std::floor(xmin))),
          std::min(width - 1, static_cast<int>(std::ceil(xmax))),
          std::max(0, static_cast<int>(std::floor(ymin))),
          std::min(height - 1, static_cast<int>(std::ceil(ymax)))};
}

}  // namespace detail

// Bilinearly resamples the patch into its rotated footprint; zero elsewhere.
inline Raster warp_patch(const Raster& p, const Footprint& f, int width, int height) {
  Raster out(height, width, p.channels(), 0.0);
  if (f.side < 1.0) return out;
  const auto span = detail::footprint_span(f, width, height);
  for (int y = span.y0; y <= span.y1; ++y)
    for (int x = span.x0; x <= span.x1; ++x) {
      if (!f.contains(x + 0.5, y + 0.5)) continue;
      const auto [u, v] = f.to_local(x + 0.5, y + 0.5);
      const auto t = detail::bilinear_tap(u, v, f.side, p.width());
      for (int c = 0; c < p.channels(); ++c)
        out.at(y, x, c) = t.w00 * p.at(t.y0, t.x0, c) + t.w01 * p.at(t.y0, t.x1, c) +
                          t.w10 * p.at(t.y1, t.x0, c) + t.w11 * p.at(t.y1, t.x1, c);
    }
  return out;
}

inline Raster warp_patch(const Raster& p, const MaskSpec& spec) {
  return warp_patch(p, footprint(spec), spec.width, spec.height);
}

// Adjoint of warp_patch: scatters an image-sized gradient back onto patch pixels.
inline Raster warp_patch_backward(const Raster& grad_warped, const Footprint& f, int patch_side) {
  Raster g(patch_side, patch_side, grad_warped.channels(), 0.0);
  if (f.side < 1.0) return g;
  const auto span = detail::footprint_span(f, grad_warped.width(), grad_warped.height());
  for (int y = span.y0; y <= span.y1; ++y)
    for (int x = span.x0; x <= span.x1; ++x) {
      if (!f.contains(x + 0.5, y + 0.5)) continue;
      const auto [u, v] = f.to_local(x + 0.5, y + 0.5);
      const auto t = detail::bilinear_tap(u, v, f.side, patch_side);
      for (int c = 0; c < g.channels(); ++c) {
        const double gv = grad_warped.at(y, x, c);
        g.at(t.y0, t.x0, c) += t.w00 * gv;
        g.at(t.y0, t.x1, c) += t.w01 * gv;
        g.at(t.y1, t.x0, c) += t.w10 * gv;
        g.at(t.y1, t.x1, c) += t.w11 * gv;
      }
    }
  return g;
}

// x_adv = (1 - m) . x + m . p_warped with a binary mask.
inline Raster compose(const Raster& x, const Raster& m, const Raster& p_warped) {
  if (m.height() != x.height() || m.width() != x.width() || m.channels() != 1 ||
      !p_warped.same_shape(x))
    throw std::invalid_argument("compose: shape mismatch");
  Raster out = x;
  for (int y = 0; y < x.height(); ++y)
    for (int xx = 0; xx < x.width(); ++xx) {
      const double mv = m.at(y, xx, 0);
      if (mv == 0.0) continue;
      if (mv != 1.0) throw std::invalid_argument("compose: mask must be binary");
      for (int c = 0; c < x.channels(); ++c) out.at(y, xx, c) = p_warped.at(y, xx, c);
    }
  return out;
}

// Applies one transformed patch at several footprints (one per object for Hiding and
// Altering, one per image for Creating) and backpropagates image gradients to the patch.
// Later footprints overwrite earlier ones where they overlap, matching sequential compose.
class PatchApplication {
 public:
  PatchApplication(const Image& x, const Patch& patch, std::vector<Footprint> footprints)
      : footprints_(std::move(footprints)), patch_side_(patch.side()),
        owner_(static_cast<std::size_t>(x.height()) * x.width(), -1), adv_(x) {
    for (int k = 0; k < static_cast<int>(footprints_.size()); ++k) {
      const Footprint& f = footprints_[k];
      if (f.side < 1.0) continue;
      const auto span = detail::footprint_span(f, x.width(), x.height());
      for (int y = span.y0; y <= span.y1; ++y)
        for (int xx = span.x0; xx <= span.x1; ++xx) {
          if (!f.contains(xx + 0.5, y + 0.5)) continue;
          const auto [u, v] = f.to_local(xx + 0.5, y + 0.5);
          const auto t = detail::bilinear_tap(u, v, f.side, patch_side_);
          for (int c = 0; c < 3; ++c)
            adv_.at(y, xx, c) = t.w00 * patch.at(t.y0, t.x0, c) + t.w01 * patch.at(t.y0, t.x1, c) +
                                t.w10 * patch.at(t.y1, t.x0, c) + t.w11 * patch.at(t.y1, t.x1, c);
          owner_[static_cast<std::size_t>(y) * x.width() + xx] = k;
        }
    }
  }

  const Image& adversarial() const { return adv_; }
  const std::vector<Footprint>& footprints() const { return footprints_; }

  Raster mask() const {
    Raster m(adv_.height(), adv_.width(), 1, 0.0);
    for (std::size_t i = 0; i < owner_.size(); ++i)
      if (owner_[i] >= 0) m.data()[i] = 1.0;
    return m;
  }

  // d(loss)/d(patch) given d(loss)/d(x_adv).
  Raster backward(const Raster& grad_image) const {
    Raster g(patch_side_, patch_side_, 3, 0.0);
    const int W = adv_.width();
    for (int k = 0; k < static_cast<int>(footprints_.size()); ++k) {
      const Footprint& f = footprints_[k];
      if (f.side < 1.0) continue;
      const auto span = detail::footprint_span(f, W, adv_.height());
      for (int y = span.y0; y <= span.y1; ++y)
        for (int xx = span.x0; xx <= span.x1; ++xx) {
          if (owner_[static_cast<std::size_t>(y) * W + xx] != k) continue;
          const auto [u, v] = f.to_local(xx + 0.5, y + 0.5);
          const auto t = detail::bilinear_tap(u, v, f.side, patch_side_);
          for (int c = 0; c < 3; ++c) {
            const double gv = grad_image.at(y, xx, c);
            g.at(t.y0, t.x0, c) += t.w00 * gv;
            g.at(t.y0, t.x1, c) += t.w01 * gv;
            g.at(t.y1, t.x0, c) += t.w10 * gv;
            g.at(t.y1, t.x1, c) += t.w11 * gv;
          }
        }
    }
    return g;
  }

 private:
  std::vector<Footprint> footprints_;
  int patch_side_;
  std::vector<int> owner_;
  Image adv_;
};

}  // namespace advpatch
