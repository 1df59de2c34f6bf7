#pragma once

#include <array>
#include <cmath>
#include <iostream>
#include <numbers>
#include <stdexcept>
#include <variant>

#include "advpatch/core.hpp"
#include "advpatch/rng.hpp"

namespace advpatch {

inline constexpr double kMaxAngleDeg = 45.0;
inline constexpr double kDefaultPatchFrac = 0.35;

struct PlacementInfeasible : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// m = f_angle . f_scale . f_loc(m0). loc is the normalized position of the patch
// center inside the range of centers that keep the unrotated footprint in the host.
struct AffineParams {
  double angle = 0.0;  // degrees
  double scale = kDefaultPatchFrac;
  double loc_u = 0.5;
  double loc_v = 0.5;

  void validate() const {
    if (std::abs(angle) > kMaxAngleDeg) throw std::invalid_argument("AffineParams: |angle| > 45");
    if (!(scale > 0.0 && scale <= 1.0)) throw std::invalid_argument("AffineParams: scale not in (0,1]");
  }
};

// Random mask area for the Creating attack and the patch placed inside it.
struct CreatingPlacement {
  Corners rm{};            // normalized corners
  double rw = 0, rh = 0;   // rm extents as fractions of W, H
  double p_size = 0;       // patch side, px
  double center_x = 0;     // normalized
  double center_y = 0;
  double angle = 0;        // degrees

  double l_diag() const { return p_size * (std::numbers::sqrt2 - 1.0); }
  BoundingBox rm_box() const { return corners_to_center(rm); }
};

struct MaskSpec {
  std::variant<BoundingBox, CreatingPlacement> host;
  AffineParams affine;
  int height = 0;
  int width = 0;
};

// Resolved pixel-space footprint of a square patch.
struct Footprint {
  double cx = 0, cy = 0;  // px
  double side = 0;        // px
  double angle = 0;       // degrees

  // Corners in image pixel coordinates, counter-clockwise in local frame.
  std::array<std::array<double, 2>, 4> polygon() const {
    const double th = angle * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th), h = side / 2;
    const double local[4][2] = {{-h, -h}, {h, -h}, {h, h}, {-h, h}};
    std::array<std::array<double, 2>, 4> out{};
    for (int i = 0; i < 4; ++i)
      out[i] = {cx + c * local[i][0] - s * local[i][1], cy + s * local[i][0] + c * local[i][1]};
    return out;
  }

  // Image px -> footprint-local coordinates in [0, side]^2 when inside.
  std::array<double, 2> to_local(double x, double y) const {
    const double th = angle * std::numbers::pi / 180.0;
    const double c = std::cos(th), s = std::sin(th);
    const double dx = x - cx, dy = y - cy;
    return {c * dx + s * dy + side / 2, -s * dx + c * dy + side / 2};
  }

  bool contains(double x, double y) const {
    const auto [u, v] = to_local(x, y);
    return u >= 0 && u <= side && v >= 0 && v <= side;
  }
};

inline Footprint footprint(const MaskSpec& spec) {
  const double W = spec.width, H = spec.height;
  if (const auto* cp = std::get_if<CreatingPlacement>(&spec.host)) {
    return {cp->center_x * W, cp->center_y * H, cp->p_size, cp->angle};
  }
  const BoundingBox& box = std::get<BoundingBox>(spec.host);
  const Corners c = box_center_to_corners(box);
  const double bw = (c.x2 - c.x1) * W, bh = (c.y2 - c.y1) * H;
  const double side = spec.affine.scale * std::min(bw, bh);
  const double cx = c.x1 * W + side / 2 + spec.affine.loc_u * (bw - side);
  const double cy = c.y1 * H + side / 2 + spec.affine.loc_v * (bh - side);
  return {cx, cy, side, spec.affine.angle};
}

inline MaskSpec object_mask_spec(const BoundingBox& box, const AffineParams& affine, int width,
                                 int height) {
  return {box, affine, height, width};
}

// Patch inside an object's box: side = patch_frac * min box side (px), uniform
// center with the unrotated footprint inside the box, angle ~ U[-45, 45].
inline MaskSpec sample_object_placement(const BoundingBox& box, double patch_frac, int width,
                                        int height, Rng& rng) {
  if (!(patch_frac > 0.0 && patch_frac <= 0.6))
    throw std::invalid_argument("sample_object_placement: patch_frac must be in (0, 0.6]");
  if (!is_valid_box(box)) throw std::invalid_argument("sample_object_placement: invalid box");
  const Corners c = box_center_to_corners(box);
  const double side = patch_frac * std::min((c.x2 - c.x1) * width, (c.y2 - c.y1) * height);
  if (side < Patch::kMinSide)
    throw PlacementInfeasible("object box too small to host an 8 px patch (side " +
                              std::to_string(side) + " px)");
  AffineParams a;
  a.scale = patch_frac;
  a.loc_u = uniform(rng, 0.0, 1.0);
  a.loc_v = uniform(rng, 0.0, 1.0);
  a.angle = uniform(rng, -kMaxAngleDeg, kMaxAngleDeg);
  return {box, a, height, width};
}

// rw, rh ~ U[0.2, 0.7]; p_size = min(rw W, rh H) * U[0.25, 0.40]. The center keeps a
// margin of p_size/2 + l_diag from every rm edge, so any rotation up to 45 degrees
// stays inside rm.
inline CreatingPlacement sample_creating_placement(int width, int height, Rng& rng) {
  if (width < 64 || height < 64)
    throw std::invalid_argument("sample_creating_placement: W and H must be >= 64");
  const double W = width, H = height;
  CreatingPlacement p;
  p.rw = uniform(rng, 0.20, 0.70);
  p.rh = uniform(rng, 0.20, 0.70);
  const double x1 = uniform(rng, 0.0, 1.0 - p.rw);
  const double y1 = uniform(rng, 0.0, 1.0 - p.rh);
  p.rm = {x1, y1, x1 + p.rw, y1 + p.rh};
  p.p_size = std::min(p.rw * W, p.rh * H) * uniform(rng, 0.25, 0.40);
  const double margin = p.p_size / 2 + p.l_diag();
  p.center_x = uniform(rng, x1 * W + margin, (x1 + p.rw) * W - margin) / W;
  p.center_y = uniform(rng, y1 * H + margin, (y1 + p.rh) * H - margin) / H;
  p.angle = uniform(rng, -kMaxAngleDeg, kMaxAngleDeg);
  return p;
}

inline MaskSpec creating_mask_spec(const CreatingPlacement& p, int width, int height) {
  AffineParams a;
  a.angle = p.angle;
  a.scale = std::clamp(p.p_size / std::min(p.rw * width, p.rh * height), 1e-9, 1.0);
  a.loc_u = p.center_x;
  a.loc_v = p.center_y;
  return {p, a, height, width};
}

// Exact containment of the rotated footprint polygon in rm (convex: check vertices).
inline bool footprint_inside_rm(const CreatingPlacement& p, int width, int height) {
  const Footprint f{p.center_x * width, p.center_y * height, p.p_size, p.angle};
  for (const auto& v : f.polygon()) {
    if (v[0] < p.rm.x1 * width || v[0] > p.rm.x2 * width) return false;
    if (v[1] < p.rm.y1 * height || v[1] > p.rm.y2 * height) return false;
  }
  return true;
}

// Binary H x W x 1 raster: 1 iff the pixel center lies inside the rotated footprint.
inline Raster rasterize_mask(const Footprint& f, int width, int height) {
  Raster m(height, width, 1, 0.0);
  if (f.side < 1.0) {
    std::cerr << "warning: patch side " << f.side << " px < 1, mask is empty\n";
    return m;
  }
  double xmin = f.cx, xmax = f.cx, ymin = f.cy, ymax = f.cy;
  for (const auto& v : f.polygon()) {
    xmin = std::min(xmin, v[0]);
    xmax = std::max(xmax, v[0]);
    ymin = std::min(ymin, v[1]);
    ymax = std::max(ymax, v[1]);
  }
  const int x0 = std::max(0, static_cast<int>(std::floor(xmin)));
  const int x1 = std::min(width - 1, static_cast<int>(std::ceil(xmax)));
  const int y0 = std::max(0, static_cast<int>(std::floor(ymin)));
  const int y1 = std::min(height - 1, static_cast<int>(std::ceil(ymax)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (f.contains(x + 0.5, y + 0.5)) m.at(y, x, 0) = 1.0;
  return m;
}

inline Raster rasterize_mask(const MaskSpec& spec) {
  return rasterize_mask(footprint(spec), spec.width, spec.height);
}

}  // namespace advpatch
