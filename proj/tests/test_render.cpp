#include <gtest/gtest.h>

#include <cmath>

#include "advpatch/render.hpp"

using namespace advpatch;

namespace {

PhysParams params(double contrast, double brightness) {
  PhysParams p;
  p.contrast = contrast;
  p.brightness = brightness;
  return p;
}

Patch random_patch(int side, std::uint64_t seed) {
  Rng rng(seed);
  Patch p(side);
  for (double& v : p.data()) v = uniform(rng, 0.0, 1.0);
  return p;
}

Image random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image x(h, w);
  for (double& v : x.data()) v = uniform(rng, 0.0, 1.0);
  return x;
}

}  // namespace

TEST(Transform, IdentityParameters) {
  const Patch p = random_patch(16, 1);
  EXPECT_TRUE(transform_patch(p, params(1.0, 0.0)) == p);
}

TEST(Transform, HandArithmetic) {
  const Patch out = transform_patch(Patch(8, 0.5), params(1.2, 0.05));
  for (double v : out.data()) EXPECT_NEAR(v, 0.65, 1e-12);
  const Patch clamped = transform_patch(Patch(8, 0.9), params(1.2, 0.1));
  for (double v : clamped.data()) EXPECT_EQ(v, 1.0);
}

TEST(Transform, SlopeEqualsContrastOnUnclampedPixels) {
  Rng rng(4);
  const PhysParams pp = sample_phys_params(PhysRanges{}, 8, rng);
  Patch p = random_patch(8, 2);
  Raster ones(8, 8, 3, 1.0);
  const Raster g = transform_patch_backward(p, pp, ones);
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double base = transformed_value(pp, p, i);
    if (base <= h || base >= 1 - h) {
      EXPECT_EQ(g.data()[i], 0.0);
      continue;
    }
    Patch plus = p, minus = p;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    const double slope = (transform_patch(plus, pp).data()[i] - transform_patch(minus, pp).data()[i]) / (2 * h);
    EXPECT_NEAR(slope, pp.contrast, 1e-6);
    EXPECT_NEAR(g.data()[i], pp.contrast, 1e-12);
  }
}

TEST(Transform, SampledParamsWithinRanges) {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const PhysParams pp = sample_phys_params(PhysRanges{}, 8, rng);
    EXPECT_GE(pp.contrast, 0.8);
    EXPECT_LE(pp.contrast, 1.2);
    EXPECT_GE(pp.brightness, -0.1);
    EXPECT_LE(pp.brightness, 0.1);
    for (double v : pp.noise.data()) EXPECT_LE(std::abs(v), 0.1);
  }
}

TEST(Warp, UnitScaleCopiesVerbatim) {
  const Patch p = random_patch(16, 3);
  const Raster w = warp_patch(p, Footprint{100, 100, 16, 0}, 200, 200);
  for (int y = 0; y < 200; ++y)
    for (int x = 0; x < 200; ++x)
      for (int c = 0; c < 3; ++c) {
        const bool inside = x >= 92 && x < 108 && y >= 92 && y < 108;
        const double expect = inside ? p.at(y - 92, x - 92, c) : 0.0;
        ASSERT_NEAR(w.at(y, x, c), expect, 1e-12) << x << "," << y;
      }
}

TEST(Warp, RightAngleMatchesPixelRotation) {
  const Patch p = random_patch(16, 5);
  const Raster w = warp_patch(p, Footprint{100, 100, 16, 90}, 200, 200);
  for (int y = 92; y < 108; ++y)
    for (int x = 92; x < 108; ++x)
      for (int c = 0; c < 3; ++c) ASSERT_NEAR(w.at(y, x, c), p.at(107 - x, y - 92, c), 1e-6);
}

TEST(Warp, RotationRoundTripBound) {
  Patch p(64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c)
        p.at(y, x, c) = 0.5 + 0.4 * std::sin(2 * std::numbers::pi * (x + 7 * c) / 32.0) *
                                  std::cos(2 * std::numbers::pi * y / 40.0);
  for (double theta : {10.0, 27.0, 45.0}) {
    const Raster once = warp_patch(p, Footprint{64, 64, 64, theta}, 128, 128);
    const Raster back = warp_patch(Patch(once), Footprint{64, 64, 128, -theta}, 128, 128);
    double worst = 0;
    for (int y = 40; y < 88; ++y)
      for (int x = 40; x < 88; ++x)
        for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(back.at(y, x, c) - p.at(y - 32, x - 32, c)));
    EXPECT_LE(worst, 0.05) << "theta " << theta;
  }
}

TEST(Warp, BackwardIsAdjointOfForward) {
  const Footprint f{60.3, 71.8, 37.5, 23.0};
  const Patch p = random_patch(16, 9);
  const Raster g = random_image(128, 128, 10);
  const Raster w = warp_patch(p, f, 128, 128);
  const Raster gp = warp_patch_backward(g, f, 16);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < w.size(); ++i) lhs += w.data()[i] * g.data()[i];
  for (std::size_t i = 0; i < p.size(); ++i) rhs += p.data()[i] * gp.data()[i];
  EXPECT_NEAR(lhs, rhs, 1e-9 * std::abs(lhs));
}

TEST(Compose, MaskExtremesAndCheckerboard) {
  const Image x = random_image(32, 32, 11);
  const Image pw = random_image(32, 32, 12);
  EXPECT_TRUE(compose(x, Raster(32, 32, 1, 0.0), pw) == x);
  EXPECT_TRUE(compose(x, Raster(32, 32, 1, 1.0), pw) == pw);
  Raster m(32, 32, 1, 0.0);
  for (int y = 0; y < 32; ++y)
    for (int xx = 0; xx < 32; ++xx) m.at(y, xx, 0) = (x.width() * y + xx + y) % 2;
  const Raster out = compose(x, m, pw);
  for (int y = 0; y < 32; ++y)
    for (int xx = 0; xx < 32; ++xx)
      for (int c = 0; c < 3; ++c)
        ASSERT_EQ(out.at(y, xx, c), m.at(y, xx, 0) == 1.0 ? pw.at(y, xx, c) : x.at(y, xx, c));
}

TEST(Compose, Errors) {
  const Image x = random_image(32, 32, 1);
  EXPECT_THROW(compose(x, Raster(32, 31, 1, 0.0), x), std::invalid_argument);
  EXPECT_THROW(compose(x, Raster(32, 32, 1, 0.5), x), std::invalid_argument);
}

TEST(PatchApplication, MatchesWarpAndCompose) {
  const Image x = random_image(96, 96, 13);
  const Patch p = random_patch(16, 14);
  const Footprint f{40.2, 51.7, 30.0, -17.0};
  const PatchApplication app(x, p, {f});
  const Raster m = rasterize_mask(f, 96, 96);
  const Raster expect = compose(x, m, warp_patch(p, f, 96, 96));
  EXPECT_TRUE(app.mask() == m);
  ASSERT_TRUE(app.adversarial().same_shape(expect));
  for (std::size_t i = 0; i < expect.size(); ++i) ASSERT_NEAR(app.adversarial().data()[i], expect.data()[i], 1e-12);
  for (int y = 0; y < 96; ++y)
    for (int xx = 0; xx < 96; ++xx)
      if (m.at(y, xx, 0) == 0.0) {
        for (int c = 0; c < 3; ++c) ASSERT_EQ(app.adversarial().at(y, xx, c), x.at(y, xx, c));
      }
}

TEST(PatchApplication, GradientMatchesFiniteDifferences) {
  const Image x = random_image(64, 64, 15);
  const Patch p = random_patch(8, 16);
  const std::vector<Footprint> fs{{20.5, 22.0, 18.0, 30.0}, {44.0, 40.0, 14.0, -40.0}};
  const Raster w = random_image(64, 64, 17);
  auto objective = [&](const Patch& q) {
    const PatchApplication a(x, q, fs);
    double s = 0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w.data()[i] * a.adversarial().data()[i];
    return s;
  };
  const Raster g = PatchApplication(x, p, fs).backward(w);
  const double h = 1e-4;
  for (std::size_t i = 0; i < p.size(); ++i) {
    Patch plus = p, minus = p;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    EXPECT_NEAR(g.data()[i], (objective(plus) - objective(minus)) / (2 * h), 1e-7);
  }
}

TEST(PatchApplication, NoGradientFromOutsideMask) {
  const Image x = random_image(64, 64, 18);
  const Patch p = random_patch(8, 19);
  const PatchApplication app(x, p, {Footprint{32, 32, 20, 12}});
  const Raster m = app.mask();
  Raster g(64, 64, 3, 0.0);
  Rng rng(20);
  for (int y = 0; y < 64; ++y)
    for (int xx = 0; xx < 64; ++xx)
      if (m.at(y, xx, 0) == 0.0)
        for (int c = 0; c < 3; ++c) g.at(y, xx, c) = uniform(rng, -1, 1);
  const Raster gp = app.backward(g);
  for (double v : gp.data()) EXPECT_EQ(v, 0.0);
}
