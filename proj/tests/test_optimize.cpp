#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "advpatch/blackbox.hpp"
#include "advpatch/optimize.hpp"

using namespace advpatch;

namespace {

ToyDetectorConfig small_config() {
  ToyDetectorConfig c;
  c.input_size = 64;
  c.class_count = 3;
  c.pool = 1;
  c.widths = {8, 16, 16, 16};
  c.strides = {2, 2, 2, 1};
  c.kernels = {3, 3, 3, 3};
  c.spp = {3};
  return c;
}

struct Toy {
  Dataset ds;
  ToyDetector det{small_config()};
};

const Toy& toy() {
  static const Toy t = [] {
    SynthConfig s;
    s.class_count = 3;
    s.image_size = 64;
    s.n_train = 120;
    s.n_val = 12;
    s.min_objects = 1;
    s.max_objects = 2;
    s.min_size = 20;
    s.max_size = 30;
    Toy out;
    out.ds = synth_dataset(s);
    DetectorTrainConfig tc;
    tc.epochs = 15;
    tc.batch_size = 8;
    out.det = train_toy_detector(out.ds.train, small_config(), tc);
    return out;
  }();
  return t;
}

TrainConfig quick(int epochs) {
  TrainConfig c;
  c.patch_side = 16;
  c.epochs = epochs;
  c.batch_size = 4;
  c.patch_frac = 0.5;
  return c;
}

std::vector<LabeledImage> head(const std::vector<LabeledImage>& v, std::size_t n) {
  return {v.begin(), v.begin() + std::min(n, v.size())};
}

// E[clamp(X, 0, 1)] for X ~ N(mu, sigma^2).
double clamped_gaussian_mean(double mu, double sigma) {
  const auto cdf = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  const auto pdf = [](double z) { return std::exp(-z * z / 2) / std::sqrt(2 * std::numbers::pi); };
  const double a = (0 - mu) / sigma, b = (1 - mu) / sigma;
  return mu * (cdf(b) - cdf(a)) + sigma * (pdf(a) - pdf(b)) + (1 - cdf(b));
}

TrainHistory history_of(const std::vector<double>& rs) {
  TrainHistory h;
  for (std::size_t i = 0; i < rs.size(); ++i) {
    EpochRecord r;
    r.epoch = static_cast<int>(i) + 1;
    r.val_rs = rs[i];
    h.epochs.push_back(r);
  }
  return h;
}

}  // namespace

TEST(InitPatch, GrayIsHalf) {
  Rng rng(0);
  const Patch p = init_patch(InitMode::Gray, 64, std::nullopt, rng);
  EXPECT_EQ(p.side(), 64);
  for (double v : p.data()) EXPECT_EQ(v, 0.5);
}

TEST(InitPatch, ReferenceChannelMeans) {
  Rng rng(0);
  const Patch p = init_patch(InitMode::Reference, 64, RefStats{{0.8, 0.1, 0.1}, "x"}, rng);
  double m[3] = {0, 0, 0};
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c) m[c] += p.at(y, x, c) / (64.0 * 64.0);
  // Clamping at 0 lifts a 0.1-mean channel to about 0.171, so compare against the
  // clamped-Gaussian mean; 0.015 is about four Monte-Carlo standard errors.
  EXPECT_NEAR(m[0], clamped_gaussian_mean(0.8, kInitStd), 0.015);
  EXPECT_NEAR(m[1], clamped_gaussian_mean(0.1, kInitStd), 0.015);
  EXPECT_NEAR(m[2], clamped_gaussian_mean(0.1, kInitStd), 0.015);
  EXPECT_NEAR(m[0], 0.8, 0.05);
  EXPECT_TRUE(p.in_unit_range());
}

TEST(InitPatch, RandomSpreadAndDeterminism) {
  Rng a(4), b(4);
  const Patch pa = init_patch(InitMode::Random, 32, std::nullopt, a);
  const Patch pb = init_patch(InitMode::Random, 32, std::nullopt, b);
  EXPECT_TRUE(pa == pb);
  double mean = 0, var = 0;
  for (double v : pa.data()) mean += v / pa.size();
  for (double v : pa.data()) var += (v - mean) * (v - mean) / pa.size();
  EXPECT_NEAR(mean, 0.5, 0.03);
  EXPECT_GT(std::sqrt(var), 0.2);
  EXPECT_LT(std::sqrt(var), 0.3);
}

TEST(InitPatch, ReferenceWithoutStatsRejected) {
  Rng rng(0);
  EXPECT_THROW(init_patch(InitMode::Reference, 16, std::nullopt, rng), std::invalid_argument);
}

TEST(Convergence, ConstantSeriesGivesFirstEpoch) {
  EXPECT_EQ(compute_convergence(history_of(std::vector<double>(40, 0.42))), 1);
}

TEST(Convergence, StepAtEpochHundred) {
  std::vector<double> rs(200, 0.0);
  for (std::size_t i = 99; i < rs.size(); ++i) rs[i] = 0.3;
  EXPECT_EQ(compute_convergence(history_of(rs)), 100);
}

TEST(Convergence, FallsBackToFinalEpochAndNeedsTwentyEpochs) {
  std::vector<double> rs(30);
  for (std::size_t i = 0; i < rs.size(); ++i) rs[i] = i < 20 ? 0.0 : 0.5 + 0.01 * (i - 20);
  EXPECT_EQ(compute_convergence(history_of(rs)), 21);
  EXPECT_THROW(compute_convergence(history_of(std::vector<double>(19, 0.1))), std::invalid_argument);
}

TEST(Convergence, FinalSuccessAveragesLastTen) {
  std::vector<double> rs(25, 0.0);
  for (std::size_t i = 15; i < 25; ++i) rs[i] = 0.1 * (i - 15);
  EXPECT_NEAR(final_success(history_of(rs)), 0.45, 1e-12);
}

TEST(Plateau, DecaysAfterPatienceExceeded) {
  PlateauScheduler s(3, 0.1, 1e-5, 1e-4);
  double lr = 0.03;
  lr = s.step(1.0, lr);
  for (int i = 0; i < 3; ++i) lr = s.step(1.0, lr);
  EXPECT_EQ(lr, 0.03);
  lr = s.step(1.0, lr);
  EXPECT_NEAR(lr, 0.003, 1e-15);
  lr = s.step(0.5, lr);
  EXPECT_NEAR(lr, 0.003, 1e-15);
}

TEST(TrainPatch, ZeroEpochsReturnsInitialPatch) {
  const Toy& t = toy();
  const TrainResult r = train_patch(t.det, t.ds.train, t.ds.val, AttackSpec::hiding(), quick(0));
  EXPECT_TRUE(r.history.empty());
  for (double v : r.patch.data()) EXPECT_EQ(v, 0.5);
}

TEST(TrainPatch, BlackBoxDetectorRejected) {
  const Toy& t = toy();
  const BlackBoxView view(t.det);
  try {
    train_patch(view, t.ds.train, t.ds.val, AttackSpec::hiding(), quick(1));
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("black-box"), std::string::npos);
  }
}

TEST(TrainPatch, DeterministicInRangeAndWeightsUntouched) {
  const Toy& t = toy();
  const auto before = t.det.flat_parameters();
  const auto train = head(t.ds.train, 24);
  const TrainResult a = train_patch(t.det, train, t.ds.val, AttackSpec::hiding(), quick(3));
  const TrainResult b = train_patch(t.det, train, t.ds.val, AttackSpec::hiding(), quick(3));
  EXPECT_TRUE(a.patch == b.patch);
  EXPECT_TRUE(a.patch.in_unit_range());
  EXPECT_FALSE(a.patch == Patch(16, 0.5));
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.history.epochs[i].epoch, static_cast<int>(i) + 1);
    EXPECT_EQ(a.history.epochs[i].loss, b.history.epochs[i].loss);
    EXPECT_EQ(a.history.epochs[i].val_rs, b.history.epochs[i].val_rs);
  }
  EXPECT_EQ(t.det.flat_parameters(), before);
}

TEST(TrainPatch, HidingLossTrendsDown) {
  const Toy& t = toy();
  const TrainResult r = train_patch(t.det, head(t.ds.train, 32), t.ds.val, AttackSpec::hiding(), quick(12));
  EXPECT_LE(r.history.epochs.back().loss, r.history.epochs.front().loss);
}

TEST(TrainPatch, HistogramTermRequiresReference) {
  const Toy& t = toy();
  AttackSpec spec = AttackSpec::creating(1);
  spec.weights.his = 0.3;
  EXPECT_THROW(train_patch(t.det, head(t.ds.train, 4), t.ds.val, spec, quick(1)), std::invalid_argument);
}

TEST(Evaluate, NoiseUsesSamePlacementsAsPatch) {
  const Toy& t = toy();
  const PatchEvalOptions opt{3, 0.5, {}, {}};
  const EvalRun patch = evaluate_patch(t.det, t.ds.val, AttackSpec::hiding(), Patch(16, 0.5), opt);
  const EvalRun noise = evaluate_noise(t.det, t.ds.val, AttackSpec::hiding(), 16, opt);
  EXPECT_EQ(noise.kind, RowKind::Noise);
  ASSERT_EQ(patch.cases.size(), noise.cases.size());
  for (std::size_t i = 0; i < patch.cases.size(); ++i) EXPECT_EQ(patch.cases[i].gt, noise.cases[i].gt);
  const EvalRun clean = evaluate_clean(t.det, t.ds.val);
  EXPECT_EQ(clean.images.size(), t.ds.val.size());
  EXPECT_TRUE(clean.cases.empty());
}
