#include <gtest/gtest.h>

#include <filesystem>

#include "advpatch/detector.hpp"
#include "advpatch/io.hpp"

using namespace advpatch;

namespace {

Detection det(double cx, double cy, double w, double h, int cls, double conf) {
  return Detection{BoundingBox{cx, cy, w, h, cls}, conf};
}

ToyDetectorConfig small_config(int classes = 3) {
  ToyDetectorConfig c;
  c.input_size = 64;
  c.class_count = classes;
  c.pool = 1;
  c.widths = {8, 16, 16, 16};
  c.strides = {2, 2, 2, 1};
  c.kernels = {3, 3, 3, 3};
  c.spp = {3};
  return c;
}

SynthConfig small_synth(int n_train, int classes = 3) {
  SynthConfig s;
  s.class_count = classes;
  s.image_size = 64;
  s.n_train = n_train;
  s.n_val = 0;
  s.min_objects = 1;
  s.max_objects = 2;
  s.min_size = 16;
  s.max_size = 28;
  return s;
}

Image random_image(int side, std::uint64_t seed) {
  Rng rng(seed);
  Image x(side, side);
  for (double& v : x.data()) v = uniform(rng, 0, 1);
  return x;
}

}  // namespace

TEST(Nms, SingleBoxAndIdenticalPair) {
  const Detections one{det(0.5, 0.5, 0.2, 0.2, 0, 0.7)};
  EXPECT_EQ(nms(one, 0.5), one);
  const Detections pair{det(0.5, 0.5, 0.2, 0.2, 0, 0.8), det(0.5, 0.5, 0.2, 0.2, 0, 0.9)};
  const Detections kept = nms(pair, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].confidence, 0.9);
}

TEST(Nms, HandTraceThreeBoxes) {
  const Detection a = det(0.5, 0.5, 0.2, 0.2, 0, 0.9);
  // B shifted so IoU(A,B) = 0.6; C shifted so IoU(A,C) = 0.2.
  const Detection b = det(0.5 + 0.2 * 0.25, 0.5, 0.2, 0.2, 0, 0.8);
  const Detection c = det(0.5 + 0.2 * (1 - 0.4 / 1.2), 0.5, 0.2, 0.2, 0, 0.7);
  ASSERT_NEAR(iou(a.box, b.box), 0.6, 1e-12);
  ASSERT_NEAR(iou(a.box, c.box), 0.2, 1e-12);
  const Detections out = nms({c, b, a}, 0.5);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0], a);
  EXPECT_EQ(out[1], c);
}

TEST(Nms, PerClassIdempotentAndNoMutation) {
  Rng rng(3);
  Detections d;
  for (int i = 0; i < 60; ++i)
    d.push_back(det(uniform(rng, 0.3, 0.7), uniform(rng, 0.3, 0.7), 0.2, 0.2, uniform_int(rng, 0, 2), uniform(rng, 0, 1)));
  const Detections once = nms(d, 0.45);
  EXPECT_EQ(nms(once, 0.45), once);
  for (const auto& k : once) EXPECT_NE(std::find(d.begin(), d.end(), k), d.end());
  // Identical boxes with different classes both survive.
  const Detections two{det(0.5, 0.5, 0.2, 0.2, 0, 0.9), det(0.5, 0.5, 0.2, 0.2, 1, 0.8)};
  EXPECT_EQ(nms(two, 0.5).size(), 2u);
  EXPECT_THROW(nms(d, 1.0), std::invalid_argument);
}

TEST(ToyDetector, PredictionCountAndRanges) {
  const ToyDetector m(small_config());
  EXPECT_EQ(m.grid(), 8);
  const RawDetections raw = m.detect_raw(random_image(64, 1));
  ASSERT_EQ(raw.preds.size(), 64u);
  for (const auto& p : raw.preds) {
    EXPECT_GE(p.obj, 0.0);
    EXPECT_LE(p.obj, 1.0);
    ASSERT_EQ(p.cls.size(), 3u);
    for (double v : p.cls) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  const ToyDetector full{ToyDetectorConfig{}};
  EXPECT_EQ(full.detect_raw(random_image(256, 2)).preds.size(),
            static_cast<std::size_t>(full.grid() * full.grid()));
}

TEST(ToyDetector, SizeMismatchRejected) {
  const ToyDetector m(small_config());
  EXPECT_THROW(m.detect_raw(random_image(96, 1)), std::invalid_argument);
}

TEST(ToyDetector, InvalidConfigRejected) {
  ToyDetectorConfig c = small_config();
  c.strides = {2, 2, 4, 2};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.conf_thresh = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ToyDetector, DetectConsistentWithRaw) {
  ToyDetectorConfig c = small_config();
  c.init_seed = 5;
  const ToyDetector m(c);
  for (int i = 0; i < 100; ++i) {
    const Image x = random_image(64, 100 + i);
    const double conf = 0.05 + 0.001 * i;
    EXPECT_EQ(m.detect(x, conf, 0.45), threshold_and_nms(m.detect_raw(x), conf, 0.45));
  }
  EXPECT_TRUE(m.detect(random_image(64, 7), 1.0, 0.45).empty());
}

TEST(ToyDetector, ObjectnessGradientReachesInput) {
  const ToyDetector m(small_config());
  const auto fwd = m.forward(random_image(64, 4));
  RawGrad g = RawGrad::zeros_like(fwd->raw());
  for (double& v : g.obj) v = 1.0;
  const Raster gx = fwd->backward(g);
  double mag = 0;
  for (double v : gx.data()) mag += std::abs(v);
  EXPECT_GT(mag, 0.0);
}

TEST(ToyDetector, CheckpointRoundTrip) {
  ToyDetectorConfig c = small_config();
  c.init_seed = 9;
  c.name = "ckpt";
  const ToyDetector m(c);
  const auto path = std::filesystem::temp_directory_path() / "advpatch_test_detector.bin";
  save_detector(m, path.string());
  const ToyDetector back = load_detector(path.string());
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.flat_parameters(), m.flat_parameters());
  const Image x = random_image(64, 3);
  EXPECT_EQ(back.detect(x), m.detect(x));
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  EXPECT_THROW(load_detector(path.string()), std::runtime_error);
  std::filesystem::remove(path);
  EXPECT_THROW(load_detector(path.string()), std::runtime_error);
}

TEST(Training, EmptyDatasetRejected) {
  EXPECT_THROW(train_toy_detector({}, small_config(), DetectorTrainConfig{}), std::invalid_argument);
}

TEST(Training, OverfitsSingleImage) {
  const Dataset ds = synth_dataset(small_synth(1));
  DetectorTrainConfig tc;
  tc.epochs = 300;
  tc.batch_size = 1;
  tc.lr = 1e-2;
  tc.flip = false;
  tc.brightness = false;
  const ToyDetector m = train_toy_detector(ds.train, small_config(), tc);
  EXPECT_EQ(evaluate_map50(m, ds.train), 1.0);
}

TEST(Training, BlankImageHasLowObjectness) {
  SynthConfig s = small_synth(160);
  const Dataset ds = synth_dataset(s);
  DetectorTrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 8;
  const ToyDetector m = train_toy_detector(ds.train, small_config(), tc);
  const RawDetections raw = m.detect_raw(Image(64, 64, 0.5));
  for (const auto& p : raw.preds) EXPECT_LE(p.obj, 0.2);
}

TEST(Training, DeterministicForSeed) {
  const Dataset ds = synth_dataset(small_synth(12));
  DetectorTrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  const ToyDetector a = train_toy_detector(ds.train, small_config(), tc);
  const ToyDetector b = train_toy_detector(ds.train, small_config(), tc);
  EXPECT_EQ(a.flat_parameters(), b.flat_parameters());
}
