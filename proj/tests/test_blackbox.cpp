#include <gtest/gtest.h>

#include <filesystem>

#include "advpatch/blackbox.hpp"

using namespace advpatch;

namespace {

ToyDetectorConfig victim_config() {
  ToyDetectorConfig c;
  c.name = "victim";
  c.input_size = 64;
  c.class_count = 3;
  c.pool = 1;
  c.widths = {8, 16, 16, 16};
  c.strides = {2, 2, 2, 1};
  c.kernels = {3, 3, 3, 3};
  c.spp = {3};
  return c;
}

ToyDetectorConfig shadow_config() {
  ToyDetectorConfig c = victim_config();
  c.name = "shadow";
  c.widths = {8, 8, 16, 16};
  c.spp = {};
  return c;
}

struct World {
  Dataset ds;
  ToyDetector victim{victim_config()};
};

const World& world() {
  static const World w = [] {
    SynthConfig s;
    s.class_count = 3;
    s.image_size = 64;
    s.n_train = 120;
    s.n_val = 16;
    s.n_test = 25;
    s.min_objects = 1;
    s.max_objects = 2;
    s.min_size = 20;
    s.max_size = 30;
    World out;
    out.ds = synth_dataset(s);
    DetectorTrainConfig tc;
    tc.epochs = 15;
    tc.batch_size = 8;
    out.victim = train_toy_detector(out.ds.train, victim_config(), tc);
    return out;
  }();
  return w;
}

std::vector<LabeledImage> blanks(int n) {
  std::vector<LabeledImage> out;
  for (int i = 0; i < n; ++i) out.push_back(LabeledImage::from_image("blank" + std::to_string(i), Image(64, 64, 0.5), {}));
  return out;
}

}  // namespace

TEST(PseudoLabels, BudgetCutsCollectionShort) {
  const World& w = world();
  QueryBudget budget{10, 0};
  const PseudoLabelSet s = collect_pseudo_labels(BlackBoxView(w.victim), w.ds.test, std::nullopt, budget);
  EXPECT_EQ(s.images.size(), 10u);
  EXPECT_EQ(s.queries, 10u);
  EXPECT_TRUE(s.budget_exhausted);
  EXPECT_TRUE(budget.exhausted());
  EXPECT_THROW(collect_pseudo_labels(w.victim, w.ds.test, std::nullopt, budget), BudgetExhausted);
}

TEST(PseudoLabels, LabelsAreVictimDetections) {
  const World& w = world();
  QueryBudget budget{100, 0};
  const PseudoLabelSet s = collect_pseudo_labels(w.victim, w.ds.test, std::nullopt, budget);
  EXPECT_FALSE(s.budget_exhausted);
  ASSERT_EQ(s.images.size(), w.ds.test.size());
  for (std::size_t i = 0; i < s.images.size(); ++i) {
    const Detections d = w.victim.detect(w.ds.test[i].image());
    ASSERT_EQ(s.images[i].boxes.size(), d.size());
    for (std::size_t k = 0; k < d.size(); ++k) EXPECT_EQ(s.images[i].boxes[k], d[k].box);
    EXPECT_EQ(s.images[i].rgb, w.ds.test[i].rgb);
  }
}

TEST(PseudoLabels, BlankImagesAreBackgroundOnly) {
  const World& w = world();
  QueryBudget budget{5, 0};
  const PseudoLabelSet s = collect_pseudo_labels(w.victim, blanks(5), std::nullopt, budget);
  ASSERT_EQ(s.images.size(), 5u);
  for (const auto& li : s.images) EXPECT_TRUE(li.boxes.empty());
}

TEST(PseudoLabels, Deterministic) {
  const World& w = world();
  QueryBudget a{50, 0}, b{50, 0};
  const PseudoLabelSet x = collect_pseudo_labels(w.victim, w.ds.test, 0.3, a);
  const PseudoLabelSet y = collect_pseudo_labels(w.victim, w.ds.test, 0.3, b);
  ASSERT_EQ(x.detections.size(), y.detections.size());
  for (std::size_t i = 0; i < x.detections.size(); ++i) EXPECT_EQ(x.detections[i], y.detections[i]);
  EXPECT_EQ(provenance_json(x), provenance_json(y));
}

TEST(PseudoLabels, WrittenAsDatasetWithProvenance) {
  const World& w = world();
  QueryBudget budget{4, 0};
  const PseudoLabelSet s = collect_pseudo_labels(w.victim, w.ds.test, std::nullopt, budget);
  const auto root = std::filesystem::temp_directory_path() / "advpatch_pseudo_test";
  std::filesystem::remove_all(root);
  write_pseudo_labels(s, root);
  EXPECT_TRUE(std::filesystem::exists(root / "pseudo_labels.json"));
  const Dataset back = load_dataset(root);
  ASSERT_EQ(back.train.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(back.train[i].boxes.size(), s.images[i].boxes.size());
  std::filesystem::remove_all(root);
}

TEST(BlackBoxView, RefusesGradients) {
  const World& w = world();
  const BlackBoxView view(w.victim);
  EXPECT_FALSE(view.capabilities().differentiable);
  EXPECT_THROW(view.forward(w.ds.test[0].image()), std::logic_error);
  EXPECT_EQ(view.detect(w.ds.test[0].image()), w.victim.detect(w.ds.test[0].image()));
}

TEST(Shadow, ZeroBudgetAbortsBeforeTraining) {
  const World& w = world();
  ShadowConfig cfg;
  cfg.arch = shadow_config();
  cfg.query_budget = 0;
  EXPECT_THROW(shadow_pipeline(w.victim, cfg, w.ds.train, w.ds.val, AttackSpec::hiding(), TrainConfig{}),
               BudgetExhausted);
}

TEST(Shadow, SameArchitectureRejected) {
  const World& w = world();
  ShadowConfig cfg;
  cfg.arch = victim_config();
  cfg.arch.name = "copy";
  cfg.query_budget = 10;
  EXPECT_THROW(shadow_pipeline(w.victim, cfg, w.ds.train, w.ds.val, AttackSpec::hiding(), TrainConfig{}),
               std::invalid_argument);
}

TEST(Shadow, PipelineNeverTouchesVictimGradients) {
  const World& w = world();
  const AccessCountingAdapter counted(w.victim);
  ShadowConfig cfg;
  cfg.arch = shadow_config();
  cfg.train.epochs = 3;
  cfg.train.batch_size = 8;
  cfg.query_budget = 40;
  TrainConfig tc;
  tc.patch_side = 16;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.patch_frac = 0.5;
  const Patch transfer(16, 0.3);
  const ShadowResult r = shadow_pipeline(counted, cfg, w.ds.train, w.ds.val, AttackSpec::hiding(), tc, {},
                                         &transfer, "elsewhere");
  EXPECT_EQ(counted.gradient_accesses(), 0u);
  EXPECT_EQ(r.labels.queries, 40u);
  EXPECT_GE(counted.queries(), 40u);
  EXPECT_NE(r.report.find("Shadow Patch", AttackType::Hiding), nullptr);
  EXPECT_NE(r.report.find("Transfer Patch", AttackType::Hiding), nullptr);
  EXPECT_NE(r.report.find("Noise", AttackType::Hiding), nullptr);
  EXPECT_EQ(r.history.size(), 2u);
}

TEST(Transfer, RejectsPatchTrainedOnVictimAndAddsTopK) {
  const World& w = world();
  EXPECT_THROW(transfer_eval(Patch(16, 0.5), "victim", w.victim, w.ds.val, AttackSpec::hiding()),
               std::invalid_argument);
  const Report r = transfer_eval(Patch(16, 0.5), "surrogate", w.victim, w.ds.val, AttackSpec::hiding(),
                                 PatchEvalOptions{0, 0.5, {}, {}});
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.rows[3].label, "Transfer Patch (Top 3)");
  EXPECT_TRUE(r.gaps.empty());
}

TEST(Transfer, TopKIsMeanOfBestClasses) {
  ReportRow row;
  row.label = "P";
  row.per_class_cm = {{0, 0.2}, {1, 0.9}, {2, 0.5}, {3, 0.7}};
  const auto top = top_k_row(row, 3);
  ASSERT_TRUE(top);
  EXPECT_NEAR(*top->cm, (0.9 + 0.7 + 0.5) / 3, 1e-12);
  EXPECT_FALSE(top_k_row(ReportRow{}, 3));
}
