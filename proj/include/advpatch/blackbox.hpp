#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advpatch/core.hpp"
#include "advpatch/detector.hpp"
#include "advpatch/io.hpp"
#include "advpatch/metrics.hpp"
#include "advpatch/optimize.hpp"

namespace advpatch {

struct QueryBudget {
  std::size_t max = 0;
  std::size_t consumed = 0;

  std::size_t remaining() const { return max - consumed; }
  bool exhausted() const { return consumed >= max; }
  bool try_consume() {
    if (exhausted()) return false;
    ++consumed;
    return true;
  }
};

struct BudgetExhausted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Delegating adapter that counts every query and every gradient access made
// through it.
class AccessCountingAdapter : public DetectorAdapter {
 public:
  explicit AccessCountingAdapter(const DetectorAdapter& inner) : inner_(inner) {}

  std::string name() const override { return inner_.name(); }
  int class_count() const override { return inner_.class_count(); }
  int input_height() const override { return inner_.input_height(); }
  int input_width() const override { return inner_.input_width(); }
  Capabilities capabilities() const override { return inner_.capabilities(); }
  double default_conf_thresh() const override { return inner_.default_conf_thresh(); }
  double default_nms_iou() const override { return inner_.default_nms_iou(); }

  RawDetections detect_raw(const Image& x) const override {
    ++queries_;
    return inner_.detect_raw(x);
  }
  std::unique_ptr<DifferentiableForward> forward(const Image& x) const override {
    ++gradient_accesses_;
    return inner_.forward(x);
  }

  std::size_t queries() const { return queries_; }
  std::size_t gradient_accesses() const { return gradient_accesses_; }

 private:
  const DetectorAdapter& inner_;
  mutable std::atomic<std::size_t> queries_{0};
  mutable std::atomic<std::size_t> gradient_accesses_{0};
};

// Score-free view of a victim: queries pass through, gradients are refused.
class BlackBoxView : public DetectorAdapter {
 public:
  explicit BlackBoxView(const DetectorAdapter& inner) : inner_(inner) {}

  std::string name() const override { return inner_.name(); }
  int class_count() const override { return inner_.class_count(); }
  int input_height() const override { return inner_.input_height(); }
  int input_width() const override { return inner_.input_width(); }
  Capabilities capabilities() const override { return {false, false}; }
  double default_conf_thresh() const override { return inner_.default_conf_thresh(); }
  double default_nms_iou() const override { return inner_.default_nms_iou(); }
  RawDetections detect_raw(const Image& x) const override { return inner_.detect_raw(x); }
  using DetectorAdapter::detect;
  Detections detect(const Image& x, double conf, double iou_thresh) const override {
    return inner_.detect(x, conf, iou_thresh);
  }

 private:
  const DetectorAdapter& inner_;
};

struct PseudoLabelSet {
  std::string victim;
  double conf_thresh = kDefaultConfThresh;
  double nms_iou = kDefaultNmsIou;
  int class_count = 0;
  std::vector<LabeledImage> images;       // boxes = victim detections
  std::vector<Detections> detections;     // same order, with confidences
  std::size_t queries = 0;
  bool budget_exhausted = false;
};

// One victim query per image, in order. Stops early when the budget runs out.
inline PseudoLabelSet collect_pseudo_labels(const DetectorAdapter& victim, const std::vector<LabeledImage>& images,
                                            std::optional<double> conf_thresh, QueryBudget& budget) {
  if (budget.exhausted()) throw BudgetExhausted("collect_pseudo_labels: query budget exhausted");
  PseudoLabelSet out;
  out.victim = victim.name();
  out.conf_thresh = conf_thresh.value_or(victim.default_conf_thresh());
  out.nms_iou = victim.default_nms_iou();
  out.class_count = victim.class_count();
  for (const auto& li : images) {
    if (!budget.try_consume()) {
      out.budget_exhausted = true;
      break;
    }
    ++out.queries;
    Detections dets = victim.detect(li.image(), out.conf_thresh, out.nms_iou);
    LabeledImage labeled{li.id, li.height, li.width, li.rgb, {}};
    for (const auto& d : dets) labeled.boxes.push_back(d.box);
    out.images.push_back(std::move(labeled));
    out.detections.push_back(std::move(dets));
  }
  return out;
}

inline nlohmann::json provenance_json(const PseudoLabelSet& s) {
  return {{"victim", s.victim},   {"conf_thresh", s.conf_thresh}, {"nms_iou", s.nms_iou},
          {"queries", s.queries}, {"images", s.images.size()},     {"budget_exhausted", s.budget_exhausted}};
}

// Writes the labels as a dataset (train split) plus pseudo_labels.json.
inline void write_pseudo_labels(const PseudoLabelSet& s, const fs::path& root) {
  Dataset ds;
  ds.name = "pseudo-" + s.victim;
  if (!s.images.empty()) ds.image_size = s.images.front().width;
  for (int c = 0; c < s.class_count; ++c) ds.classes.push_back(generic_class(c));
  ds.train = s.images;
  write_dataset(ds, root);
  std::ofstream out(root / "pseudo_labels.json");
  if (!out) throw std::runtime_error("cannot write pseudo-label provenance in " + root.string());
  out << provenance_json(s).dump(2) << "\n";
}

inline bool same_architecture(const ToyDetectorConfig& a, const ToyDetectorConfig& b) {
  return a.pool == b.pool && a.widths == b.widths && a.strides == b.strides && a.kernels == b.kernels &&
         a.spp == b.spp;
}

// Adds "<label> (Top k)": mean of the k best per-class CM values of `row`.
inline std::optional<ReportRow> top_k_row(const ReportRow& row, int k) {
  if (k < 1 || row.per_class_cm.empty()) return std::nullopt;
  std::vector<double> v;
  for (const auto& [c, cm] : row.per_class_cm) v.push_back(cm);
  std::sort(v.begin(), v.end(), std::greater<>());
  const std::size_t n = std::min<std::size_t>(k, v.size());
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  ReportRow out = row;
  out.label = row.label + " (Top " + std::to_string(k) + ")";
  out.cm = s / static_cast<double>(n);
  out.ciou.reset();
  out.per_class_cm.clear();
  return out;
}

inline constexpr int kTopK = 3;

// Evaluates a surrogate-trained patch on the victim: clean, noise and patch rows
// plus a top-k class breakdown.
inline Report transfer_eval(const Patch& patch, const std::string& surrogate, const DetectorAdapter& victim,
                            const std::vector<LabeledImage>& images, const AttackSpec& spec,
                            const PatchEvalOptions& opt = {}, const std::string& label = "Transfer Patch") {
  if (surrogate == victim.name())
    throw std::invalid_argument("transfer_eval: patch was trained on the victim itself ('" + surrogate + "')");
  if (images.empty()) return {};
  std::vector<EvalRun> runs{evaluate_clean(victim, images, spec.type),
                            evaluate_noise(victim, images, spec, patch.side(), opt),
                            evaluate_patch(victim, images, spec, patch, opt, label)};
  Report r = assemble_report(runs);
  if (auto top = top_k_row(r.rows.back(), kTopK)) r.rows.push_back(*top);
  return r;
}

struct ShadowConfig {
  ToyDetectorConfig arch;
  DetectorTrainConfig train;
  std::size_t query_budget = 0;  // required; no default budget exists
  std::optional<double> conf_thresh;
  double patch_val_fraction = 0.2;

  void validate() const {
    arch.validate();
    if (!(patch_val_fraction >= 0 && patch_val_fraction < 1))
      throw std::invalid_argument("ShadowConfig: patch_val_fraction must be in [0,1)");
  }
};

struct ShadowResult {
  std::unique_ptr<ToyDetector> shadow;
  Patch patch;
  TrainHistory history;
  PseudoLabelSet labels;
  Report report;
};

// Pseudo-labels from the victim -> shadow detector -> white-box patch on the
// shadow -> evaluation on the victim. The victim is only ever queried.
inline ShadowResult shadow_pipeline(const DetectorAdapter& victim, const ShadowConfig& cfg,
                                    const std::vector<LabeledImage>& attacker_images,
                                    const std::vector<LabeledImage>& eval_images, const AttackSpec& spec,
                                    const TrainConfig& train_cfg, const AttackContext& ctx = {},
                                    const Patch* transfer_baseline = nullptr,
                                    const std::string& transfer_source = "") {
  cfg.validate();
  if (cfg.query_budget == 0) throw BudgetExhausted("shadow_pipeline: query budget is zero");
  if (const auto* toy = dynamic_cast<const ToyDetector*>(&victim)) {
    if (same_architecture(toy->config(), cfg.arch))
      throw std::invalid_argument("shadow_pipeline: shadow architecture must differ from the victim's");
  }
  if (cfg.arch.name == victim.name())
    throw std::invalid_argument("shadow_pipeline: shadow name must differ from the victim's");
  if (cfg.arch.class_count != victim.class_count())
    throw std::invalid_argument("shadow_pipeline: shadow class count must match the victim's");

  const BlackBoxView view(victim);
  QueryBudget budget{cfg.query_budget, 0};
  ShadowResult out;
  out.labels = collect_pseudo_labels(view, attacker_images, cfg.conf_thresh, budget);
  if (out.labels.images.empty()) throw std::runtime_error("shadow_pipeline: no pseudo-labeled images");

  out.shadow = std::make_unique<ToyDetector>(train_toy_detector(out.labels.images, cfg.arch, cfg.train));

  const auto& all = out.labels.images;
  const std::size_t n_val = static_cast<std::size_t>(cfg.patch_val_fraction * static_cast<double>(all.size()));
  const std::vector<LabeledImage> ptrain(all.begin(), all.end() - static_cast<std::ptrdiff_t>(n_val));
  const std::vector<LabeledImage> pval(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());
  TrainResult tr = train_patch(*out.shadow, ptrain, pval, spec, train_cfg, ctx);
  out.patch = std::move(tr.patch);
  out.history = std::move(tr.history);

  const PatchEvalOptions opt{train_cfg.seed, train_cfg.patch_frac, {}, {}};
  std::vector<EvalRun> runs{evaluate_clean(view, eval_images, spec.type),
                            evaluate_noise(view, eval_images, spec, out.patch.side(), opt),
                            evaluate_patch(view, eval_images, spec, out.patch, opt, "Shadow Patch")};
  if (transfer_baseline) {
    if (transfer_source == victim.name())
      throw std::invalid_argument("shadow_pipeline: transfer baseline was trained on the victim");
    runs.push_back(evaluate_patch(view, eval_images, spec, *transfer_baseline, opt, "Transfer Patch"));
  }
  out.report = assemble_report(runs);
  return out;
}

}  // namespace advpatch
