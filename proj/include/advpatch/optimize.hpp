#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advpatch/core.hpp"
#include "advpatch/detector.hpp"
#include "advpatch/geometry.hpp"
#include "advpatch/io.hpp"
#include "advpatch/losses.hpp"
#include "advpatch/metrics.hpp"
#include "advpatch/nn.hpp"
#include "advpatch/parallel.hpp"
#include "advpatch/render.hpp"
#include "advpatch/rng.hpp"

namespace advpatch {

inline constexpr double kInitStd = 0.3;

struct TrainConfig {
  int patch_side = 64;
  int epochs = 200;
  double lr = 0.03;
  int patience = 50;
  double lr_decay = 0.1;
  double min_lr = 1e-5;
  double plateau_threshold = 1e-4;  // relative improvement needed to reset patience
  int batch_size = 8;
  std::uint64_t seed = 0;
  double patch_frac = kDefaultPatchFrac;
  PhysRanges phys;
  int checkpoint_every = 0;  // 0: never
  std::string checkpoint_dir;
  bool verbose = false;

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
    if (!(lr_decay > 0 && lr_decay < 1)) throw std::invalid_argument("TrainConfig: lr_decay must be in (0,1)");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (patch_side < Patch::kMinSide) throw std::invalid_argument("TrainConfig: patch side must be >= 8");
    if (!(phys.contrast_lo > 0) || phys.contrast_hi < phys.contrast_lo)
      throw std::invalid_argument("TrainConfig: bad contrast range");
  }
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss = 0, adv = 0, tv = 0, nps = 0;
  std::optional<double> his;
  double val_loss = 0;
  double val_rs = 0;
  double lr = 0;
  double seconds = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t size() const { return epochs.size(); }
  bool empty() const { return epochs.empty(); }
};

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch}, {"loss", r.loss},       {"adv", r.adv},       {"tv", r.tv},
                      {"nps", r.nps},     {"val_loss", r.val_loss}, {"val_rs", r.val_rs}, {"lr", r.lr},
                      {"seconds", r.seconds}};
  if (r.his) j["his"] = *r.his;
  return j;
}

// Mean RGB of target-class object pixels plus the image it was taken from.
struct RefStats {
  std::array<double, 3> mean{0.5, 0.5, 0.5};
  std::string image_id;

  void validate() const {
    for (double v : mean)
      if (!(v >= 0 && v <= 1)) throw std::invalid_argument("RefStats: mean outside [0,1]");
  }
};

// Everything a patch loss needs besides the detector and images.
struct AttackContext {
  PrintPalette palette = PrintPalette::lattice();
  std::optional<Histogram> ref_hist;  // required when lambda_His > 0
  std::optional<RefStats> ref;        // required for reference init
};

inline Patch init_patch(InitMode mode, int side, const std::optional<RefStats>& ref, Rng& rng) {
  Patch p(side, 0.5);
  switch (mode) {
    case InitMode::Gray: break;
    case InitMode::Random:
      for (double& v : p.data()) v = std::clamp(gaussian(rng, 0.5, kInitStd), 0.0, 1.0);
      break;
    case InitMode::Reference:
      if (!ref) throw std::invalid_argument("init_patch: reference init requires RefStats");
      ref->validate();
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          for (int c = 0; c < 3; ++c) p.at(y, x, c) = std::clamp(gaussian(rng, ref->mean[c], kInitStd), 0.0, 1.0);
      break;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Placement of a patch in one image for a given attack.

struct ImagePlacement {
  std::vector<Footprint> footprints;
  std::vector<BoundingBox> hosts;        // patched objects (Hiding/Altering)
  std::optional<CreatingPlacement> rm;   // Creating
  bool empty() const { return footprints.empty(); }
};

// Objects of the target class are not attacked by Altering.
inline bool attackable(const AttackSpec& spec, const BoundingBox& b) {
  return !(spec.type == AttackType::Altering && spec.target_class && b.class_id == *spec.target_class);
}

inline ImagePlacement sample_placement(const AttackSpec& spec, const std::vector<BoundingBox>& boxes, int width,
                                       int height, double patch_frac, Rng& rng) {
  ImagePlacement out;
  if (spec.type == AttackType::Creating) {
    const CreatingPlacement cp = sample_creating_placement(width, height, rng);
    out.footprints.push_back(footprint(creating_mask_spec(cp, width, height)));
    out.rm = cp;
    return out;
  }
  for (const auto& b : boxes) {
    if (!attackable(spec, b)) continue;
    try {
      out.footprints.push_back(footprint(sample_object_placement(b, patch_frac, width, height, rng)));
      out.hosts.push_back(b);
    } catch (const PlacementInfeasible&) {
    }
  }
  return out;
}

inline std::array<double, 2> footprint_center(const Footprint& f, int width, int height) {
  return {f.cx / width, f.cy / height};
}

// Adversarial loss of one image (mean over patched objects for Hiding/Altering).
inline double image_adv_loss(const AttackSpec& spec, const RawDetections& raw, const ImagePlacement& pl,
                             int width, int height, RawGrad* grad) {
  if (spec.type == AttackType::Creating) return loss_creating_adv(raw, *pl.rm, *spec.target_class, grad);
  const double n = static_cast<double>(pl.hosts.size());
  double sum = 0;
  for (std::size_t k = 0; k < pl.hosts.size(); ++k) {
    const auto assoc = associate_predictions(raw, pl.hosts[k], footprint_center(pl.footprints[k], width, height));
    if (spec.type == AttackType::Hiding)
      sum += loss_hiding_adv(raw, assoc, spec.adv_mode, grad, 1.0 / n);
    else
      sum += loss_altering_adv(raw, assoc, *spec.target_class, grad, 1.0 / n);
  }
  return sum / n;
}

// Case used for CM: Hiding/Altering score only the objects that carried a patch.
inline EvalCase make_case(const AttackSpec& spec, const std::vector<BoundingBox>& gt, const ImagePlacement& pl,
                          Detections dets) {
  EvalCase c;
  c.attack = spec.type;
  c.target = spec.target_class;
  c.det_adv = std::move(dets);
  if (spec.type == AttackType::Creating) {
    c.gt = gt;
    c.rm = pl.rm->rm;
  } else {
    c.gt = pl.hosts;
  }
  return c;
}

struct PatchLossParts {
  double tv = 0, nps = 0;
  std::optional<double> his;
};

inline PatchLossParts patch_losses(const AttackSpec& spec, const AttackContext& ctx, const Patch& p,
                                   Raster* grad) {
  const LossWeights& w = spec.weights;
  PatchLossParts parts;
  parts.tv = loss_tv(p, grad, w.tv);
  parts.nps = loss_nps(p, ctx.palette, grad, w.nps);
  if (spec.type != AttackType::Hiding && w.his > 0) {
    if (!ctx.ref_hist) throw std::invalid_argument("train_patch: lambda_His > 0 requires a reference histogram");
    parts.his = loss_hist(p, *ctx.ref_hist, grad, w.his);
  } else if (spec.type != AttackType::Hiding && ctx.ref_hist) {
    parts.his = loss_hist(p, *ctx.ref_hist);
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Evaluation with fixed placements and no physical transform.

inline constexpr std::uint64_t kEvalStream = 0xe7a1ULL;

inline ImagePlacement eval_placement(const AttackSpec& spec, const LabeledImage& li, std::uint64_t seed,
                                     std::size_t index, double patch_frac) {
  Rng rng = make_rng({seed, kEvalStream, static_cast<std::uint64_t>(index)});
  return sample_placement(spec, li.boxes, li.width, li.height, patch_frac, rng);
}

struct PatchEvalOptions {
  std::uint64_t seed = 0;
  double patch_frac = kDefaultPatchFrac;
  std::optional<double> conf_thresh;
  std::optional<double> nms_iou;
};

struct PerImageEval {
  std::vector<EvalCase> cases;
  std::vector<ImageEval> images;
  std::vector<double> adv_loss;  // per image; NaN when nothing was attacked
};

inline PerImageEval evaluate_patch_images(const DetectorAdapter& det, const std::vector<LabeledImage>& images,
                                          const AttackSpec& spec, const Patch& patch,
                                          const PatchEvalOptions& opt) {
  PerImageEval out;
  out.cases.resize(images.size());
  out.images.resize(images.size());
  out.adv_loss.assign(images.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<char> used(images.size(), 0);
  const double conf = opt.conf_thresh.value_or(det.default_conf_thresh());
  const double nms_iou = opt.nms_iou.value_or(det.default_nms_iou());
  parallel_for(static_cast<int>(images.size()), [&](int i) {
    const LabeledImage& li = images[i];
    const ImagePlacement pl = eval_placement(spec, li, opt.seed, i, opt.patch_frac);
    const Image x = li.image();
    const PatchApplication app(x, patch, pl.footprints);
    const RawDetections raw = det.detect_raw(app.adversarial());
    Detections dets = threshold_and_nms(raw, conf, nms_iou);
    out.images[i] = {li.boxes, dets};
    if (pl.empty()) return;
    out.adv_loss[i] = image_adv_loss(spec, raw, pl, li.width, li.height, nullptr);
    out.cases[i] = make_case(spec, li.boxes, pl, std::move(dets));
    used[i] = 1;
  });
  std::vector<EvalCase> kept;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (used[i]) kept.push_back(std::move(out.cases[i]));
  out.cases = std::move(kept);
  return out;
}

// Mean per-image CM over attacked images.
inline double mean_cm(const std::vector<EvalCase>& cases) {
  if (cases.empty()) return 0.0;
  double s = 0;
  for (const auto& c : cases) s += cm(c);
  return s / static_cast<double>(cases.size());
}

inline EvalRun evaluate_patch(const DetectorAdapter& det, const std::vector<LabeledImage>& images,
                              const AttackSpec& spec, const Patch& patch, const PatchEvalOptions& opt,
                              std::string label = "Patch") {
  PerImageEval e = evaluate_patch_images(det, images, spec, patch, opt);
  EvalRun run;
  run.model = det.name();
  run.label = std::move(label);
  run.kind = RowKind::Patch;
  run.attack = spec.type;
  run.cases = std::move(e.cases);
  run.images = std::move(e.images);
  return run;
}

// Uniform-noise occlusion at the same placements the patch would use.
inline EvalRun evaluate_noise(const DetectorAdapter& det, const std::vector<LabeledImage>& images,
                              const AttackSpec& spec, int side, const PatchEvalOptions& opt) {
  Rng rng = make_rng({opt.seed, 0x7015eULL});
  Patch noise(side);
  for (double& v : noise.data()) v = uniform(rng, 0.0, 1.0);
  EvalRun run = evaluate_patch(det, images, spec, noise, opt, "Noise");
  run.kind = RowKind::Noise;
  return run;
}

inline EvalRun evaluate_clean(const DetectorAdapter& det, const std::vector<LabeledImage>& images,
                              AttackType attack = AttackType::Hiding) {
  EvalRun run;
  run.model = det.name();
  run.label = "No Attack";
  run.kind = RowKind::NoAttack;
  run.attack = attack;
  run.images.resize(images.size());
  parallel_for(static_cast<int>(images.size()), [&](int i) {
    run.images[i] = {images[i].boxes, det.detect(images[i].image())};
  });
  return run;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  Patch patch;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&, const Patch&)>;

// Reduce-on-plateau: after more than `patience` epochs without a relative
// improvement of the monitored value, multiply lr by `factor`.
class PlateauScheduler {
 public:
  PlateauScheduler(int patience, double factor, double min_lr, double threshold)
      : patience_(patience), factor_(factor), min_lr_(min_lr), threshold_(threshold) {}

  // Returns the new learning rate.
  double step(double value, double lr) {
    if (value < best_ * (1.0 - threshold_) || !seen_) {
      best_ = value;
      seen_ = true;
      bad_ = 0;
      return lr;
    }
    if (++bad_ > patience_) {
      bad_ = 0;
      return std::max(min_lr_, lr * factor_);
    }
    return lr;
  }

 private:
  int patience_;
  double factor_, min_lr_, threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  bool seen_ = false;
  int bad_ = 0;
};

inline TrainResult train_patch(const DetectorAdapter& det, const std::vector<LabeledImage>& train,
                               const std::vector<LabeledImage>& val, const AttackSpec& spec,
                               const TrainConfig& cfg, const AttackContext& ctx = {},
                               const EpochCallback& on_epoch = {}) {
  if (!det.capabilities().differentiable)
    throw std::invalid_argument("train_patch: detector '" + det.name() +
                                "' is not differentiable; use the black-box pipelines (transfer or shadow attack)");
  if (train.empty()) throw std::invalid_argument("train_patch: empty training set");
  cfg.validate();
  spec.validate(det.class_count());
  ctx.palette.validate();

  Rng init_rng = make_rng({cfg.seed, 0x1417ULL});
  TrainResult result{init_patch(spec.init, cfg.patch_side, ctx.ref, init_rng), {}};
  Patch& patch = result.patch;
  if (cfg.epochs == 0) return result;

  nn::Adam adam(cfg.lr);
  PlateauScheduler plateau(cfg.patience, cfg.lr_decay, cfg.min_lr, cfg.plateau_threshold);
  std::vector<std::size_t> order(train.size());
  const PatchEvalOptions val_opt{cfg.seed, cfg.patch_frac, {}, {}};
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng({cfg.seed, 0x5b0fULL, static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double sum_adv = 0, sum_tv = 0, sum_nps = 0, sum_his = 0, sum_loss = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const int n = static_cast<int>(std::min<std::size_t>(cfg.batch_size, order.size() - start));
      std::vector<Raster> grads(n);
      std::vector<double> losses(n, 0.0);
      std::vector<char> active(n, 0);
      parallel_for(n, [&](int k) {
        const std::size_t idx = order[start + k];
        const LabeledImage& li = train[idx];
        Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(idx)});
        const ImagePlacement pl = sample_placement(spec, li.boxes, li.width, li.height, cfg.patch_frac, rng);
        if (pl.empty()) return;
        const PhysParams phys = sample_phys_params(cfg.phys, patch.side(), rng);
        const Patch p = transform_patch(patch, phys);
        const Image x = li.image();
        const PatchApplication app(x, p, pl.footprints);
        const auto fwd = det.forward(app.adversarial());
        RawGrad rg = RawGrad::zeros_like(fwd->raw());
        losses[k] = image_adv_loss(spec, fwd->raw(), pl, li.width, li.height, &rg);
        const Raster gimg = fwd->backward(rg);
        grads[k] = transform_patch_backward(patch, phys, app.backward(gimg));
        active[k] = 1;
      });
      Raster g(patch.side(), patch.side(), 3, 0.0);
      int used = 0;
      double adv = 0;
      for (int k = 0; k < n; ++k) {
        if (!active[k]) continue;
        ++used;
        adv += losses[k];
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += grads[k].data()[i];
      }
      if (used > 0) {
        adv /= used;
        for (double& v : g.data()) v *= spec.weights.adv / used;
      }
      const PatchLossParts parts = patch_losses(spec, ctx, patch, &g);
      LossTerms terms{adv, parts.tv, parts.nps, parts.his};
      const double total = composite_loss(spec, terms);
      if (!std::isfinite(total))
        throw std::runtime_error("train_patch: loss not finite at epoch " + std::to_string(epoch) + ", seed " +
                                 std::to_string(cfg.seed));
      adam.step({patch.data().data()}, {g.data().data()}, {patch.size()});
      patch.clamp01();
      sum_adv += adv;
      sum_tv += parts.tv;
      sum_nps += parts.nps;
      if (parts.his) sum_his += *parts.his;
      sum_loss += total;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = sum_loss / batches;
    rec.adv = sum_adv / batches;
    rec.tv = sum_tv / batches;
    rec.nps = sum_nps / batches;
    if (spec.type != AttackType::Hiding && ctx.ref_hist) rec.his = sum_his / batches;
    rec.lr = adam.lr();

    const std::vector<LabeledImage>& vset = val.empty() ? train : val;
    const PerImageEval ev = evaluate_patch_images(det, vset, spec, patch, val_opt);
    double vadv = 0;
    int vn = 0;
    for (double l : ev.adv_loss)
      if (!std::isnan(l)) {
        vadv += l;
        ++vn;
      }
    const PatchLossParts vparts = patch_losses(spec, ctx, patch, nullptr);
    rec.val_loss = composite_loss(spec, {vn ? vadv / vn : 0.0, vparts.tv, vparts.nps, vparts.his});
    rec.val_rs = mean_cm(ev.cases);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    adam.set_lr(plateau.step(rec.val_loss, adam.lr()));

    if (!patch.in_unit_range()) throw std::logic_error("train_patch: patch left [0,1]");
    result.history.epochs.push_back(rec);
    if (cfg.verbose)
      std::cerr << "[patch " << to_string(spec.type) << "] epoch " << epoch << "/" << cfg.epochs << " loss "
                << rec.loss << " adv " << rec.adv << " val_rs " << rec.val_rs << " lr " << rec.lr << " ("
                << rec.seconds << " s)\n";
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && !cfg.checkpoint_dir.empty()) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      save_patch(std::filesystem::path(cfg.checkpoint_dir) / ("epoch_" + std::to_string(epoch) + ".patch"), patch,
                 {{"epoch", epoch}, {"seed", cfg.seed}, {"attack", to_string(spec.type)}});
    }
    if (on_epoch) on_epoch(rec, patch);
  }
  return result;
}

// First epoch whose validation R_S lies inside the [min, max] range of the final
// 10 epochs. Epochs are 1-based.
inline int compute_convergence(const TrainHistory& h) {
  constexpr std::size_t kTail = 10;
  if (h.size() < 20) throw std::invalid_argument("compute_convergence: history needs >= 20 epochs");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = h.size() - kTail; i < h.size(); ++i) {
    lo = std::min(lo, h.epochs[i].val_rs);
    hi = std::max(hi, h.epochs[i].val_rs);
  }
  for (std::size_t i = 0; i < h.size(); ++i)
    if (h.epochs[i].val_rs >= lo && h.epochs[i].val_rs <= hi) return static_cast<int>(i) + 1;
  return static_cast<int>(h.size());
}

// Mean validation R_S over the final 10 epochs.
inline double final_success(const TrainHistory& h) {
  if (h.empty()) return 0.0;
  const std::size_t n = std::min<std::size_t>(10, h.size());
  double s = 0;
  for (std::size_t i = h.size() - n; i < h.size(); ++i) s += h.epochs[i].val_rs;
  return s / static_cast<double>(n);
}

}  // namespace advpatch
