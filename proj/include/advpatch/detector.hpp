#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advpatch/core.hpp"
#include "advpatch/metrics.hpp"
#include "advpatch/nn.hpp"
#include "advpatch/parallel.hpp"
#include "advpatch/rng.hpp"

namespace advpatch {

inline constexpr double kDefaultConfThresh = 0.25;
inline constexpr double kDefaultNmsIou = 0.45;

struct Capabilities {
  bool differentiable = false;
  bool trainable = false;
};

// One differentiable forward pass: raw predictions plus the ability to pull
// d(loss)/d(scores) back to d(loss)/d(image).
class DifferentiableForward {
 public:
  virtual ~DifferentiableForward() = default;
  virtual const RawDetections& raw() const = 0;
  virtual Raster backward(const RawGrad& grad) const = 0;
};

// Contract every attack runs against. detect() must equal threshold + NMS applied
// to detect_raw().
class DetectorAdapter {
 public:
  virtual ~DetectorAdapter() = default;
  virtual std::string name() const = 0;
  virtual int class_count() const = 0;
  virtual int input_height() const = 0;
  virtual int input_width() const = 0;
  virtual Capabilities capabilities() const = 0;
  virtual double default_conf_thresh() const { return kDefaultConfThresh; }
  virtual double default_nms_iou() const { return kDefaultNmsIou; }

  virtual RawDetections detect_raw(const Image& x) const = 0;

  // Only for differentiable adapters.
  virtual std::unique_ptr<DifferentiableForward> forward(const Image& x) const {
    (void)x;
    throw std::logic_error(name() + " is not differentiable; use the black-box pipelines");
  }

  virtual Detections detect(const Image& x, double conf_thresh, double iou_thresh) const;
  Detections detect(const Image& x) const { return detect(x, default_conf_thresh(), default_nms_iou()); }

 protected:
  void check_input(const Raster& x) const {
    if (x.height() != input_height() || x.width() != input_width() || x.channels() != 3)
      throw std::invalid_argument(name() + ": input is " + std::to_string(x.height()) + "x" +
                                  std::to_string(x.width()) + ", expected " +
                                  std::to_string(input_height()) + "x" + std::to_string(input_width()));
  }
};

// Greedy per-class NMS: keep the highest-scoring box, drop same-class boxes with
// IoU > iou_thresh against it, repeat. Output sorted by confidence, descending.
inline Detections nms(const Detections& dets, double iou_thresh) {
  if (!(iou_thresh > 0 && iou_thresh < 1)) throw std::invalid_argument("nms: iou_thresh must be in (0,1)");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });
  std::vector<bool> removed(dets.size(), false);
  Detections out;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (removed[i]) continue;
    out.push_back(dets[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (removed[j] || dets[j].box.class_id != dets[i].box.class_id) continue;
      if (iou(dets[i].box, dets[j].box) > iou_thresh) removed[j] = true;
    }
  }
  return out;
}

// y = y_obj * max(y_cls) >= conf_thresh, class = argmax y_cls, then NMS.
inline Detections threshold_and_nms(const RawDetections& raw, double conf_thresh, double iou_thresh) {
  if (!(conf_thresh > 0 && conf_thresh <= 1)) throw std::invalid_argument("detect: conf_thresh must be in (0,1]");
  Detections cand;
  for (const auto& p : raw.preds) {
    if (p.cls.empty()) continue;
    const auto it = std::max_element(p.cls.begin(), p.cls.end());
    const double score = p.obj * *it;
    if (score < conf_thresh) continue;
    BoundingBox b = p.box;
    b.class_id = static_cast<int>(it - p.cls.begin());
    cand.push_back({b, score});
  }
  return nms(cand, iou_thresh);
}

inline Detections DetectorAdapter::detect(const Image& x, double conf_thresh, double iou_thresh) const {
  return threshold_and_nms(detect_raw(x), conf_thresh, iou_thresh);
}

// ---------------------------------------------------------------------------
// Toy grid detector: optional avg-pool, strided conv backbone, 1x1 head producing
// (tx, ty, tw, th, obj, cls...) per cell, one box per cell.

struct ToyDetectorConfig {
  std::string name = "toy";
  int input_size = 256;
  int class_count = 8;
  int pool = 2;
  std::vector<int> widths = {16, 32, 32, 32, 32};
  std::vector<int> strides = {2, 2, 2, 2, 1};
  std::vector<int> kernels = {3, 3, 3, 3, 3};
  std::vector<int> spp = {3, 5};  // max-pool context kernels before the head; empty disables
  double conf_thresh = kDefaultConfThresh;
  double nms_iou = kDefaultNmsIou;
  std::uint64_t init_seed = 0;

  int grid() const {
    int s = input_size / pool;
    for (std::size_t l = 0; l < strides.size() && l < kernels.size(); ++l) {
      const nn::ConvShape shape{1, 1, kernels[l], strides[l]};
      s = (s + 2 * shape.pad() - kernels[l]) / strides[l] + 1;
    }
    return s;
  }
  int boxes_per_cell() const { return 1; }

  void validate() const {
    if (widths.empty() || widths.size() != strides.size() || widths.size() != kernels.size())
      throw std::invalid_argument("ToyDetectorConfig: widths, strides and kernels must be non-empty and equal length");
    if (pool < 1 || input_size % pool != 0) throw std::invalid_argument("ToyDetectorConfig: input_size % pool != 0");
    for (int k : spp)
      if (k < 3 || k % 2 == 0) throw std::invalid_argument("ToyDetectorConfig: spp kernels must be odd and >= 3");
    for (std::size_t l = 0; l < kernels.size(); ++l) {
      if (kernels[l] < 1 || strides[l] < 1) throw std::invalid_argument("ToyDetectorConfig: kernels and strides must be >= 1");
      if (kernels[l] % 2 == 0 && kernels[l] != strides[l])
        throw std::invalid_argument("ToyDetectorConfig: even kernels must equal their stride");
    }
    if (class_count < 1) throw std::invalid_argument("ToyDetectorConfig: class_count must be >= 1");
    if (grid() < 4) throw std::invalid_argument("ToyDetectorConfig: grid size S must be >= 4");
    if (!(conf_thresh > 0 && conf_thresh < 1)) throw std::invalid_argument("ToyDetectorConfig: conf_thresh must be in (0,1)");
    if (!(nms_iou > 0 && nms_iou < 1)) throw std::invalid_argument("ToyDetectorConfig: nms_iou must be in (0,1)");
  }

  friend bool operator==(const ToyDetectorConfig&, const ToyDetectorConfig&) = default;
};

inline nlohmann::json to_json(const ToyDetectorConfig& c) {
  return {{"name", c.name},       {"input_size", c.input_size}, {"class_count", c.class_count},
          {"pool", c.pool},       {"widths", c.widths},         {"strides", c.strides},
          {"kernels", c.kernels},  {"spp", c.spp},   {"conf_thresh", c.conf_thresh}, {"nms_iou", c.nms_iou},
          {"init_seed", c.init_seed}};
}

inline ToyDetectorConfig toy_config_from_json(const nlohmann::json& j) {
  ToyDetectorConfig c;
  c.name = j.value("name", c.name);
  c.input_size = j.value("input_size", c.input_size);
  c.class_count = j.value("class_count", c.class_count);
  c.pool = j.value("pool", c.pool);
  c.widths = j.value("widths", c.widths);
  c.strides = j.value("strides", c.strides);
  c.kernels = j.value("kernels", c.kernels);
  c.spp = j.value("spp", c.spp);
  c.conf_thresh = j.value("conf_thresh", c.conf_thresh);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  c.init_seed = j.value("init_seed", c.init_seed);
  return c;
}

struct DetectorTrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double lr = 3e-3;
  std::uint64_t seed = 0;
  bool flip = true;
  bool brightness = true;
  double box_weight = 5.0;
  double noobj_weight = 0.5;
  bool iou_obj_target = true;
  bool verbose = false;
};

class ToyDetector;

struct DetectorGrads {
  std::vector<nn::Mat> dw;
  std::vector<nn::Vec> db;

  void add(const DetectorGrads& o) {
    for (std::size_t i = 0; i < dw.size(); ++i) {
      dw[i] += o.dw[i];
      db[i] += o.db[i];
    }
  }
};

class ToyDetector : public DetectorAdapter {
 public:
  explicit ToyDetector(ToyDetectorConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = make_rng({cfg_.init_seed, 0xde7ec7u});
    int in = 3;
    for (std::size_t l = 0; l < cfg_.widths.size(); ++l) {
      layers_.emplace_back(nn::ConvShape{in, cfg_.widths[l], cfg_.kernels[l], cfg_.strides[l]}, true, rng);
      in = cfg_.widths[l];
    }
    in *= static_cast<int>(1 + cfg_.spp.size());
    layers_.emplace_back(nn::ConvShape{in, 5 + cfg_.class_count, 1, 1}, false, rng);
    // Start with low objectness so early training is dominated by positives.
    layers_.back().weight *= 0.1;
    layers_.back().bias(4) = -4.0;
  }

  const ToyDetectorConfig& config() const { return cfg_; }
  std::string name() const override { return cfg_.name; }
  int class_count() const override { return cfg_.class_count; }
  int input_height() const override { return cfg_.input_size; }
  int input_width() const override { return cfg_.input_size; }
  Capabilities capabilities() const override { return {true, true}; }
  double default_conf_thresh() const override { return cfg_.conf_thresh; }
  double default_nms_iou() const override { return cfg_.nms_iou; }
  int grid() const { return cfg_.grid(); }

  std::vector<nn::Conv>& layers() { return layers_; }
  const std::vector<nn::Conv>& layers() const { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    for (const auto& l : layers_) {
      out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
      out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
    return out;
  }

  void set_flat_parameters(const std::vector<double>& p) {
    if (p.size() != parameter_count()) throw std::invalid_argument("ToyDetector: parameter count mismatch");
    std::size_t off = 0;
    for (auto& l : layers_) {
      std::copy(p.begin() + off, p.begin() + off + l.weight.size(), l.weight.data());
      off += l.weight.size();
      std::copy(p.begin() + off, p.begin() + off + l.bias.size(), l.bias.data());
      off += l.bias.size();
    }
  }

  DetectorGrads zero_grads() const {
    DetectorGrads g;
    for (const auto& l : layers_) {
      g.dw.push_back(nn::Mat::Zero(l.weight.rows(), l.weight.cols()));
      g.db.push_back(nn::Vec::Zero(l.bias.size()));
    }
    return g;
  }

  struct Pass {
    nn::FeatureMap pooled;
    std::vector<nn::Conv::Cache> caches;
    nn::SppCache spp;
    nn::Mat logits;  // (5 + C) x S*S
    RawDetections raw;
  };

  Pass run(const Raster& x) const {
    check_input(x);
    Pass pass;
    pass.pooled = nn::avg_pool_image(x, cfg_.pool);
    pass.caches.resize(layers_.size());
    nn::FeatureMap f = pass.pooled;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (l + 1 == layers_.size() && !cfg_.spp.empty()) f = nn::spp_forward(f, cfg_.spp, pass.spp);
      f = layers_[l].forward(f, pass.caches[l]);
    }
    pass.logits = std::move(f.data);
    pass.raw = decode(pass.logits);
    return pass;
  }

  RawDetections decode(const nn::Mat& logits) const {
    const int S = grid(), C = cfg_.class_count;
    RawDetections raw;
    raw.class_count = C;
    raw.preds.resize(static_cast<std::size_t>(S) * S);
    for (int i = 0; i < S; ++i)
      for (int j = 0; j < S; ++j) {
        const int cell = i * S + j;
        Prediction& p = raw.preds[cell];
        p.box.cx = (j + nn::sigmoid(logits(0, cell))) / S;
        p.box.cy = (i + nn::sigmoid(logits(1, cell))) / S;
        p.box.w = std::max(1e-6, nn::sigmoid(logits(2, cell)));
        p.box.h = std::max(1e-6, nn::sigmoid(logits(3, cell)));
        p.obj = nn::sigmoid(logits(4, cell));
        p.cls.resize(C);
        double mx = logits(5, cell);
        for (int c = 1; c < C; ++c) mx = std::max(mx, logits(5 + c, cell));
        double z = 0;
        for (int c = 0; c < C; ++c) z += (p.cls[c] = std::exp(logits(5 + c, cell) - mx));
        for (int c = 0; c < C; ++c) p.cls[c] /= z;
      }
    return raw;
  }

  // d(loss)/d(logits) from d(loss)/d(obj, cls); box outputs receive no gradient.
  nn::Mat score_grad_to_logits(const RawDetections& raw, const RawGrad& g) const {
    const int C = cfg_.class_count;
    nn::Mat d = nn::Mat::Zero(5 + C, static_cast<Eigen::Index>(raw.preds.size()));
    for (std::size_t cell = 0; cell < raw.preds.size(); ++cell) {
      const Prediction& p = raw.preds[cell];
      d(4, cell) = g.obj[cell] * p.obj * (1 - p.obj);
      double dot = 0;
      for (int c = 0; c < C; ++c) dot += p.cls[c] * g.cls[cell][c];
      for (int c = 0; c < C; ++c) d(5 + c, cell) = p.cls[c] * (g.cls[cell][c] - dot);
    }
    return d;
  }

  // Backpropagates logit gradients. Weight gradients are accumulated into `grads`
  // when given; the input-image gradient is computed only when `want_input`.
  Raster backward(const Pass& pass, const nn::Mat& dlogits, DetectorGrads* grads, bool want_input) const {
    nn::Mat g = dlogits;
    for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
      const bool need_in = want_input || l > 0;
      nn::FeatureMap din = layers_[l].backward(pass.caches[l], g, grads ? &grads->dw[l] : nullptr,
                                               grads ? &grads->db[l] : nullptr, need_in);
      if (!need_in) return {};
      g = std::move(din.data);
      if (l + 1 == static_cast<int>(layers_.size()) && !cfg_.spp.empty())
        g = nn::spp_backward(g, layers_[l - 1].shape.out_channels, pass.spp);
    }
    nn::FeatureMap gp{pass.pooled.channels, pass.pooled.height, pass.pooled.width, std::move(g)};
    return nn::avg_pool_image_backward(gp, cfg_.pool, cfg_.input_size, cfg_.input_size);
  }

  RawDetections detect_raw(const Image& x) const override { return run(x).raw; }

  class Trace : public DifferentiableForward {
   public:
    Trace(const ToyDetector& det, Pass pass) : det_(det), pass_(std::move(pass)) {}
    const RawDetections& raw() const override { return pass_.raw; }
    Raster backward(const RawGrad& grad) const override {
      return det_.backward(pass_, det_.score_grad_to_logits(pass_.raw, grad), nullptr, true);
    }

   private:
    const ToyDetector& det_;
    Pass pass_;
  };

  std::unique_ptr<DifferentiableForward> forward(const Image& x) const override {
    return std::make_unique<Trace>(*this, run(x));
  }

  // Training loss for one labeled image; accumulates weight gradients scaled by `scale`.
  double train_loss(const Raster& x, const std::vector<BoundingBox>& boxes, const DetectorTrainConfig& tc,
                    DetectorGrads& grads, double scale) const {
    const int S = grid(), C = cfg_.class_count;
    Pass pass = run(x);
    struct Target {
      bool pos = false;
      double tx, ty, w, h;
      int cls;
    };
    std::vector<Target> targets(static_cast<std::size_t>(S) * S);
    for (const auto& b : boxes) {
      const int j = std::clamp(static_cast<int>(b.cx * S), 0, S - 1);
      const int i = std::clamp(static_cast<int>(b.cy * S), 0, S - 1);
      Target& t = targets[i * S + j];
      if (t.pos) continue;
      t = {true, b.cx * S - j, b.cy * S - i, b.w, b.h, b.class_id};
    }
    nn::Mat d = nn::Mat::Zero(5 + C, S * S);
    double loss = 0;
    auto i_of = [S](int cell) { return cell / S; };
    auto j_of = [S](int cell) { return cell % S; };
    for (int cell = 0; cell < S * S; ++cell) {
      const Target& t = targets[cell];
      const Prediction& p = pass.raw.preds[cell];
      // Positive objectness target is the IoU of the predicted box with its ground truth
      // (treated as a constant), so confidences track localization quality.
      double y = 0.0;
      if (t.pos)
        y = tc.iou_obj_target ? std::max(0.0, iou(p.box, BoundingBox{(j_of(cell) + t.tx) / S, (i_of(cell) + t.ty) / S, t.w, t.h}))
                              : 1.0;
      const double wobj = t.pos ? 1.0 : tc.noobj_weight;
      const double o = std::clamp(p.obj, 1e-12, 1 - 1e-12);
      loss += -wobj * (y * std::log(o) + (1 - y) * std::log(1 - o));
      d(4, cell) = wobj * (p.obj - y);
      if (!t.pos) continue;
      const double pred[4] = {nn::sigmoid(pass.logits(0, cell)), nn::sigmoid(pass.logits(1, cell)),
                              nn::sigmoid(pass.logits(2, cell)), nn::sigmoid(pass.logits(3, cell))};
      const double tgt[4] = {t.tx, t.ty, t.w, t.h};
      for (int k = 0; k < 4; ++k) {
        const double diff = pred[k] - tgt[k];
        loss += tc.box_weight * diff * diff;
        d(k, cell) = tc.box_weight * 2 * diff * pred[k] * (1 - pred[k]);
      }
      loss += -std::log(std::max(p.cls[t.cls], 1e-12));
      for (int c = 0; c < C; ++c) d(5 + c, cell) = p.cls[c] - (c == t.cls ? 1.0 : 0.0);
    }
    d *= scale;
    backward(pass, d, &grads, false);
    return loss;
  }

 private:
  ToyDetectorConfig cfg_;
  std::vector<nn::Conv> layers_;
};

struct DetectorTrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Raster augment(const LabeledImage& li, bool flip, double gain, std::vector<BoundingBox>& boxes) {
  Image img = li.image();
  boxes = li.boxes;
  if (flip) {
    Raster f(img.height(), img.width(), 3);
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        for (int c = 0; c < 3; ++c) f.at(y, x, c) = img.at(y, img.width() - 1 - x, c);
    for (auto& b : boxes) b.cx = 1.0 - b.cx;
    static_cast<Raster&>(img) = std::move(f);
  }
  if (gain != 1.0) {
    for (double& v : img.data()) v *= gain;
    img.clamp01();
  }
  return img;
}

// Mean-over-set mAP@0.5 of a detector on labeled images.
inline double evaluate_map50(const DetectorAdapter& det, const std::vector<LabeledImage>& set) {
  std::vector<ImageEval> evals(set.size());
  parallel_for(static_cast<int>(set.size()), [&](int i) {
    evals[i] = {set[i].boxes, det.detect(set[i].image())};
  });
  if (gt_classes(evals).empty()) return 0.0;
  return map_at(evals, 0.5);
}

// Adam on the detection loss (objectness BCE, box MSE on sigmoid outputs, class CE).
inline ToyDetector train_toy_detector(const std::vector<LabeledImage>& dataset, const ToyDetectorConfig& cfg,
                                      const DetectorTrainConfig& tc,
                                      const std::vector<LabeledImage>* val = nullptr) {
  if (dataset.empty()) throw std::invalid_argument("train_toy_detector: empty dataset");
  ToyDetector det(cfg);
  for (const auto& li : dataset)
    if (li.height != cfg.input_size || li.width != cfg.input_size)
      throw std::invalid_argument("train_toy_detector: image " + li.id + " does not match input size");
  nn::Adam adam(tc.lr);
  Rng rng = make_rng({tc.seed, 0x7a1cu});
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    // Cosine decay keeps the last epochs stable.
    adam.set_lr(tc.lr * (0.05 + 0.95 * 0.5 * (1 + std::cos(M_PI * epoch / std::max(1, tc.epochs)))));
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const int n = static_cast<int>(std::min<std::size_t>(tc.batch_size, order.size() - start));
      std::vector<DetectorGrads> slot(n, det.zero_grads());
      std::vector<double> losses(n, 0.0);
      std::vector<std::uint64_t> aug_seeds(n);
      for (int k = 0; k < n; ++k) aug_seeds[k] = rng();
      parallel_for(n, [&](int k) {
        Rng arng(aug_seeds[k]);
        const bool flip = tc.flip && uniform(arng, 0, 1) < 0.5;
        const double gain = tc.brightness ? uniform(arng, 0.8, 1.2) : 1.0;
        std::vector<BoundingBox> boxes;
        const Raster x = augment(dataset[order[start + k]], flip, gain, boxes);
        losses[k] = det.train_loss(x, boxes, tc, slot[k], 1.0 / n);
      });
      DetectorGrads total = det.zero_grads();
      double batch_loss = 0;
      for (int k = 0; k < n; ++k) {
        total.add(slot[k]);
        batch_loss += losses[k];
      }
      if (!std::isfinite(batch_loss))
        throw DetectorTrainingDiverged("toy detector training diverged (loss not finite) at epoch " +
                                       std::to_string(epoch) + ", batch offset " + std::to_string(start) +
                                       ", seed " + std::to_string(tc.seed) + ", lr " + std::to_string(adam.lr()));
      epoch_loss += batch_loss;
      std::vector<double*> params;
      std::vector<const double*> grads;
      std::vector<std::size_t> sizes;
      for (std::size_t l = 0; l < det.layers().size(); ++l) {
        auto& layer = det.layers()[l];
        params.push_back(layer.weight.data());
        grads.push_back(total.dw[l].data());
        sizes.push_back(layer.weight.size());
        params.push_back(layer.bias.data());
        grads.push_back(total.db[l].data());
        sizes.push_back(layer.bias.size());
      }
      adam.step(params, grads, sizes);
    }
    if (tc.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "[detector " << cfg.name << "] epoch " << epoch + 1 << "/" << tc.epochs << " loss "
                << epoch_loss / dataset.size();
      if (val && (epoch + 1) % 5 == 0) std::cerr << " val mAP@0.5 " << evaluate_map50(det, *val);
      std::cerr << " (" << secs << " s)\n";
    }
  }
  return det;
}

// Versioned checkpoint: magic, format version, JSON config header, raw parameters.
inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'V', 'P', 'D', 'E', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_detector(const ToyDetector& det, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  const std::string header = to_json(det.config()).dump();
  const auto params = det.flat_parameters();
  const std::uint32_t hlen = static_cast<std::uint32_t>(header.size());
  const std::uint64_t n = params.size();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&kCheckpointVersion), sizeof kCheckpointVersion);
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(header.data(), hlen);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(params.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

inline ToyDetector load_detector(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t version = 0, hlen = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw std::runtime_error(path + ": not a detector checkpoint");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  std::string header(hlen, '\0');
  in.read(header.data(), hlen);
  ToyDetector det(toy_config_from_json(nlohmann::json::parse(header)));
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (n != det.parameter_count()) throw std::runtime_error(path + ": parameter count does not match config");
  std::vector<double> params(n);
  in.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error(path + ": truncated checkpoint");
  det.set_flat_parameters(params);
  return det;
}

}  // namespace advpatch
