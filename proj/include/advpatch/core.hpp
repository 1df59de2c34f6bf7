#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace advpatch {

// Interleaved (HWC) raster of doubles. Images and patches are both rasters;
// the [0,1] range is enforced by the code paths that produce them.
class Raster {
 public:
  Raster() = default;
  Raster(int height, int width, int channels, double fill = 0.0)
      : height_(height), width_(width), channels_(channels),
        data_(static_cast<std::size_t>(height) * width * channels, fill) {
    if (height < 0 || width < 0 || channels <= 0)
      throw std::invalid_argument("Raster: bad shape");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Raster& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

  void clamp01() {
    for (double& v : data_) v = std::clamp(v, 0.0, 1.0);
  }
  bool in_unit_range() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
  }

  friend bool operator==(const Raster& a, const Raster& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 1;
  std::vector<double> data_;
};

// RGB image with values in [0,1].
class Image : public Raster {
 public:
  static constexpr int kMinSide = 32;

  Image() = default;
  Image(int height, int width, double fill = 0.0) : Raster(height, width, 3, fill) {
    if (height < kMinSide || width < kMinSide)
      throw std::invalid_argument("Image: height and width must be >= 32");
  }
  explicit Image(Raster r) : Raster(std::move(r)) {
    if (channels() != 3) throw std::invalid_argument("Image: expected 3 channels");
    if (height() < kMinSide || width() < kMinSide)
      throw std::invalid_argument("Image: height and width must be >= 32");
  }
};

// Square s x s x 3 trainable pixel grid.
class Patch : public Raster {
 public:
  static constexpr int kMinSide = 8;

  Patch() = default;
  explicit Patch(int side, double fill = 0.5) : Raster(side, side, 3, fill) {
    if (side < kMinSide) throw std::invalid_argument("Patch: side must be >= 8");
  }
  explicit Patch(Raster r) : Raster(std::move(r)) {
    if (channels() != 3 || height() != width() || height() < kMinSide)
      throw std::invalid_argument("Patch: expected square raster with side >= 8 and 3 channels");
  }
  int side() const { return height(); }
};

inline constexpr int kNoClass = -1;

// Center-format box in normalized image coordinates.
struct BoundingBox {
  double cx = 0.5;
  double cy = 0.5;
  double w = 1.0;
  double h = 1.0;
  int class_id = kNoClass;

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Corners {
  double x1, y1, x2, y2;
};

inline double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

inline Corners box_center_to_corners(const BoundingBox& b) {
  return {clip01(b.cx - b.w / 2), clip01(b.cy - b.h / 2), clip01(b.cx + b.w / 2),
          clip01(b.cy + b.h / 2)};
}

inline BoundingBox corners_to_center(const Corners& c, int class_id = kNoClass) {
  return {(c.x1 + c.x2) / 2, (c.y1 + c.y2) / 2, c.x2 - c.x1, c.y2 - c.y1, class_id};
}

inline bool is_valid_box(const BoundingBox& b) {
  return std::isfinite(b.cx) && std::isfinite(b.cy) && b.w > 0 && b.h > 0 && b.w <= 1 &&
         b.h <= 1;
}

inline double box_area(const Corners& c) {
  return std::max(0.0, c.x2 - c.x1) * std::max(0.0, c.y2 - c.y1);
}

inline double iou(const Corners& a, const Corners& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = box_area(a) + box_area(b) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  return iou(box_center_to_corners(a), box_center_to_corners(b));
}

inline bool box_contains(const BoundingBox& b, double x, double y) {
  const Corners c = box_center_to_corners(b);
  return x >= c.x1 && x <= c.x2 && y >= c.y1 && y <= c.y2;
}

// One pre-NMS prediction. Scores are probabilities, not logits.
struct Prediction {
  BoundingBox box;
  double obj = 0.0;
  std::vector<double> cls;
};

struct RawDetections {
  int class_count = 0;
  std::vector<Prediction> preds;
};

// d(loss)/d(score) for every entry of a RawDetections, same layout.
struct RawGrad {
  std::vector<double> obj;
  std::vector<std::vector<double>> cls;

  static RawGrad zeros_like(const RawDetections& raw) {
    RawGrad g;
    g.obj.assign(raw.preds.size(), 0.0);
    g.cls.assign(raw.preds.size(), std::vector<double>(raw.class_count, 0.0));
    return g;
  }
  void add(const RawGrad& o, double scale = 1.0) {
    for (std::size_t i = 0; i < obj.size(); ++i) {
      obj[i] += scale * o.obj[i];
      for (std::size_t c = 0; c < cls[i].size(); ++c) cls[i][c] += scale * o.cls[i][c];
    }
  }
};

struct Detection {
  BoundingBox box;  // class_id set
  double confidence = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

using Detections = std::vector<Detection>;

// Annotated image kept as 8-bit RGB; datasets are stored this way on disk too.
struct LabeledImage {
  std::string id;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;  // HWC
  std::vector<BoundingBox> boxes;

  Image image() const {
    Raster r(height, width, 3);
    for (std::size_t i = 0; i < rgb.size(); ++i) r.data()[i] = rgb[i] / 255.0;
    return Image(std::move(r));
  }

  static LabeledImage from_image(std::string id, const Raster& img, std::vector<BoundingBox> boxes) {
    LabeledImage li{std::move(id), img.height(), img.width(), {}, std::move(boxes)};
    li.rgb.resize(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
      li.rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data()[i], 0.0, 1.0) * 255.0));
    return li;
  }
};

enum class AttackType { Hiding, Creating, Altering };
enum class AdvMode { ClsOnly, ObjOnly, Both };
enum class InitMode { Gray, Random, Reference };

inline std::string to_string(AttackType t) {
  switch (t) {
    case AttackType::Hiding: return "hiding";
    case AttackType::Creating: return "creating";
    case AttackType::Altering: return "altering";
  }
  return "?";
}
inline std::string to_string(AdvMode m) {
  switch (m) {
    case AdvMode::ClsOnly: return "cls_only";
    case AdvMode::ObjOnly: return "obj_only";
    case AdvMode::Both: return "both";
  }
  return "?";
}
inline std::string to_string(InitMode m) {
  switch (m) {
    case InitMode::Gray: return "gray";
    case InitMode::Random: return "random";
    case InitMode::Reference: return "reference";
  }
  return "?";
}

inline AttackType parse_attack_type(std::string_view s) {
  if (s == "hiding") return AttackType::Hiding;
  if (s == "creating") return AttackType::Creating;
  if (s == "altering") return AttackType::Altering;
  throw std::invalid_argument("unknown attack type '" + std::string(s) +
                              "' (expected hiding, creating or altering)");
}
inline AdvMode parse_adv_mode(std::string_view s) {
  if (s == "cls_only") return AdvMode::ClsOnly;
  if (s == "obj_only") return AdvMode::ObjOnly;
  if (s == "both") return AdvMode::Both;
  throw std::invalid_argument("unknown adv mode '" + std::string(s) +
                              "' (expected cls_only, obj_only or both)");
}
inline InitMode parse_init_mode(std::string_view s) {
  if (s == "gray") return InitMode::Gray;
  if (s == "random") return InitMode::Random;
  if (s == "reference") return InitMode::Reference;
  throw std::invalid_argument("unknown init mode '" + std::string(s) +
                              "' (expected gray, random or reference)");
}

// lambda_sal is kept so configs can carry it, but no saliency term exists.
struct LossWeights {
  double adv = 3.0;
  double sal = 1.0;
  double tv = 1.0;
  double nps = 1.0;
  double his = 0.0;

  static LossWeights hiding_defaults() { return {3.0, 1.0, 1.0, 1.0, 0.0}; }
  static LossWeights creating_defaults() { return {3.0, 0.0, 0.5, 1.0, 0.3}; }
  static LossWeights altering_defaults() { return creating_defaults(); }
  static LossWeights defaults_for(AttackType t) {
    return t == AttackType::Hiding ? hiding_defaults() : creating_defaults();
  }

  void validate() const {
    if (adv < 0 || sal < 0 || tv < 0 || nps < 0 || his < 0)
      throw std::invalid_argument("LossWeights: all weights must be non-negative");
  }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct AttackSpec {
  AttackType type = AttackType::Hiding;
  std::optional<int> target_class;
  AdvMode adv_mode = AdvMode::Both;
  LossWeights weights = LossWeights::hiding_defaults();
  InitMode init = InitMode::Gray;

  static AttackSpec hiding(AdvMode mode = AdvMode::Both) {
    return {AttackType::Hiding, std::nullopt, mode, LossWeights::hiding_defaults(), InitMode::Gray};
  }
  static AttackSpec creating(int t) {
    return {AttackType::Creating, t, AdvMode::Both, LossWeights::creating_defaults(),
            InitMode::Gray};
  }
  static AttackSpec altering(int t) {
    return {AttackType::Altering, t, AdvMode::Both, LossWeights::altering_defaults(),
            InitMode::Gray};
  }

  void validate(int class_count) const {
    weights.validate();
    if (type != AttackType::Hiding) {
      if (!target_class) throw std::invalid_argument("AttackSpec: target class required");
      if (*target_class < 0 || *target_class >= class_count)
        throw std::invalid_argument("AttackSpec: target class out of range");
    }
  }
};

}  // namespace advpatch
