#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "advpatch/core.hpp"

namespace advpatch {

inline constexpr double kMatchIou = 0.5;
// Guards threshold comparisons against last-ulp noise in IoU arithmetic.
inline constexpr double kIouSlack = 1e-12;

// Complete IoU: IoU - rho^2/c^2 - alpha v.
inline double ciou(const BoundingBox& a, const BoundingBox& b) {
  const Corners ca = box_center_to_corners(a), cb = box_center_to_corners(b);
  const double i = iou(ca, cb);
  const double ax = (ca.x1 + ca.x2) / 2, ay = (ca.y1 + ca.y2) / 2;
  const double bx = (cb.x1 + cb.x2) / 2, by = (cb.y1 + cb.y2) / 2;
  const double rho2 = (ax - bx) * (ax - bx) + (ay - by) * (ay - by);
  const double ex = std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1);
  const double ey = std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1);
  const double c2 = ex * ex + ey * ey;
  const double wa = ca.x2 - ca.x1, ha = ca.y2 - ca.y1, wb = cb.x2 - cb.x1, hb = cb.y2 - cb.y1;
  const double dv = std::atan(wa / ha) - std::atan(wb / hb);
  const double v = 4.0 / (std::numbers::pi * std::numbers::pi) * dv * dv;
  const double denom = (1.0 - i) + v;
  const double alpha = denom > 0 ? v / denom : 0.0;
  return i - (c2 > 0 ? rho2 / c2 : 0.0) - alpha * v;
}

struct EvalCase {
  std::vector<BoundingBox> gt;
  Detections det_adv;
  AttackType attack = AttackType::Hiding;
  std::optional<int> target;
  std::optional<Corners> rm;  // Creating only

  int object_count() const { return static_cast<int>(gt.size()); }
};

namespace detail {

inline std::vector<std::size_t> by_confidence(const Detections& d) {
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return d[a].confidence > d[b].confidence; });
  return order;
}

}  // namespace detail

// Greedy one-to-one matching, highest confidence first: each detection takes the
// unmatched same-class gt with the highest IoU >= threshold. Returns, per gt, the
// matched detection index or -1. `class_filter` restricts both sides to one class.
inline std::vector<int> greedy_match(const std::vector<BoundingBox>& gt, const Detections& dets,
                                     double threshold = kMatchIou,
                                     std::optional<int> class_filter = std::nullopt) {
  std::vector<int> match(gt.size(), -1);
  for (std::size_t di : detail::by_confidence(dets)) {
    const Detection& d = dets[di];
    if (class_filter && d.box.class_id != *class_filter) continue;
    double best = threshold - kIouSlack;
    int best_g = -1;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (match[g] >= 0 || gt[g].class_id != d.box.class_id) continue;
      const double v = iou(gt[g], d.box);
      if (v >= best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) match[best_g] = static_cast<int>(di);
  }
  return match;
}

inline void require_attack(const EvalCase& c, AttackType t, const char* who) {
  if (c.attack != t) throw std::invalid_argument(std::string(who) + ": wrong attack type");
}

// Per gt object: still detected with the correct class at IoU >= 0.5.
inline std::vector<bool> detected_objects(const EvalCase& c) {
  const auto match = greedy_match(c.gt, c.det_adv);
  std::vector<bool> out(match.size());
  for (std::size_t i = 0; i < match.size(); ++i) out[i] = match[i] >= 0;
  return out;
}

// 1 - TP / N_O.
inline double cm_hiding(const EvalCase& c) {
  require_attack(c, AttackType::Hiding, "cm_hiding");
  if (c.gt.empty()) throw std::invalid_argument("cm_hiding: case has no objects");
  const auto det = detected_objects(c);
  const double tp = static_cast<double>(std::count(det.begin(), det.end(), true));
  return 1.0 - tp / c.object_count();
}

// Target-class detections left unmatched by class-t ground truth.
inline std::vector<std::size_t> created_detections(const EvalCase& c) {
  const int t = c.target.value();
  std::vector<BoundingBox> gt_t;
  for (const auto& g : c.gt)
    if (g.class_id == t) gt_t.push_back(g);
  const auto match = greedy_match(gt_t, c.det_adv, kMatchIou, t);
  std::set<int> matched(match.begin(), match.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < c.det_adv.size(); ++i)
    if (c.det_adv[i].box.class_id == t && !matched.count(static_cast<int>(i))) out.push_back(i);
  return out;
}

// min(FP_t / N_O, 1).
inline double cm_creating(const EvalCase& c) {
  require_attack(c, AttackType::Creating, "cm_creating");
  if (!c.target) throw std::invalid_argument("cm_creating: target class required");
  const double fp = static_cast<double>(created_detections(c).size());
  return std::min(fp / std::max(1, c.object_count()), 1.0);
}

// At least one created target-class detection centered inside rm.
inline bool creating_success(const EvalCase& c) {
  if (!c.rm) return false;
  for (std::size_t i : created_detections(c)) {
    const BoundingBox& b = c.det_adv[i].box;
    if (b.cx >= c.rm->x1 && b.cx <= c.rm->x2 && b.cy >= c.rm->y1 && b.cy <= c.rm->y2) return true;
  }
  return false;
}

// Per gt object: original class lost AND a target-class detection overlaps it at
// IoU >= 0.5. Returns the overlapping target detection index or -1.
inline std::vector<int> altered_objects(const EvalCase& c) {
  const int t = c.target.value();
  const auto det = detected_objects(c);
  std::vector<int> out(c.gt.size(), -1);
  for (std::size_t g = 0; g < c.gt.size(); ++g) {
    if (det[g]) continue;
    double best = kMatchIou - kIouSlack;
    for (std::size_t i = 0; i < c.det_adv.size(); ++i) {
      if (c.det_adv[i].box.class_id != t) continue;
      const double v = iou(c.gt[g], c.det_adv[i].box);
      if (v >= best) {
        best = v;
        out[g] = static_cast<int>(i);
      }
    }
  }
  return out;
}

inline double cm_altering(const EvalCase& c) {
  require_attack(c, AttackType::Altering, "cm_altering");
  if (!c.target) throw std::invalid_argument("cm_altering: target class required");
  if (c.gt.empty()) throw std::invalid_argument("cm_altering: case has no objects");
  const auto alt = altered_objects(c);
  const double s = static_cast<double>(std::count_if(alt.begin(), alt.end(), [](int v) { return v >= 0; }));
  return s / c.object_count();
}

inline double cm(const EvalCase& c) {
  switch (c.attack) {
    case AttackType::Hiding: return cm_hiding(c);
    case AttackType::Creating: return cm_creating(c);
    case AttackType::Altering: return cm_altering(c);
  }
  return 0.0;
}

inline double clamped_ciou(const BoundingBox& a, const BoundingBox& b) {
  return std::clamp(ciou(a, b), 0.0, 1.0);
}

inline double ciou_metric(const EvalCase& c) {
  switch (c.attack) {
    case AttackType::Hiding: {
      if (c.gt.empty()) return 0.0;
      double sum = 0;
      for (const auto& g : c.gt) {
        double best = 0.0;
        for (const auto& d : c.det_adv) best = std::max(best, clamped_ciou(g, d.box));
        sum += 1.0 - best;
      }
      return sum / c.object_count();
    }
    case AttackType::Creating: {
      if (!c.rm) throw std::invalid_argument("ciou_metric: Creating case needs rm");
      const BoundingBox rm = corners_to_center(*c.rm);
      double best = 0.0;
      for (std::size_t i : created_detections(c)) best = std::max(best, clamped_ciou(rm, c.det_adv[i].box));
      return best;
    }
    case AttackType::Altering: {
      const auto alt = altered_objects(c);
      double sum = 0;
      int n = 0;
      for (std::size_t g = 0; g < alt.size(); ++g) {
        if (alt[g] < 0) continue;
        sum += clamped_ciou(c.gt[g], c.det_adv[alt[g]].box);
        ++n;
      }
      return n ? sum / n : 0.0;
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------

struct ImageEval {
  std::vector<BoundingBox> gt;
  Detections dets;
};

struct MapMar {
  double map = 0;
  double mar = 0;
};

inline constexpr int kMaxDetsPerImage = 100;

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

struct ApAr {
  double ap = 0;
  double recall = 0;
};

// AP (101-point interpolated) and max recall for one class at one IoU threshold.
inline ApAr average_precision(const std::vector<ImageEval>& images, int cls, double threshold) {
  struct Scored {
    double conf;
    std::size_t image, det;
  };
  std::vector<Scored> all;
  int n_gt = 0;
  std::vector<std::vector<int>> gt_matched(images.size());
  for (std::size_t im = 0; im < images.size(); ++im) {
    for (const auto& g : images[im].gt) n_gt += g.class_id == cls;
    gt_matched[im].assign(images[im].gt.size(), 0);
    const auto order = detail::by_confidence(images[im].dets);
    const std::size_t keep = std::min<std::size_t>(order.size(), kMaxDetsPerImage);
    for (std::size_t r = 0; r < keep; ++r)
      if (images[im].dets[order[r]].box.class_id == cls)
        all.push_back({images[im].dets[order[r]].confidence, im, order[r]});
  }
  if (n_gt == 0) return {};
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.conf > b.conf; });

  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const Scored& s : all) {
    const auto& im = images[s.image];
    double best = threshold - kIouSlack;
    int best_g = -1;
    for (std::size_t g = 0; g < im.gt.size(); ++g) {
      if (im.gt[g].class_id != cls || gt_matched[s.image][g]) continue;
      const double v = iou(im.gt[g], im.dets[s.det].box);
      if (v >= best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0) {
      gt_matched[s.image][best_g] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / n_gt);
  }
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);

  double ap = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r - kIouSlack);
    if (it != recall.end()) ap += precision[it - recall.begin()];
  }
  return {ap / 101.0, recall.empty() ? 0.0 : recall.back()};
}

inline std::set<int> gt_classes(const std::vector<ImageEval>& images) {
  std::set<int> classes;
  for (const auto& im : images)
    for (const auto& g : im.gt) classes.insert(g.class_id);
  return classes;
}

// COCO-style mAP / mAR over IoU 0.50:0.05:0.95 and every class that has ground truth.
inline MapMar map_mar(const std::vector<ImageEval>& images,
                      const std::vector<double>& thresholds = coco_iou_thresholds()) {
  const auto classes = gt_classes(images);
  if (classes.empty()) throw std::invalid_argument("map_mar: no ground truth");
  MapMar out;
  int n = 0;
  for (int c : classes)
    for (double t : thresholds) {
      const ApAr a = average_precision(images, c, t);
      out.map += a.ap;
      out.mar += a.recall;
      ++n;
    }
  out.map /= n;
  out.mar /= n;
  return out;
}

inline double map_at(const std::vector<ImageEval>& images, double threshold) {
  return map_mar(images, {threshold}).map;
}

// ---------------------------------------------------------------------------
// Report assembly.

enum class RowKind { NoAttack, Noise, Patch };

inline std::string to_string(RowKind k) {
  switch (k) {
    case RowKind::NoAttack: return "no_attack";
    case RowKind::Noise: return "noise";
    case RowKind::Patch: return "patch";
  }
  return "?";
}

struct EvalRun {
  std::string dataset = "synthetic";
  std::string model = "toy";
  std::string label;  // e.g. "Gray Patch", "Random Patch", "Noise", "No Attack"
  RowKind kind = RowKind::Patch;
  AttackType attack = AttackType::Hiding;
  std::vector<EvalCase> cases;    // for CM / CIoU
  std::vector<ImageEval> images;  // for mAP / mAR
};

struct ReportRow {
  std::string dataset, model, label;
  RowKind kind = RowKind::Patch;
  AttackType attack = AttackType::Hiding;
  double map = 0, mar = 0;
  std::optional<double> cm, ciou;
  std::optional<double> success_rate;  // Creating: images with a created box inside rm
  std::map<int, double> per_class_cm;
  int cases = 0;
};

struct Report {
  std::vector<ReportRow> rows;
  std::vector<std::string> gaps;

  const ReportRow* find(const std::string& label, AttackType attack) const {
    for (const auto& r : rows)
      if (r.label == label && r.attack == attack) return &r;
    return nullptr;
  }
};

// Hiding: keyed by the object's class. Creating/Altering: keyed by target class.
inline std::map<int, double> per_class_cm(const std::vector<EvalCase>& cases) {
  std::map<int, std::pair<double, int>> acc;
  for (const auto& c : cases) {
    if (c.attack == AttackType::Hiding) {
      const auto det = detected_objects(c);
      for (std::size_t g = 0; g < c.gt.size(); ++g) {
        auto& a = acc[c.gt[g].class_id];
        a.first += det[g] ? 0.0 : 1.0;
        a.second += 1;
      }
    } else if (c.target && (c.attack == AttackType::Creating || !c.gt.empty())) {
      auto& a = acc[*c.target];
      a.first += cm(c);
      a.second += 1;
    }
  }
  std::map<int, double> out;
  for (const auto& [k, v] : acc) out[k] = v.first / v.second;
  return out;
}

inline ReportRow evaluate_run(const EvalRun& run) {
  ReportRow row;
  row.dataset = run.dataset;
  row.model = run.model;
  row.label = run.label;
  row.kind = run.kind;
  row.attack = run.attack;
  row.cases = static_cast<int>(run.cases.size());
  if (!gt_classes(run.images).empty()) {
    const MapMar m = map_mar(run.images);
    row.map = m.map;
    row.mar = m.mar;
  }
  if (run.kind != RowKind::NoAttack && !run.cases.empty()) {
    double cm_sum = 0, ciou_sum = 0;
    int n = 0, succ = 0;
    for (const auto& c : run.cases) {
      if (c.attack != AttackType::Creating && c.gt.empty()) continue;
      cm_sum += cm(c);
      ciou_sum += ciou_metric(c);
      succ += c.attack == AttackType::Creating && creating_success(c);
      ++n;
    }
    if (n) {
      row.cm = cm_sum / n;
      row.ciou = ciou_sum / n;
      if (run.attack == AttackType::Creating) row.success_rate = static_cast<double>(succ) / n;
    }
    row.per_class_cm = per_class_cm(run.cases);
  }
  return row;
}

// Records a gap for every patch row that has no noise row to compare against.
inline void compute_gaps(Report& r) {
  r.gaps.clear();
  for (const auto& row : r.rows) {
    if (row.kind != RowKind::Patch) continue;
    const bool has_noise = std::any_of(r.rows.begin(), r.rows.end(), [&](const ReportRow& o) {
      return o.kind == RowKind::Noise && o.dataset == row.dataset && o.model == row.model &&
             o.attack == row.attack;
    });
    if (!has_noise) {
      const std::string gap = "missing noise baseline for " + row.dataset + "/" + row.model + "/" +
                              to_string(row.attack);
      if (std::find(r.gaps.begin(), r.gaps.end(), gap) == r.gaps.end()) r.gaps.push_back(gap);
    }
  }
}

inline Report assemble_report(const std::vector<EvalRun>& runs) {
  Report r;
  for (const auto& run : runs) r.rows.push_back(evaluate_run(run));
  compute_gaps(r);
  return r;
}

inline Report merge_reports(const std::vector<Report>& parts) {
  Report r;
  for (const auto& p : parts) r.rows.insert(r.rows.end(), p.rows.begin(), p.rows.end());
  compute_gaps(r);
  return r;
}

inline nlohmann::json to_json(const ReportRow& row) {
  nlohmann::json j{{"dataset", row.dataset}, {"model", row.model},   {"label", row.label},
                   {"kind", to_string(row.kind)}, {"attack", to_string(row.attack)},
                   {"mAP", row.map}, {"mAR", row.mar}, {"cases", row.cases}};
  j["CM"] = row.cm ? nlohmann::json(*row.cm) : nlohmann::json(nullptr);
  j["CIoU"] = row.ciou ? nlohmann::json(*row.ciou) : nlohmann::json(nullptr);
  if (row.success_rate) j["success_rate"] = *row.success_rate;
  nlohmann::json pc = nlohmann::json::object();
  for (const auto& [k, v] : row.per_class_cm) pc[std::to_string(k)] = v;
  j["per_class_CM"] = pc;
  return j;
}

inline nlohmann::json to_json(const Report& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back(to_json(row));
  return {{"rows", rows}, {"gaps", r.gaps}};
}

inline Report report_from_json(const nlohmann::json& j) {
  Report r;
  for (const auto& jr : j.at("rows")) {
    ReportRow row;
    row.dataset = jr.at("dataset");
    row.model = jr.at("model");
    row.label = jr.at("label");
    const std::string kind = jr.at("kind");
    row.kind = kind == "no_attack" ? RowKind::NoAttack : kind == "noise" ? RowKind::Noise : RowKind::Patch;
    row.attack = parse_attack_type(jr.at("attack").get<std::string>());
    row.map = jr.at("mAP");
    row.mar = jr.at("mAR");
    row.cases = jr.value("cases", 0);
    if (!jr.at("CM").is_null()) row.cm = jr.at("CM").get<double>();
    if (!jr.at("CIoU").is_null()) row.ciou = jr.at("CIoU").get<double>();
    if (jr.contains("success_rate")) row.success_rate = jr.at("success_rate").get<double>();
    for (const auto& [k, v] : jr.at("per_class_CM").items()) row.per_class_cm[std::stoi(k)] = v.get<double>();
    r.rows.push_back(row);
  }
  for (const auto& g : j.value("gaps", nlohmann::json::array())) r.gaps.push_back(g);
  return r;
}

// Aligned table: one line per (dataset, model, label); column groups per attack type.
inline std::string to_table(const Report& r) {
  struct Key {
    std::string dataset, model, label;
    bool operator<(const Key& o) const {
      return std::tie(dataset, model, label) < std::tie(o.dataset, o.model, o.label);
    }
  };
  std::vector<Key> order;
  std::map<Key, std::map<AttackType, const ReportRow*>> cells;
  for (const auto& row : r.rows) {
    Key k{row.dataset, row.model, row.label};
    if (!cells.count(k)) order.push_back(k);
    cells[k][row.attack] = &row;
  }
  auto num = [](std::optional<double> v) {
    if (!v) return std::string("-");
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << *v;
    return os.str();
  };
  std::ostringstream os;
  os << std::left << std::setw(11) << "Dataset" << std::setw(14) << "Model" << std::setw(22) << "Attack";
  for (const char* g : {"Hiding", "Creating", "Altering"})
    os << "| " << std::setw(31) << (std::string(g) + " mAP/mAR/CM/CIoU");
  os << "\n" << std::string(47 + 3 * 33, '-') << "\n";
  for (const auto& k : order) {
    os << std::left << std::setw(11) << k.dataset << std::setw(14) << k.model << std::setw(22) << k.label;
    for (AttackType t : {AttackType::Hiding, AttackType::Creating, AttackType::Altering}) {
      std::ostringstream cell;
      const auto it = cells[k].find(t);
      if (it == cells[k].end()) {
        cell << "-      -      -      -";
      } else {
        const ReportRow& row = *it->second;
        cell << num(row.map) << "  " << num(row.mar) << "  " << num(row.cm) << "  " << num(row.ciou);
      }
      os << "| " << std::setw(31) << cell.str();
    }
    os << "\n";
  }
  for (const auto& g : r.gaps) os << "gap: " << g << "\n";
  return os.str();
}

// dataset,model,label,attack,class,CM
inline std::string per_class_csv(const Report& r) {
  std::ostringstream os;
  os << "dataset,model,label,attack,class,CM\n";
  for (const auto& row : r.rows)
    for (const auto& [k, v] : row.per_class_cm)
      os << row.dataset << "," << row.model << "," << row.label << "," << to_string(row.attack) << "," << k
         << "," << std::setprecision(10) << v << "\n";
  return os.str();
}

inline std::string to_csv(const Report& r) {
  std::ostringstream os;
  os << "dataset,model,label,kind,attack,mAP,mAR,CM,CIoU\n";
  os << std::setprecision(10);
  for (const auto& row : r.rows) {
    os << row.dataset << "," << row.model << "," << row.label << "," << to_string(row.kind) << ","
       << to_string(row.attack) << "," << row.map << "," << row.mar << ",";
    if (row.cm) os << *row.cm;
    os << ",";
    if (row.ciou) os << *row.ciou;
    os << "\n";
  }
  return os.str();
}

}  // namespace advpatch
