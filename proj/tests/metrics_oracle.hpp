#pragma once

// Slow reference implementations of the detection metrics, written directly from
// center-format boxes without reusing library helpers.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <vector>

#include "advpatch/metrics.hpp"

namespace oracle {

using advpatch::BoundingBox;
using advpatch::Detections;

inline double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2));
  const double iy = std::max(0.0, std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline double box_ciou(const BoundingBox& a, const BoundingBox& b) {
  const double i = box_iou(a, b);
  const double rho2 = std::pow(a.cx - b.cx, 2) + std::pow(a.cy - b.cy, 2);
  const double cw = std::max(a.cx + a.w / 2, b.cx + b.w / 2) - std::min(a.cx - a.w / 2, b.cx - b.w / 2);
  const double ch = std::max(a.cy + a.h / 2, b.cy + b.h / 2) - std::min(a.cy - a.h / 2, b.cy - b.h / 2);
  const double v = 4 / std::pow(std::numbers::pi, 2) * std::pow(std::atan(a.w / a.h) - std::atan(b.w / b.h), 2);
  const double alpha = v == 0 ? 0.0 : v / ((1 - i) + v);
  return i - rho2 / (cw * cw + ch * ch) - alpha * v;
}

// Detection indices by descending confidence, ties broken by index.
inline std::vector<int> ranked(const Detections& d) {
  std::vector<int> idx;
  for (int i = 0; i < static_cast<int>(d.size()); ++i) idx.push_back(i);
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b)
      if (d[idx[b]].confidence > d[idx[a]].confidence ||
          (d[idx[b]].confidence == d[idx[a]].confidence && idx[b] < idx[a]))
        std::swap(idx[a], idx[b]);
  return idx;
}

// owner[g] = detection index claiming gt g, or -1.
inline std::vector<int> greedy(const std::vector<BoundingBox>& gt, const Detections& d, double thr,
                               int only_class = -1) {
  std::vector<int> owner(gt.size(), -1);
  for (int k : ranked(d)) {
    if (only_class >= 0 && d[k].box.class_id != only_class) continue;
    int pick = -1;
    double pick_iou = -1;
    for (int g = 0; g < static_cast<int>(gt.size()); ++g) {
      if (owner[g] != -1 || gt[g].class_id != d[k].box.class_id) continue;
      const double v = box_iou(gt[g], d[k].box);
      if (v + 1e-12 >= thr && v > pick_iou) {
        pick = g;
        pick_iou = v;
      }
    }
    if (pick != -1) owner[pick] = k;
  }
  return owner;
}

inline int hidden_count(const std::vector<BoundingBox>& gt, const Detections& d) {
  const auto o = greedy(gt, d, 0.5);
  return static_cast<int>(std::count(o.begin(), o.end(), -1));
}

inline int created_count(const std::vector<BoundingBox>& gt, const Detections& d, int t) {
  std::vector<BoundingBox> gt_t;
  for (const auto& g : gt)
    if (g.class_id == t) gt_t.push_back(g);
  const auto o = greedy(gt_t, d, 0.5, t);
  int n = 0;
  for (int k = 0; k < static_cast<int>(d.size()); ++k)
    if (d[k].box.class_id == t && std::find(o.begin(), o.end(), k) == o.end()) ++n;
  return n;
}

inline int altered_count(const std::vector<BoundingBox>& gt, const Detections& d, int t) {
  const auto o = greedy(gt, d, 0.5);
  int n = 0;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    if (o[g] != -1) continue;
    bool hit = false;
    for (const auto& det : d) hit = hit || (det.box.class_id == t && box_iou(gt[g], det.box) + 1e-12 >= 0.5);
    n += hit;
  }
  return n;
}

// 101-point interpolated AP: precision envelope evaluated by brute-force max.
inline double ap(const std::vector<advpatch::ImageEval>& images, int cls, double thr) {
  struct Hit {
    double conf;
    int image, det;
  };
  std::vector<Hit> hits;
  int n_gt = 0;
  for (int im = 0; im < static_cast<int>(images.size()); ++im) {
    for (const auto& g : images[im].gt) n_gt += g.class_id == cls;
    const auto r = ranked(images[im].dets);
    for (int k = 0; k < std::min<int>(static_cast<int>(r.size()), 100); ++k)
      if (images[im].dets[r[k]].box.class_id == cls) hits.push_back({images[im].dets[r[k]].confidence, im, r[k]});
  }
  if (n_gt == 0) return 0.0;
  std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return a.conf > b.conf; });
  std::vector<std::set<int>> used(images.size());
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto& im = images[hits[i].image];
    int pick = -1;
    double pick_iou = -1;
    for (int g = 0; g < static_cast<int>(im.gt.size()); ++g) {
      if (im.gt[g].class_id != cls || used[hits[i].image].count(g)) continue;
      const double v = box_iou(im.gt[g], im.dets[hits[i].det].box);
      if (v + 1e-12 >= thr && v > pick_iou) {
        pick = g;
        pick_iou = v;
      }
    }
    if (pick != -1) {
      used[hits[i].image].insert(pick);
      ++tp;
    }
    prec.push_back(static_cast<double>(tp) / (i + 1));
    rec.push_back(static_cast<double>(tp) / n_gt);
  }
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    double best = 0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] + 1e-12 >= k / 100.0) best = std::max(best, prec[i]);
    sum += best;
  }
  return sum / 101;
}

inline double map_coco(const std::vector<advpatch::ImageEval>& images) {
  std::set<int> classes;
  for (const auto& im : images)
    for (const auto& g : im.gt) classes.insert(g.class_id);
  double s = 0;
  int n = 0;
  for (int c : classes)
    for (int t = 50; t <= 95; t += 5) {
      s += ap(images, c, t / 100.0);
      ++n;
    }
  return n ? s / n : 0.0;
}

}  // namespace oracle
