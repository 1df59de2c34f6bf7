#pragma once

#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "advpatch/color.hpp"
#include "advpatch/core.hpp"
#include "advpatch/io.hpp"
#include "advpatch/losses.hpp"

namespace advpatch {

enum class SimilarityMethod { Corr, Inter, Bhattac, ChiS, KLD };

inline constexpr std::array<SimilarityMethod, 5> kSimilarityMethods = {
    SimilarityMethod::Corr, SimilarityMethod::Inter, SimilarityMethod::Bhattac, SimilarityMethod::ChiS,
    SimilarityMethod::KLD};
inline constexpr std::array<ColorSpace, 2> kColorSpaces = {ColorSpace::RGB, ColorSpace::HSV};

inline constexpr double kKldFloor = 1e-10;

inline std::string to_string(SimilarityMethod m) {
  switch (m) {
    case SimilarityMethod::Corr: return "Corr";
    case SimilarityMethod::Inter: return "Inter";
    case SimilarityMethod::Bhattac: return "Bhattac";
    case SimilarityMethod::ChiS: return "Chi-S";
    case SimilarityMethod::KLD: return "KLD";
  }
  return "?";
}

inline SimilarityMethod parse_similarity_method(std::string_view s) {
  for (SimilarityMethod m : kSimilarityMethods)
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown similarity method '" + std::string(s) +
                              "' (expected Corr, Inter, Bhattac, Chi-S or KLD)");
}

// Hard-binned whole-image histogram for the analysis path.
inline Histogram extract_histogram(const Raster& img, ColorSpace space, int bins = kHistBins) {
  if (img.empty() || img.height() == 0 || img.width() == 0)
    throw std::invalid_argument("extract_histogram: empty image");
  if (bins < 2) throw std::invalid_argument("extract_histogram: bins must be >= 2");
  return hard_histogram(img, space, bins, 0, 0, img.width(), img.height());
}

namespace detail {

inline double channel_corr(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ma += a[k];
    mb += b[k];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  const double den = std::sqrt(saa * sbb);
  if (den == 0) return a == b ? 1.0 : 0.0;
  return sab / den;
}

inline double channel_similarity(const std::vector<double>& a, const std::vector<double>& b, SimilarityMethod m) {
  switch (m) {
    case SimilarityMethod::Corr: return channel_corr(a, b);
    case SimilarityMethod::Inter: {
      double s = 0;
      for (std::size_t k = 0; k < a.size(); ++k) s += std::min(a[k], b[k]);
      return s;
    }
    case SimilarityMethod::Bhattac: {
      double bc = 0;
      for (std::size_t k = 0; k < a.size(); ++k) bc += std::sqrt(a[k] * b[k]);
      return std::log(std::max(bc, kKldFloor));
    }
    case SimilarityMethod::ChiS: {
      double d = 0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        const double s = a[k] + b[k];
        if (s > 0) d += (a[k] - b[k]) * (a[k] - b[k]) / (s + kHistEps);
      }
      return -d;
    }
    case SimilarityMethod::KLD: {
      double d = 0;
      for (std::size_t k = 0; k < a.size(); ++k)
        if (a[k] > 0) d += a[k] * std::log(std::max(a[k], kKldFloor) / std::max(b[k], kKldFloor));
      return -d;
    }
  }
  return 0.0;
}

}  // namespace detail

// Larger is more similar for every method; distances come back negated.
// Multi-channel histograms average the per-channel values.
inline double similarity(const Histogram& h1, const Histogram& h2, SimilarityMethod m) {
  if (h1.bins != h2.bins || h1.channel_count() != h2.channel_count() || h1.channel_count() == 0)
    throw std::invalid_argument("similarity: histograms differ in shape");
  double s = 0;
  for (int c = 0; c < h1.channel_count(); ++c) s += detail::channel_similarity(h1.channels[c], h2.channels[c], m);
  return s / h1.channel_count();
}

struct SimilarityRecord {
  std::string patch_id;
  ColorSpace space = ColorSpace::HSV;
  SimilarityMethod method = SimilarityMethod::ChiS;
  double similarity = 0;
  double success = 0;  // R_S

  void validate() const {
    if (!std::isfinite(similarity)) throw std::invalid_argument("SimilarityRecord: non-finite similarity");
  }
};

// One record per (space, method) comparing a patch with the reference crop.
inline std::vector<SimilarityRecord> similarity_records(const std::string& patch_id, const Raster& patch,
                                                        const Raster& ref_image, const BoundingBox& ref_box,
                                                        double success) {
  const PixelRect r = box_pixel_rect(ref_box, ref_image.width(), ref_image.height());
  if (r.area() < 4) throw std::invalid_argument("similarity_records: degenerate reference crop");
  std::vector<SimilarityRecord> out;
  for (ColorSpace space : kColorSpaces) {
    const Histogram hp = extract_histogram(patch, space);
    const Histogram hr = hard_histogram(ref_image, space, kHistBins, r.x0, r.y0, r.x1, r.y1);
    for (SimilarityMethod m : kSimilarityMethods) {
      SimilarityRecord rec{patch_id, space, m, similarity(hp, hr, m), success};
      rec.validate();
      out.push_back(rec);
    }
  }
  return out;
}

inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

inline constexpr std::size_t kMinCorrelationRecords = 3;

struct CorrelationCell {
  std::size_t n = 0;
  std::optional<double> r;  // empty: insufficient (too few records or zero variance)
  bool sufficient() const { return r.has_value(); }
};

using CorrelationKey = std::pair<ColorSpace, SimilarityMethod>;

inline std::map<CorrelationKey, CorrelationCell> correlate_success(const std::vector<SimilarityRecord>& records,
                                                                   std::optional<double> min_success = {}) {
  std::map<CorrelationKey, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (ColorSpace s : kColorSpaces)
    for (SimilarityMethod m : kSimilarityMethods) groups[{s, m}];
  for (const auto& rec : records) {
    if (min_success && rec.success < *min_success) continue;
    auto& g = groups[{rec.space, rec.method}];
    g.first.push_back(rec.similarity);
    g.second.push_back(rec.success);
  }
  std::map<CorrelationKey, CorrelationCell> out;
  for (const auto& [key, g] : groups) {
    CorrelationCell cell{g.first.size(), std::nullopt};
    if (cell.n >= kMinCorrelationRecords) cell.r = pearson(g.first, g.second);
    out[key] = cell;
  }
  return out;
}

// CSV: patch_id,space,method,S,R_S
inline std::string records_to_csv(const std::vector<SimilarityRecord>& records) {
  std::ostringstream os;
  os << "patch_id,space,method,S,R_S\n";
  for (const auto& r : records)
    os << r.patch_id << ',' << to_string(r.space) << ',' << to_string(r.method) << ','
       << format_double(r.similarity) << ',' << format_double(r.success) << '\n';
  return os.str();
}

inline std::vector<SimilarityRecord> records_from_csv(std::istream& in, const std::string& origin = "<csv>") {
  std::vector<SimilarityRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("patch_id,", 0) == 0)) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const std::string where = origin + ":" + std::to_string(lineno);
    if (f.size() != 5) throw ParseError(where + ": expected 5 fields");
    try {
      SimilarityRecord r{f[0], parse_color_space(f[1]), parse_similarity_method(f[2]), std::stod(f[3]),
                         std::stod(f[4])};
      r.validate();
      out.push_back(r);
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  return out;
}

// Rows: space x method. Columns: r over all records, r over R_S >= threshold.
inline std::string correlation_table(const std::vector<SimilarityRecord>& records, double threshold = 0.1) {
  const auto all = correlate_success(records);
  const auto filtered = correlate_success(records, threshold);
  auto cell = [](const CorrelationCell& c) {
    if (!c.r) return std::string("insufficient");
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << *c.r;
    return os.str();
  };
  std::ostringstream os;
  std::ostringstream thr;
  thr << "R_S >= " << threshold;
  os << std::left << std::setw(6) << "Space" << std::setw(9) << "Method" << std::right << std::setw(14) << "All R_S"
     << std::setw(14) << thr.str() << '\n';
  for (ColorSpace s : kColorSpaces)
    for (SimilarityMethod m : kSimilarityMethods)
      os << std::left << std::setw(6) << to_string(s) << std::setw(9) << to_string(m) << std::right << std::setw(14)
         << cell(all.at({s, m})) << std::setw(14) << cell(filtered.at({s, m})) << '\n';
  return os.str();
}

}  // namespace advpatch
