#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advpatch/core.hpp"
#include "advpatch/parallel.hpp"
#include "advpatch/rng.hpp"

namespace advpatch {

namespace fs = std::filesystem;

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hashing

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string file_hash(const fs::path& path) {
  const std::string bytes = read_file_bytes(path);
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255)

inline void write_ppm(const fs::path& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw std::invalid_argument("write_ppm: buffer size does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline std::vector<std::uint8_t> to_rgb8(const Raster& img) {
  std::vector<std::uint8_t> rgb(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data()[i], 0.0, 1.0) * 255.0));
  return rgb;
}

inline void write_ppm(const fs::path& path, const Raster& img) {
  if (img.channels() != 3) throw std::invalid_argument("write_ppm: expected 3 channels");
  write_ppm(path, img.width(), img.height(), to_rgb8(img));
}

struct Rgb8Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;
};

inline Rgb8Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  if (token() != "P6") throw ParseError(path.string() + ": not a binary PPM (P6)");
  Rgb8Image img;
  int maxval = 0;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw ParseError(path.string() + ": malformed PPM header");
  }
  if (img.width <= 0 || img.height <= 0 || maxval != 255)
    throw ParseError(path.string() + ": unsupported PPM dimensions or maxval");
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!in) throw ParseError(path.string() + ": truncated pixel data");
  return img;
}

inline Image load_image(const fs::path& path) {
  const Rgb8Image p = read_ppm(path);
  Raster r(p.height, p.width, 3);
  for (std::size_t i = 0; i < p.rgb.size(); ++i) r.data()[i] = p.rgb[i] / 255.0;
  return Image(std::move(r));
}

// ---------------------------------------------------------------------------
// Annotations: one "class_id cx cy w h" line per object, normalized coordinates.

inline std::vector<BoundingBox> parse_labels(std::istream& in, const std::string& origin,
                                             int class_count = -1) {
  std::vector<BoundingBox> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    BoundingBox b;
    std::string extra;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (!(ls >> b.class_id >> b.cx >> b.cy >> b.w >> b.h))
      throw ParseError(where + "expected 'class_id cx cy w h'");
    if (ls >> extra) throw ParseError(where + "trailing token '" + extra + "'");
    if (b.class_id < 0 || (class_count > 0 && b.class_id >= class_count))
      throw ParseError(where + "class id " + std::to_string(b.class_id) + " out of range");
    if (!(b.w > 0 && b.w <= 1 && b.h > 0 && b.h <= 1))
      throw ParseError(where + "w and h must be in (0,1]");
    if (!(b.cx >= 0 && b.cx <= 1 && b.cy >= 0 && b.cy <= 1))
      throw ParseError(where + "cx and cy must be in [0,1]");
    out.push_back(b);
  }
  return out;
}

inline std::string serialize_labels(const std::vector<BoundingBox>& boxes) {
  std::string s;
  for (const auto& b : boxes)
    s += std::to_string(b.class_id) + " " + format_double(b.cx) + " " + format_double(b.cy) + " " +
         format_double(b.w) + " " + format_double(b.h) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Dataset

enum class Split { Train, Val, Test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline constexpr std::array<Split, 3> kSplits = {Split::Train, Split::Val, Split::Test};

enum class Shape { Square, Circle, Triangle, Diamond, Cross, Ring, Hexagon, Bar };

inline std::string to_string(Shape s) {
  static const char* names[] = {"square", "circle", "triangle", "diamond", "cross", "ring", "hexagon", "bar"};
  return names[static_cast<int>(s)];
}

inline Shape parse_shape(const std::string& s) {
  for (int i = 0; i < 8; ++i)
    if (to_string(static_cast<Shape>(i)) == s) return static_cast<Shape>(i);
  throw std::invalid_argument("unknown shape '" + s + "'");
}

struct ClassInfo {
  int id = 0;
  std::string name;
  std::array<double, 3> color{};
  Shape shape = Shape::Square;
  // Reference statistics: mean RGB over object pixels of the train split, and one
  // designated reference instance.
  std::array<double, 3> mean_rgb{};
  std::string ref_image;
  BoundingBox ref_box;
};

inline ClassInfo generic_class(int id) {
  ClassInfo c;
  c.id = id;
  c.name = "class" + std::to_string(id);
  return c;
}

struct Dataset {
  std::string name = "synthetic";
  int image_size = 256;
  std::uint64_t seed = 0;
  std::vector<ClassInfo> classes;
  std::vector<LabeledImage> train, val, test;

  int class_count() const { return static_cast<int>(classes.size()); }

  std::vector<LabeledImage>& split(Split s) { return s == Split::Train ? train : s == Split::Val ? val : test; }
  const std::vector<LabeledImage>& split(Split s) const {
    return s == Split::Train ? train : s == Split::Val ? val : test;
  }

  const LabeledImage* find(const std::string& id) const {
    for (Split s : kSplits)
      for (const auto& li : split(s))
        if (li.id == id) return &li;
    return nullptr;
  }
};

inline nlohmann::json manifest_json(const Dataset& ds) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : ds.classes)
    classes.push_back({{"id", c.id},
                       {"name", c.name},
                       {"color", c.color},
                       {"shape", to_string(c.shape)},
                       {"mean_rgb", c.mean_rgb},
                       {"ref_image", c.ref_image},
                       {"ref_box", {c.ref_box.cx, c.ref_box.cy, c.ref_box.w, c.ref_box.h}}});
  return {{"name", ds.name},
          {"image_size", ds.image_size},
          {"seed", ds.seed},
          {"class_count", ds.class_count()},
          {"classes", classes},
          {"counts", {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()}}}};
}

inline void write_dataset(const Dataset& ds, const fs::path& root) {
  for (Split s : kSplits) {
    const fs::path img_dir = root / to_string(s) / "images";
    const fs::path lbl_dir = root / to_string(s) / "labels";
    fs::create_directories(img_dir);
    fs::create_directories(lbl_dir);
    for (const auto& li : ds.split(s)) {
      write_ppm(img_dir / (li.id + ".ppm"), li.width, li.height, li.rgb);
      std::ofstream out(lbl_dir / (li.id + ".txt"));
      if (!out) throw std::runtime_error("cannot write labels for " + li.id);
      out << serialize_labels(li.boxes);
    }
  }
  std::ofstream out(root / "dataset.json");
  if (!out) throw std::runtime_error("cannot write " + (root / "dataset.json").string());
  out << manifest_json(ds).dump(2) << "\n";
}

// Reads root/{train,val,test}/{images,labels}. dataset.json is optional; without it
// the class count is inferred from the labels and no reference statistics exist.
inline Dataset load_dataset(const fs::path& root, std::ostream& warn = std::cerr) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root not found: " + root.string());
  Dataset ds;
  int class_count = -1;
  const fs::path manifest = root / "dataset.json";
  if (fs::exists(manifest)) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file_bytes(manifest));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(manifest.string() + ": " + e.what());
    }
    ds.name = j.value("name", ds.name);
    ds.image_size = j.value("image_size", ds.image_size);
    ds.seed = j.value("seed", ds.seed);
    for (const auto& jc : j.at("classes")) {
      ClassInfo c;
      c.id = jc.at("id");
      c.name = jc.value("name", "class" + std::to_string(c.id));
      c.color = jc.value("color", c.color);
      c.shape = parse_shape(jc.value("shape", std::string("square")));
      c.mean_rgb = jc.value("mean_rgb", c.mean_rgb);
      c.ref_image = jc.value("ref_image", std::string());
      const std::vector<double> rb = jc.value("ref_box", std::vector<double>{});
      if (rb.size() == 4) c.ref_box = {rb[0], rb[1], rb[2], rb[3], c.id};
      ds.classes.push_back(c);
    }
    class_count = ds.class_count();
  }
  int max_class = -1;
  bool any_split = false;
  for (Split s : kSplits) {
    const fs::path img_dir = root / to_string(s) / "images";
    const fs::path lbl_dir = root / to_string(s) / "labels";
    if (!fs::is_directory(img_dir)) continue;
    any_split = true;
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(img_dir))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      LabeledImage li;
      li.id = f.stem().string();
      const Rgb8Image p = read_ppm(f);
      li.width = p.width;
      li.height = p.height;
      li.rgb = p.rgb;
      const fs::path lbl = lbl_dir / (li.id + ".txt");
      if (fs::exists(lbl)) {
        std::ifstream in(lbl);
        li.boxes = parse_labels(in, lbl.string(), class_count);
      } else {
        warn << "warning: no label file for " << f.string() << ", treating as background-only\n";
      }
      for (const auto& b : li.boxes) max_class = std::max(max_class, b.class_id);
      ds.split(s).push_back(std::move(li));
    }
  }
  if (!any_split) throw std::runtime_error(root.string() + ": no {train,val,test}/images directories");
  if (ds.classes.empty())
    for (int c = 0; c <= max_class; ++c) ds.classes.push_back(generic_class(c));
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic dataset: C fixed (color, shape) classes on a textured background.

struct SynthConfig {
  int class_count = 8;
  int image_size = 256;
  int n_train = 800;
  int n_val = 200;
  int n_test = 0;
  int min_objects = 1;
  int max_objects = 4;
  int min_size = 48;  // px, object box side
  int max_size = 96;
  std::uint64_t seed = 0;

  void validate() const {
    if (class_count < 1 || class_count > 8) throw std::invalid_argument("synth: class_count must be in [1,8]");
    if (image_size < 64) throw std::invalid_argument("synth: image_size must be >= 64");
    if (n_train < 0 || n_val < 0 || n_test < 0 || n_train + n_val + n_test < 1)
      throw std::invalid_argument("synth: at least one image required");
    if (min_objects < 0 || max_objects < min_objects) throw std::invalid_argument("synth: bad object count range");
    if (min_size < 8 || max_size < min_size || max_size > image_size / 2)
      throw std::invalid_argument("synth: bad object size range");
  }
};

inline std::vector<ClassInfo> default_classes(int count = 8) {
  static const std::array<std::pair<const char*, std::array<double, 3>>, 8> table = {{
      {"red_square", {0.85, 0.12, 0.12}},
      {"green_circle", {0.12, 0.70, 0.20}},
      {"blue_triangle", {0.15, 0.25, 0.90}},
      {"yellow_diamond", {0.92, 0.85, 0.10}},
      {"magenta_cross", {0.85, 0.15, 0.80}},
      {"cyan_ring", {0.10, 0.80, 0.85}},
      {"orange_hexagon", {0.95, 0.55, 0.08}},
      {"white_bar", {0.95, 0.95, 0.95}},
  }};
  std::vector<ClassInfo> out;
  for (int i = 0; i < count; ++i) {
    ClassInfo c;
    c.id = i;
    c.name = table[i].first;
    c.color = table[i].second;
    c.shape = static_cast<Shape>(i);
    out.push_back(c);
  }
  return out;
}

// Is (u, v) in [-1,1]^2 (box-local coordinates) inside the shape?
inline bool shape_contains(Shape s, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (s) {
    case Shape::Square: return au <= 1 && av <= 1;
    case Shape::Circle: return u * u + v * v <= 1;
    case Shape::Triangle: return v <= 1 && v >= -1 && au <= (v + 1) / 2;
    case Shape::Diamond: return au + av <= 1;
    case Shape::Cross: return (au <= 0.35 && av <= 1) || (av <= 0.35 && au <= 1);
    case Shape::Ring: {
      const double r2 = u * u + v * v;
      return r2 <= 1 && r2 >= 0.3;
    }
    case Shape::Hexagon: return av <= 1 && au + 0.5 * av <= 1;
    case Shape::Bar: return au <= 1 && av <= 1;
  }
  return false;
}

namespace detail {

struct SynthObject {
  int x0, y0, w, h;  // px
  int cls;
};

inline bool overlaps(const SynthObject& a, const SynthObject& b, int gap) {
  return a.x0 < b.x0 + b.w + gap && b.x0 < a.x0 + a.w + gap && a.y0 < b.y0 + b.h + gap &&
         b.y0 < a.y0 + a.h + gap;
}

}  // namespace detail

// Renders one scene and fills `boxes`.
inline Image render_scene(const SynthConfig& cfg, const std::vector<ClassInfo>& classes, Rng& rng,
                          std::vector<BoundingBox>& boxes) {
  const int S = cfg.image_size;
  Raster img(S, S, 3);
  // Low-saturation textured background: base tint, two sinusoid gratings, grain.
  const double base = uniform(rng, 0.30, 0.60);
  double tint[3];
  for (double& t : tint) t = base + uniform(rng, -0.06, 0.06);
  const double f1 = uniform(rng, 2, 9) * 2 * std::numbers::pi / S, f2 = uniform(rng, 2, 9) * 2 * std::numbers::pi / S;
  const double th1 = uniform(rng, 0, std::numbers::pi), th2 = uniform(rng, 0, std::numbers::pi);
  const double a1 = uniform(rng, 0.02, 0.08), a2 = uniform(rng, 0.02, 0.08);
  const double ph1 = uniform(rng, 0, 6.28), ph2 = uniform(rng, 0, 6.28);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double g = a1 * std::sin(f1 * (x * std::cos(th1) + y * std::sin(th1)) + ph1) +
                       a2 * std::sin(f2 * (x * std::cos(th2) + y * std::sin(th2)) + ph2);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = tint[c] + g + uniform(rng, -0.03, 0.03);
    }

  const int n = uniform_int(rng, cfg.min_objects, cfg.max_objects);
  std::vector<detail::SynthObject> objs;
  for (int k = 0; k < n; ++k) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      const int cls = uniform_int(rng, 0, cfg.class_count - 1);
      const Shape shape = classes[cls].shape;
      int w = uniform_int(rng, cfg.min_size, cfg.max_size);
      int h = static_cast<int>(std::lround(w * uniform(rng, 0.85, 1.15)));
      if (shape == Shape::Bar) h = std::max(cfg.min_size / 2, w / 2);
      h = std::clamp(h, 8, cfg.max_size);
      const detail::SynthObject o{uniform_int(rng, 0, S - w), uniform_int(rng, 0, S - h), w, h, cls};
      if (std::any_of(objs.begin(), objs.end(), [&](const auto& p) { return detail::overlaps(o, p, 4); }))
        continue;
      objs.push_back(o);
      break;
    }
  }

  const double gain = uniform(rng, 0.9, 1.1);  // scene lighting
  boxes.clear();
  for (const auto& o : objs) {
    const ClassInfo& ci = classes[o.cls];
    double col[3];
    for (int c = 0; c < 3; ++c) col[c] = ci.color[c] + uniform(rng, -0.04, 0.04);
    for (int y = o.y0; y < o.y0 + o.h; ++y)
      for (int x = o.x0; x < o.x0 + o.w; ++x) {
        const double u = (x + 0.5 - o.x0) / o.w * 2 - 1, v = (y + 0.5 - o.y0) / o.h * 2 - 1;
        if (!shape_contains(ci.shape, u, v)) continue;
        const double shade = 1.0 - 0.12 * (u + v) / 2;  // soft directional shading
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = col[c] * shade + uniform(rng, -0.02, 0.02);
      }
    boxes.push_back({(o.x0 + o.w / 2.0) / S, (o.y0 + o.h / 2.0) / S, static_cast<double>(o.w) / S,
                     static_cast<double>(o.h) / S, o.cls});
  }
  for (double& v : img.data()) v *= gain;
  img.clamp01();
  return Image(std::move(img));
}

// Mean RGB over pixels inside the shape of each labeled object of class c.
inline void accumulate_object_means(const LabeledImage& li, const std::vector<ClassInfo>& classes,
                                    std::vector<std::array<double, 4>>& acc) {
  for (const auto& b : li.boxes) {
    const Corners c = box_center_to_corners(b);
    const int x0 = static_cast<int>(std::lround(c.x1 * li.width)), x1 = static_cast<int>(std::lround(c.x2 * li.width));
    const int y0 = static_cast<int>(std::lround(c.y1 * li.height)), y1 = static_cast<int>(std::lround(c.y2 * li.height));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        const double u = (x + 0.5 - x0) / (x1 - x0) * 2 - 1, v = (y + 0.5 - y0) / (y1 - y0) * 2 - 1;
        if (!shape_contains(classes[b.class_id].shape, u, v)) continue;
        const std::size_t i = (static_cast<std::size_t>(y) * li.width + x) * 3;
        for (int ch = 0; ch < 3; ++ch) acc[b.class_id][ch] += li.rgb[i + ch] / 255.0;
        acc[b.class_id][3] += 1;
      }
  }
}

inline Dataset synth_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.image_size = cfg.image_size;
  ds.seed = cfg.seed;
  ds.classes = default_classes(cfg.class_count);
  const int counts[3] = {cfg.n_train, cfg.n_val, cfg.n_test};
  for (int si = 0; si < 3; ++si) {
    auto& out = ds.split(kSplits[si]);
    out.resize(counts[si]);
    parallel_for(counts[si], [&](int i) {
      Rng rng = make_rng({cfg.seed, 0x5947ULL, static_cast<std::uint64_t>(si), static_cast<std::uint64_t>(i)});
      std::vector<BoundingBox> boxes;
      const Image img = render_scene(cfg, ds.classes, rng, boxes);
      char id[32];
      std::snprintf(id, sizeof id, "%s_%05d", to_string(kSplits[si]).c_str(), i);
      out[i] = LabeledImage::from_image(id, img, std::move(boxes));
    });
  }
  // Reference statistics come from the train split when present, else from any split.
  std::vector<std::array<double, 4>> acc(cfg.class_count, {0, 0, 0, 0});
  for (Split s : kSplits) {
    for (const auto& li : ds.split(s)) {
      accumulate_object_means(li, ds.classes, acc);
      for (const auto& b : li.boxes) {
        ClassInfo& ci = ds.classes[b.class_id];
        if (ci.ref_image.empty()) {
          ci.ref_image = li.id;
          ci.ref_box = b;
        }
      }
    }
    if (s == Split::Train && !ds.train.empty()) break;
  }
  for (auto& ci : ds.classes) {
    const auto& a = acc[ci.id];
    ci.mean_rgb = a[3] > 0 ? std::array<double, 3>{a[0] / a[3], a[1] / a[3], a[2] / a[3]} : ci.color;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Patch container: "ADVPATCH" magic, u32 version, u32 h, w, c, raw doubles.
// A JSON sidecar <path>.json carries metadata and the container's FNV-1a hash.

inline constexpr char kPatchMagic[8] = {'A', 'D', 'V', 'P', 'A', 'T', 'C', 'H'};
inline constexpr std::uint32_t kPatchVersion = 1;

inline fs::path sidecar_path(const fs::path& patch_path) { return fs::path(patch_path.string() + ".json"); }

inline std::string encode_patch(const Patch& p) {
  std::string buf(kPatchMagic, sizeof kPatchMagic);
  auto put32 = [&](std::uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), sizeof v); };
  put32(kPatchVersion);
  put32(static_cast<std::uint32_t>(p.height()));
  put32(static_cast<std::uint32_t>(p.width()));
  put32(static_cast<std::uint32_t>(p.channels()));
  buf.append(reinterpret_cast<const char*>(p.data().data()), p.size() * sizeof(double));
  return buf;
}

inline Patch decode_patch(const std::string& buf, const std::string& origin) {
  constexpr std::size_t header = sizeof kPatchMagic + 4 * sizeof(std::uint32_t);
  if (buf.size() < header || std::memcmp(buf.data(), kPatchMagic, sizeof kPatchMagic) != 0)
    throw ParseError(origin + ": not a patch container");
  std::uint32_t v[4];
  std::memcpy(v, buf.data() + sizeof kPatchMagic, sizeof v);
  if (v[0] != kPatchVersion) throw ParseError(origin + ": unsupported patch version " + std::to_string(v[0]));
  Raster r(static_cast<int>(v[1]), static_cast<int>(v[2]), static_cast<int>(v[3]));
  if (buf.size() != header + r.size() * sizeof(double)) throw ParseError(origin + ": truncated patch data");
  std::memcpy(r.data().data(), buf.data() + header, r.size() * sizeof(double));
  return Patch(std::move(r));
}

inline void save_patch(const fs::path& path, const Patch& p, nlohmann::json metadata = nlohmann::json::object()) {
  const std::string bytes = encode_patch(p);
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
  }
  metadata["side"] = p.side();
  metadata["hash"] = hex64(fnv1a64(bytes.data(), bytes.size()));
  std::ofstream out(sidecar_path(path));
  if (!out) throw std::runtime_error("cannot write " + sidecar_path(path).string());
  out << metadata.dump(2) << "\n";
}

struct LoadedPatch {
  Patch patch;
  nlohmann::json metadata;
};

inline LoadedPatch load_patch(const fs::path& path) {
  const fs::path side = sidecar_path(path);
  if (!fs::exists(side)) throw std::runtime_error("patch sidecar missing: " + side.string());
  const std::string bytes = read_file_bytes(path);
  LoadedPatch out{decode_patch(bytes, path.string()), {}};
  try {
    out.metadata = nlohmann::json::parse(read_file_bytes(side));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(side.string() + ": " + e.what());
  }
  const std::string expect = out.metadata.value("hash", std::string());
  const std::string actual = hex64(fnv1a64(bytes.data(), bytes.size()));
  if (expect != actual)
    throw std::runtime_error("patch/sidecar hash mismatch for " + path.string() + " (sidecar " + expect +
                             ", file " + actual + ")");
  return out;
}

// ---------------------------------------------------------------------------
// Experiment manifest written next to every CLI output.

inline constexpr const char* kToolVersion = "1.0.0";

struct ExperimentManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // path -> hash
  std::map<std::string, std::string> outputs;  // path -> hash

  void add_input(const fs::path& p) {
    if (fs::is_regular_file(p)) inputs[p.string()] = file_hash(p);
    else if (fs::is_directory(p) && fs::exists(p / "dataset.json"))
      inputs[(p / "dataset.json").string()] = file_hash(p / "dataset.json");
    else inputs[p.string()] = "";
  }
  void add_output(const fs::path& p) { outputs[p.string()] = fs::is_regular_file(p) ? file_hash(p) : ""; }

  nlohmann::json to_json() const {
    return {{"command", command},
            {"version", kToolVersion},
            {"modules", {{"core", 1}, {"detector", 1}, {"patch", kPatchVersion}}},
            {"seed", seed},
            {"config", config},
            {"inputs", inputs},
            {"outputs", outputs}};
  }

  void write(const fs::path& dir) const {
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    out << to_json().dump(2) << "\n";
  }
};

}  // namespace advpatch
