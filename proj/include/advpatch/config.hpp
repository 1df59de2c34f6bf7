#pragma once

#include <charconv>
#include <filesystem>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "advpatch/blackbox.hpp"
#include "advpatch/core.hpp"
#include "advpatch/detector.hpp"
#include "advpatch/io.hpp"
#include "advpatch/optimize.hpp"

namespace advpatch::config {

using nlohmann::json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline json detector_section(const ToyDetectorConfig& c) { return to_json(c); }

inline json detector_train_section(const DetectorTrainConfig& t) {
  return {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr},
          {"seed", t.seed},     {"flip", t.flip},             {"brightness", t.brightness},
          {"box_weight", t.box_weight}, {"noobj_weight", t.noobj_weight}, {"iou_obj_target", t.iou_obj_target}};
}

// Every accepted key with its default. null marks an optional value.
inline json defaults() {
  const SynthConfig s;
  const TrainConfig p;
  ToyDetectorConfig shadow_arch;
  shadow_arch.name = "toy-shadow";
  shadow_arch.widths = {24, 48, 48, 48, 48};
  return {
      {"dataset",
       {{"synth",
         {{"class_count", s.class_count}, {"image_size", s.image_size}, {"n_train", s.n_train},
          {"n_val", s.n_val}, {"n_test", s.n_test}, {"min_objects", s.min_objects},
          {"max_objects", s.max_objects}, {"min_size", s.min_size}, {"max_size", s.max_size},
          {"seed", s.seed}}}}},
      {"detector", detector_section(ToyDetectorConfig{})},
      {"detector_train", detector_train_section(DetectorTrainConfig{})},
      {"attack",
       {{"type", "hiding"},
        {"target_class", nullptr},
        {"adv_mode", "both"},
        {"init", "gray"},
        {"palette", ""},
        {"weights", {{"adv", nullptr}, {"sal", nullptr}, {"tv", nullptr}, {"nps", nullptr}, {"his", nullptr}}}}},
      {"patch",
       {{"side", p.patch_side}, {"epochs", p.epochs}, {"lr", p.lr}, {"patience", p.patience},
        {"lr_decay", p.lr_decay}, {"min_lr", p.min_lr}, {"plateau_threshold", p.plateau_threshold},
        {"batch_size", p.batch_size}, {"seed", p.seed}, {"patch_frac", p.patch_frac},
        {"checkpoint_every", p.checkpoint_every}, {"train_images", nullptr}, {"val_images", nullptr},
        {"phys",
         {{"contrast_lo", p.phys.contrast_lo}, {"contrast_hi", p.phys.contrast_hi},
          {"brightness_lo", p.phys.brightness_lo}, {"brightness_hi", p.phys.brightness_hi},
          {"noise", p.phys.noise}}}}},
      {"eval", {{"seed", 0}, {"patch_frac", p.patch_frac}, {"conf_thresh", nullptr}, {"nms_iou", nullptr},
                {"split", "val"}, {"images", nullptr}}},
      {"shadow",
       {{"arch", detector_section(shadow_arch)},
        {"train", detector_train_section(DetectorTrainConfig{})},
        {"query_budget", nullptr},
        {"conf_thresh", nullptr},
        {"patch_val_fraction", 0.2}}},
      {"colorsim", {{"threshold", 0.1}}},
  };
}

namespace detail {

inline json scalar_to_json(const YAML::Node& n) {
  const std::string s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  if (s.empty() || s == "~" || s == "null") return nullptr;
  if (s == "true" || s == "True") return true;
  if (s == "false" || s == "False") return false;
  std::int64_t i = 0;
  if (auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), i); ec == std::errc() && p == s.data() + s.size())
    return i;
  double d = 0;
  if (auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), d); ec == std::errc() && p == s.data() + s.size())
    return d;
  return s;
}

inline std::string valid_keys(const json& obj) {
  std::string out;
  for (const auto& [k, v] : obj.items()) out += (out.empty() ? "" : ", ") + k;
  return out;
}

inline bool compatible(const json& def, const json& v) {
  if (def.is_null() || v.is_null()) return true;
  if (def.is_number()) return v.is_number();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return false;
}

}  // namespace detail

inline json yaml_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined: return nullptr;
    case YAML::NodeType::Scalar: return detail::scalar_to_json(n);
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (const auto& e : n) a.push_back(yaml_to_json(e));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return o;
    }
  }
  return nullptr;
}

// Overlays `over` on `base`, rejecting keys and types that the defaults do not know.
inline void merge_checked(json& base, const json& over, const std::string& path = "") {
  if (!over.is_object()) throw ConfigError("config" + (path.empty() ? "" : " section '" + path + "'") + ": expected a mapping");
  for (const auto& [k, v] : over.items()) {
    const std::string key = path.empty() ? k : path + "." + k;
    if (!base.contains(k))
      throw ConfigError("unknown config key '" + key + "'; valid keys" + (path.empty() ? "" : " in '" + path + "'") +
                        ": " + detail::valid_keys(base));
    json& dst = base[k];
    if (dst.is_object() && !dst.empty()) {
      merge_checked(dst, v, key);
    } else {
      if (!detail::compatible(dst, v))
        throw ConfigError("config key '" + key + "': expected " + std::string(dst.type_name()) + ", got " +
                          v.type_name());
      dst = v;
    }
  }
}

inline json parse_yaml_text(const std::string& text, const std::string& origin) {
  try {
    const YAML::Node root = YAML::Load(text);
    if (root.IsNull()) return json::object();
    return yaml_to_json(root);
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

inline json load(const std::optional<std::filesystem::path>& file) {
  json cfg = defaults();
  if (file) merge_checked(cfg, parse_yaml_text(read_file_bytes(*file), file->string()));
  return cfg;
}

// "a.b.c=value"; value uses YAML scalar/flow syntax.
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "': expected key=value");
  const std::string key = assignment.substr(0, eq);
  json value = parse_yaml_text(assignment.substr(eq + 1), "override '" + key + "'");
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  json nested = std::move(value);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) nested = json{{*it, std::move(nested)}};
  merge_checked(cfg, nested);
}

namespace detail {
inline YAML::Node json_to_yaml(const json& j) {
  YAML::Node n;
  if (j.is_object()) {
    n = YAML::Node(YAML::NodeType::Map);
    for (const auto& [k, v] : j.items()) n[k] = json_to_yaml(v);
  } else if (j.is_array()) {
    n = YAML::Node(YAML::NodeType::Sequence);
    n.SetStyle(YAML::EmitterStyle::Flow);
    for (const auto& v : j) n.push_back(json_to_yaml(v));
  } else if (j.is_null()) {
    n = YAML::Node(YAML::NodeType::Null);
  } else if (j.is_string()) {
    n = j.get<std::string>();
  } else if (j.is_boolean()) {
    n = j.get<bool>();
  } else if (j.is_number_integer()) {
    n = j.get<std::int64_t>();
  } else {
    n = format_double(j.get<double>());
  }
  return n;
}
}  // namespace detail

inline std::string to_yaml(const json& cfg) {
  YAML::Emitter out;
  out << detail::json_to_yaml(cfg);
  return std::string(out.c_str()) + "\n";
}

template <class T>
std::optional<T> opt(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

inline SynthConfig synth_config(const json& cfg) {
  const json& s = cfg.at("dataset").at("synth");
  SynthConfig c;
  c.class_count = s.at("class_count");
  c.image_size = s.at("image_size");
  c.n_train = s.at("n_train");
  c.n_val = s.at("n_val");
  c.n_test = s.at("n_test");
  c.min_objects = s.at("min_objects");
  c.max_objects = s.at("max_objects");
  c.min_size = s.at("min_size");
  c.max_size = s.at("max_size");
  c.seed = s.at("seed");
  c.validate();
  return c;
}

inline ToyDetectorConfig detector_config(const json& section) {
  ToyDetectorConfig c = toy_config_from_json(section);
  c.validate();
  return c;
}

inline DetectorTrainConfig detector_train_config(const json& t) {
  DetectorTrainConfig c;
  c.epochs = t.at("epochs");
  c.batch_size = t.at("batch_size");
  c.lr = t.at("lr");
  c.seed = t.at("seed");
  c.flip = t.at("flip");
  c.brightness = t.at("brightness");
  c.box_weight = t.at("box_weight");
  c.noobj_weight = t.at("noobj_weight");
  c.iou_obj_target = t.at("iou_obj_target");
  return c;
}

inline AttackSpec attack_spec(const json& cfg) {
  const json& a = cfg.at("attack");
  AttackSpec s;
  s.type = parse_attack_type(a.at("type").get<std::string>());
  s.target_class = opt<int>(a, "target_class");
  s.adv_mode = parse_adv_mode(a.at("adv_mode").get<std::string>());
  s.init = parse_init_mode(a.at("init").get<std::string>());
  s.weights = LossWeights::defaults_for(s.type);
  const json& w = a.at("weights");
  if (auto v = opt<double>(w, "adv")) s.weights.adv = *v;
  if (auto v = opt<double>(w, "sal")) s.weights.sal = *v;
  if (auto v = opt<double>(w, "tv")) s.weights.tv = *v;
  if (auto v = opt<double>(w, "nps")) s.weights.nps = *v;
  if (auto v = opt<double>(w, "his")) s.weights.his = *v;
  s.weights.validate();
  return s;
}

inline TrainConfig patch_config(const json& cfg) {
  const json& p = cfg.at("patch");
  TrainConfig c;
  c.patch_side = p.at("side");
  c.epochs = p.at("epochs");
  c.lr = p.at("lr");
  c.patience = p.at("patience");
  c.lr_decay = p.at("lr_decay");
  c.min_lr = p.at("min_lr");
  c.plateau_threshold = p.at("plateau_threshold");
  c.batch_size = p.at("batch_size");
  c.seed = p.at("seed");
  c.patch_frac = p.at("patch_frac");
  c.checkpoint_every = p.at("checkpoint_every");
  const json& ph = p.at("phys");
  c.phys = {ph.at("contrast_lo"), ph.at("contrast_hi"), ph.at("brightness_lo"), ph.at("brightness_hi"),
            ph.at("noise")};
  c.validate();
  return c;
}

inline PatchEvalOptions eval_options(const json& cfg) {
  const json& e = cfg.at("eval");
  return {e.at("seed").get<std::uint64_t>(), e.at("patch_frac").get<double>(), opt<double>(e, "conf_thresh"),
          opt<double>(e, "nms_iou")};
}

inline ShadowConfig shadow_config(const json& cfg) {
  const json& s = cfg.at("shadow");
  ShadowConfig c;
  c.arch = detector_config(s.at("arch"));
  c.train = detector_train_config(s.at("train"));
  const auto budget = opt<std::int64_t>(s, "query_budget");
  if (!budget) throw ConfigError("shadow.query_budget is required (no default query budget)");
  if (*budget < 0) throw ConfigError("shadow.query_budget must be >= 0");
  c.query_budget = static_cast<std::size_t>(*budget);
  c.conf_thresh = opt<double>(s, "conf_thresh");
  c.patch_val_fraction = s.at("patch_val_fraction");
  c.validate();
  return c;
}

}  // namespace advpatch::config
