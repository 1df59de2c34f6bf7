#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "advpatch/blackbox.hpp"
#include "advpatch/colorsim.hpp"
#include "advpatch/config.hpp"
#include "advpatch/detector.hpp"
#include "advpatch/io.hpp"
#include "advpatch/metrics.hpp"
#include "advpatch/optimize.hpp"
#include "advpatch/render.hpp"

namespace advpatch::cli {

using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline json attack_json(const AttackSpec& s) {
  return {{"type", to_string(s.type)},
          {"target_class", s.target_class ? json(*s.target_class) : json(nullptr)},
          {"adv_mode", to_string(s.adv_mode)},
          {"init", to_string(s.init)},
          {"weights",
           {{"adv", s.weights.adv}, {"sal", s.weights.sal}, {"tv", s.weights.tv}, {"nps", s.weights.nps},
            {"his", s.weights.his}}}};
}

inline AttackSpec attack_from_json(const json& j) {
  AttackSpec s;
  s.type = parse_attack_type(j.at("type").get<std::string>());
  if (!j.at("target_class").is_null()) s.target_class = j.at("target_class").get<int>();
  s.adv_mode = parse_adv_mode(j.at("adv_mode").get<std::string>());
  s.init = parse_init_mode(j.at("init").get<std::string>());
  const json& w = j.at("weights");
  s.weights = {w.at("adv"), w.at("sal"), w.at("tv"), w.at("nps"), w.at("his")};
  return s;
}

// Options shared by every subcommand.
struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool dump = false;
};

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config_file, "config file (YAML key/value with nested sections)");
  sub->add_option("--set", c.overrides, "override a config key, e.g. --set patch.epochs=50");
  sub->add_option("--seed", c.seed, "seed override");
  sub->add_option("-o,--out", c.out, "output directory (required unless --dump-config)");
  sub->add_flag("--dump-config", c.dump, "print the effective config and exit");
}

inline json effective_config(const Common& c, const std::vector<std::string>& seed_keys) {
  json cfg = config::load(c.config_file.empty() ? std::nullopt
                                                : std::optional<std::filesystem::path>(c.config_file));
  for (const auto& o : c.overrides) config::apply_override(cfg, o);
  if (c.seed)
    for (const auto& k : seed_keys) config::apply_override(cfg, k + "=" + std::to_string(*c.seed));
  return cfg;
}

inline fs::path prepare_out(const std::string& out) {
  const fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

inline std::vector<LabeledImage> take(const std::vector<LabeledImage>& v, std::optional<std::int64_t> n) {
  if (!n || *n >= static_cast<std::int64_t>(v.size())) return v;
  return {v.begin(), v.begin() + std::max<std::int64_t>(0, *n)};
}

inline const std::vector<LabeledImage>& split_by_name(const Dataset& ds, const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "val") return ds.val;
  if (name == "test") return ds.test;
  throw config::ConfigError("eval.split must be train, val or test (got '" + name + "')");
}

// Reference statistics and histogram for the attack's target class.
inline AttackContext attack_context(const json& cfg, const AttackSpec& spec, const Dataset& ds) {
  AttackContext ctx;
  const std::string palette = cfg.at("attack").at("palette");
  if (!palette.empty()) ctx.palette = load_palette(palette);
  if (!spec.target_class) {
    if (spec.init == InitMode::Reference)
      throw config::ConfigError("reference init needs attack.target_class");
    return ctx;
  }
  const int t = *spec.target_class;
  if (t < 0 || t >= ds.class_count()) throw config::ConfigError("attack.target_class out of range");
  const ClassInfo& ci = ds.classes[t];
  const LabeledImage* ref = ci.ref_image.empty() ? nullptr : ds.find(ci.ref_image);
  if (spec.init == InitMode::Reference) ctx.ref = RefStats{ci.mean_rgb, ci.ref_image};
  if (spec.type != AttackType::Hiding && spec.weights.his > 0) {
    if (!ref)
      throw std::runtime_error("dataset has no reference image for class " + std::to_string(t) +
                               " (needed for lambda_His > 0)");
    ctx.ref_hist = reference_histogram(ref->image(), ci.ref_box);
  }
  return ctx;
}

inline json history_summary(const TrainHistory& h) {
  json s = {{"epochs", h.size()}};
  if (h.empty()) return s;
  s["final_loss"] = h.epochs.back().loss;
  s["final_val_rs"] = h.epochs.back().val_rs;
  if (h.size() >= 10) s["final_success"] = final_success(h);
  if (h.size() >= 20) s["convergence_epoch"] = compute_convergence(h);
  return s;
}

inline void write_report(const fs::path& dir, const Report& r, ExperimentManifest& m) {
  write_text(dir / "report.json", to_json(r).dump(2) + "\n");
  write_text(dir / "report.txt", to_table(r));
  write_text(dir / "report.csv", to_csv(r));
  write_text(dir / "per_class.csv", per_class_csv(r));
  for (const char* f : {"report.json", "report.txt", "report.csv", "per_class.csv"}) m.add_output(dir / f);
}

inline std::string patch_label(InitMode m) {
  switch (m) {
    case InitMode::Gray: return "Gray Patch";
    case InitMode::Random: return "Random Patch";
    case InitMode::Reference: return "Reference Patch";
  }
  return "Patch";
}

struct Handlers {
  std::ostream& out;
  std::ostream& err;

  int synth(const Common& c) {
    const json cfg = effective_config(c, {"dataset.synth.seed"});
    if (c.dump) return dump(cfg);
    const SynthConfig sc = config::synth_config(cfg);
    const fs::path dir = prepare_out(c.out);
    const Dataset ds = synth_dataset(sc);
    write_dataset(ds, dir);
    ExperimentManifest m{"synth-data", cfg, sc.seed, {}, {}};
    m.add_output(dir / "dataset.json");
    m.write(dir);
    out << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
        << " train/val/test images to " << dir.string() << "\n";
    return kExitOk;
  }

  int train_detector(const Common& c, const std::string& data) {
    const json cfg = effective_config(c, {"detector_train.seed"});
    if (c.dump) return dump(cfg);
    const ToyDetectorConfig dc = config::detector_config(cfg.at("detector"));
    DetectorTrainConfig tc = config::detector_train_config(cfg.at("detector_train"));
    tc.verbose = true;
    const Dataset ds = load_dataset(data, err);
    const fs::path dir = prepare_out(c.out);
    const ToyDetector det = train_toy_detector(ds.train, dc, tc, ds.val.empty() ? nullptr : &ds.val);
    save_detector(det, dir / "detector.bin");
    json summary = {{"name", det.name()}, {"train_images", ds.train.size()}};
    if (!ds.val.empty()) summary["val_map50"] = evaluate_map50(det, ds.val);
    write_text(dir / "detector.json", summary.dump(2) + "\n");
    ExperimentManifest m{"train-detector", cfg, tc.seed, {}, {}};
    m.add_input(data);
    m.add_output(dir / "detector.bin");
    m.add_output(dir / "detector.json");
    m.write(dir);
    out << summary.dump() << "\n";
    return kExitOk;
  }

  int train_patch_cmd(const Common& c, const std::string& data, const std::string& detector) {
    const json cfg = effective_config(c, {"patch.seed"});
    if (c.dump) return dump(cfg);
    const AttackSpec spec = config::attack_spec(cfg);
    TrainConfig tc = config::patch_config(cfg);
    const Dataset ds = load_dataset(data, err);
    const ToyDetector det = load_detector(detector);
    spec.validate(det.class_count());
    const AttackContext ctx = attack_context(cfg, spec, ds);
    const fs::path dir = prepare_out(c.out);
    tc.checkpoint_dir = (dir / "checkpoints").string();
    const auto train = take(ds.train, config::opt<std::int64_t>(cfg.at("patch"), "train_images"));
    const auto val = take(ds.val, config::opt<std::int64_t>(cfg.at("patch"), "val_images"));
    std::ofstream log(dir / "history.jsonl");
    if (!log) throw std::runtime_error("cannot write history log in " + dir.string());
    const TrainResult res = train_patch(det, train, val, spec, tc, ctx, [&](const EpochRecord& r, const Patch&) {
      log << to_json(r).dump() << "\n";
      log.flush();
      err << "[train-patch] epoch " << r.epoch << " loss " << r.loss << " val_rs " << r.val_rs << "\n";
    });
    log.close();
    const json meta = {{"attack", attack_json(spec)},
                       {"seed", tc.seed},
                       {"detector", det.name()},
                       {"patch_frac", tc.patch_frac},
                       {"config", cfg.at("patch")},
                       {"summary", history_summary(res.history)}};
    save_patch(dir / "patch.bin", res.patch, meta);
    write_ppm(dir / "patch.ppm", res.patch);
    ExperimentManifest m{"train-patch", cfg, tc.seed, {}, {}};
    m.add_input(data);
    m.add_input(detector);
    for (const char* f : {"patch.bin", "patch.bin.json", "patch.ppm", "history.jsonl"}) m.add_output(dir / f);
    if (fs::exists(dir / "checkpoints"))
      for (const auto& e : fs::directory_iterator(dir / "checkpoints")) m.add_output(e.path());
    m.write(dir);
    out << meta.at("summary").dump() << "\n";
    return kExitOk;
  }

  // Attack spec comes from the patch sidecar when it carries one.
  static AttackSpec patch_attack(const json& cfg, const LoadedPatch& lp) {
    if (lp.metadata.contains("attack")) return attack_from_json(lp.metadata.at("attack"));
    return config::attack_spec(cfg);
  }

  int eval_patch(const Common& c, const std::string& data, const std::string& detector, const std::string& patch) {
    const json cfg = effective_config(c, {"eval.seed"});
    if (c.dump) return dump(cfg);
    const LoadedPatch lp = load_patch(patch);
    const AttackSpec spec = patch_attack(cfg, lp);
    const PatchEvalOptions opt = config::eval_options(cfg);
    const Dataset ds = load_dataset(data, err);
    const ToyDetector det = load_detector(detector);
    const auto images = take(split_by_name(ds, cfg.at("eval").at("split")), config::opt<std::int64_t>(cfg.at("eval"), "images"));
    const fs::path dir = prepare_out(c.out);
    std::vector<EvalRun> runs{evaluate_clean(det, images, spec.type),
                              evaluate_noise(det, images, spec, lp.patch.side(), opt),
                              evaluate_patch(det, images, spec, lp.patch, opt,
                                             patch_label(spec.init))};
    for (auto& r : runs) r.dataset = ds.name;
    const Report r = assemble_report(runs);
    ExperimentManifest m{"eval-patch", cfg, opt.seed, {}, {}};
    m.add_input(data);
    m.add_input(detector);
    m.add_input(patch);
    write_report(dir, r, m);
    m.write(dir);
    out << to_table(r);
    return kExitOk;
  }

  int apply_patch(const Common& c, const std::string& image, const std::string& labels, const std::string& patch) {
    const json cfg = effective_config(c, {"eval.seed"});
    if (c.dump) return dump(cfg);
    const LoadedPatch lp = load_patch(patch);
    const AttackSpec spec = patch_attack(cfg, lp);
    const PatchEvalOptions opt = config::eval_options(cfg);
    const Image x = load_image(image);
    std::vector<BoundingBox> boxes;
    if (!labels.empty()) {
      std::ifstream in(labels);
      if (!in) throw std::runtime_error("cannot read " + labels);
      boxes = parse_labels(in, labels, -1);
    }
    const LabeledImage li = LabeledImage::from_image(fs::path(image).stem().string(), x, boxes);
    const ImagePlacement pl = eval_placement(spec, li, opt.seed, 0, opt.patch_frac);
    if (pl.empty()) throw std::runtime_error("no feasible patch placement in " + image);
    const PatchApplication app(x, lp.patch, pl.footprints);
    const fs::path dir = prepare_out(c.out);
    write_ppm(dir / "adversarial.ppm", app.adversarial());
    ExperimentManifest m{"apply-patch", cfg, opt.seed, {}, {}};
    m.add_input(image);
    m.add_input(patch);
    if (!labels.empty()) m.add_input(labels);
    m.add_output(dir / "adversarial.ppm");
    m.write(dir);
    out << "wrote " << (dir / "adversarial.ppm").string() << " (" << pl.footprints.size() << " patch(es))\n";
    return kExitOk;
  }

  int colorsim(const Common& c, const std::string& data, const std::vector<std::string>& patches,
               const std::string& records_in) {
    const json cfg = effective_config(c, {});
    if (c.dump) return dump(cfg);
    std::vector<SimilarityRecord> records;
    ExperimentManifest m{"colorsim", cfg, 0, {}, {}};
    if (!records_in.empty()) {
      std::ifstream in(records_in);
      if (!in) throw std::runtime_error("cannot read " + records_in);
      records = records_from_csv(in, records_in);
      m.add_input(records_in);
    }
    if (!patches.empty()) {
      if (data.empty()) throw UsageError("colorsim: --data is required with --patch");
      const Dataset ds = load_dataset(data, err);
      m.add_input(data);
      for (const auto& p : patches) {
        const LoadedPatch lp = load_patch(p);
        const AttackSpec spec = attack_from_json(lp.metadata.at("attack"));
        if (!spec.target_class) throw std::runtime_error(p + ": colorsim needs a patch with a target class");
        const ClassInfo& ci = ds.classes.at(*spec.target_class);
        const LabeledImage* ref = ds.find(ci.ref_image);
        if (!ref) throw std::runtime_error("dataset has no reference image for class " + std::to_string(ci.id));
        const json& s = lp.metadata.at("summary");
        const double rs = s.contains("final_success") ? s.at("final_success").get<double>()
                                                      : s.value("final_val_rs", 0.0);
        const auto recs = similarity_records(fs::path(p).parent_path().filename().string() + "/" +
                                                 fs::path(p).filename().string(),
                                             lp.patch, ref->image(), ci.ref_box, rs);
        records.insert(records.end(), recs.begin(), recs.end());
        m.add_input(p);
      }
    }
    if (records.empty()) throw UsageError("colorsim: give --patch files and/or --records");
    const fs::path dir = prepare_out(c.out);
    const double thr = cfg.at("colorsim").at("threshold");
    write_text(dir / "records.csv", records_to_csv(records));
    write_text(dir / "correlation.txt", correlation_table(records, thr));
    m.add_output(dir / "records.csv");
    m.add_output(dir / "correlation.txt");
    m.write(dir);
    out << correlation_table(records, thr);
    return kExitOk;
  }

  int shadow_attack(const Common& c, const std::string& data, const std::string& victim_path,
                    const std::string& transfer_patch) {
    const json cfg = effective_config(c, {"patch.seed"});
    if (c.dump) return dump(cfg);
    const ShadowConfig sc = config::shadow_config(cfg);
    const AttackSpec spec = config::attack_spec(cfg);
    const TrainConfig tc = config::patch_config(cfg);
    const Dataset ds = load_dataset(data, err);
    const ToyDetector victim = load_detector(victim_path);
    const AttackContext ctx = attack_context(cfg, spec, ds);
    std::optional<LoadedPatch> baseline;
    if (!transfer_patch.empty()) baseline = load_patch(transfer_patch);
    const fs::path dir = prepare_out(c.out);
    const auto eval = take(split_by_name(ds, cfg.at("eval").at("split")), config::opt<std::int64_t>(cfg.at("eval"), "images"));
    ShadowResult res = shadow_pipeline(victim, sc, ds.train, eval, spec, tc, ctx, baseline ? &baseline->patch : nullptr,
                                       baseline ? baseline->metadata.value("detector", std::string()) : "");
    save_detector(*res.shadow, dir / "shadow.bin");
    save_patch(dir / "patch.bin", res.patch,
               {{"attack", attack_json(spec)},
                {"seed", tc.seed},
                {"detector", res.shadow->name()},
                {"victim", victim.name()},
                {"patch_frac", tc.patch_frac},
                {"config", cfg.at("patch")},
                {"summary", history_summary(res.history)}});
    write_pseudo_labels(res.labels, dir / "pseudo_labels");
    ExperimentManifest m{"shadow-attack", cfg, tc.seed, {}, {}};
    m.add_input(data);
    m.add_input(victim_path);
    if (baseline) m.add_input(transfer_patch);
    m.add_output(dir / "shadow.bin");
    m.add_output(dir / "patch.bin");
    m.add_output(dir / "patch.bin.json");
    m.add_output(dir / "pseudo_labels" / "pseudo_labels.json");
    write_report(dir, res.report, m);
    m.write(dir);
    out << "victim queries: " << res.labels.queries << "\n" << to_table(res.report);
    return kExitOk;
  }

  int transfer(const Common& c, const std::string& data, const std::string& victim_path, const std::string& patch) {
    const json cfg = effective_config(c, {"eval.seed"});
    if (c.dump) return dump(cfg);
    const LoadedPatch lp = load_patch(patch);
    const AttackSpec spec = patch_attack(cfg, lp);
    const PatchEvalOptions opt = config::eval_options(cfg);
    const Dataset ds = load_dataset(data, err);
    const ToyDetector victim = load_detector(victim_path);
    const auto images = take(split_by_name(ds, cfg.at("eval").at("split")), config::opt<std::int64_t>(cfg.at("eval"), "images"));
    const std::string surrogate = lp.metadata.value("detector", std::string("unknown"));
    const Report r = transfer_eval(lp.patch, surrogate, victim, images, spec, opt);
    const fs::path dir = prepare_out(c.out);
    ExperimentManifest m{"transfer-eval", cfg, opt.seed, {}, {}};
    m.add_input(data);
    m.add_input(victim_path);
    m.add_input(patch);
    write_report(dir, r, m);
    m.write(dir);
    out << to_table(r);
    return kExitOk;
  }

  int report(const Common& c, const std::vector<std::string>& runs) {
    const json cfg = effective_config(c, {});
    if (c.dump) return dump(cfg);
    std::vector<Report> parts;
    ExperimentManifest m{"report", cfg, 0, {}, {}};
    for (const auto& run : runs) {
      fs::path p(run);
      if (fs::is_directory(p)) p /= "report.json";
      try {
        parts.push_back(report_from_json(json::parse(read_file_bytes(p))));
      } catch (const json::exception& e) {
        throw ParseError(p.string() + ": " + e.what());
      }
      m.add_input(p);
    }
    const Report r = merge_reports(parts);
    const fs::path dir = prepare_out(c.out);
    write_report(dir, r, m);
    m.write(dir);
    out << to_table(r);
    return kExitOk;
  }

  int dump(const json& cfg) {
    out << config::to_yaml(cfg);
    return kExitOk;
  }
};

// Returns the process exit code: 0 success, 1 usage error, 2 runtime failure.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Adversarial patch attacks on object detectors"};
  app.name("advpatch");
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  Common c;
  std::string data, detector, patch, image, labels, victim, records_in, transfer_patch, attack, mode, init;
  std::optional<int> target;
  std::vector<std::string> patches, runs;

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic dataset");
  add_common(synth, c);

  auto* tdet = app.add_subcommand("train-detector", "train the toy detector");
  add_common(tdet, c);
  tdet->add_option("--data", data, "dataset root")->required();

  auto* tpatch = app.add_subcommand("train-patch", "optimize an adversarial patch (white-box)");
  add_common(tpatch, c);
  tpatch->add_option("--data", data, "dataset root")->required();
  tpatch->add_option("--detector", detector, "detector checkpoint")->required();
  tpatch->add_option("--attack", attack, "hiding | creating | altering");
  tpatch->add_option("--target", target, "target class (creating/altering)");
  tpatch->add_option("--mode", mode, "cls_only | obj_only | both");
  tpatch->add_option("--init", init, "gray | random | reference");

  auto* epatch = app.add_subcommand("eval-patch", "evaluate a patch against a detector");
  add_common(epatch, c);
  epatch->add_option("--data", data, "dataset root")->required();
  epatch->add_option("--detector", detector, "detector checkpoint")->required();
  epatch->add_option("--patch", patch, "patch file")->required();

  auto* apatch = app.add_subcommand("apply-patch", "paste a patch into an image");
  add_common(apatch, c);
  apatch->add_option("--image", image, "input PPM image")->required();
  apatch->add_option("--labels", labels, "label file for the image");
  apatch->add_option("--patch", patch, "patch file")->required();

  auto* csim = app.add_subcommand("colorsim", "color similarity vs attack success analysis");
  add_common(csim, c);
  csim->add_option("--data", data, "dataset root (reference images)");
  csim->add_option("--patch", patches, "patch files");
  csim->add_option("--records", records_in, "existing records CSV");

  auto* shadow = app.add_subcommand("shadow-attack", "shadow-model extraction attack");
  add_common(shadow, c);
  shadow->add_option("--data", data, "dataset root")->required();
  shadow->add_option("--victim", victim, "victim detector checkpoint")->required();
  shadow->add_option("--transfer-patch", transfer_patch, "surrogate-trained patch to compare against");
  shadow->add_option("--attack", attack, "hiding | creating | altering");
  shadow->add_option("--target", target, "target class (creating/altering)");

  auto* transfer = app.add_subcommand("transfer-eval", "evaluate a surrogate-trained patch on a victim");
  add_common(transfer, c);
  transfer->add_option("--data", data, "dataset root")->required();
  transfer->add_option("--victim", victim, "victim detector checkpoint")->required();
  transfer->add_option("--patch", patch, "patch trained on a surrogate")->required();

  auto* rep = app.add_subcommand("report", "merge run reports into one table");
  add_common(rep, c);
  rep->add_option("runs", runs, "run directories or report.json files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  if (!attack.empty()) c.overrides.push_back("attack.type=" + attack);
  if (target) c.overrides.push_back("attack.target_class=" + std::to_string(*target));
  if (!mode.empty()) c.overrides.push_back("attack.adv_mode=" + mode);
  if (!init.empty()) c.overrides.push_back("attack.init=" + init);

  Handlers h{out, err};
  CLI::App* sub = app.get_subcommands().front();
  if (!c.dump && c.out.empty()) {
    err << "error: --out is required\n" << sub->help();
    return kExitUsage;
  }
  try {
    if (sub == synth) return h.synth(c);
    if (sub == tdet) return h.train_detector(c, data);
    if (sub == tpatch) return h.train_patch_cmd(c, data, detector);
    if (sub == epatch) return h.eval_patch(c, data, detector, patch);
    if (sub == apatch) return h.apply_patch(c, image, labels, patch);
    if (sub == csim) return h.colorsim(c, data, patches, records_in);
    if (sub == shadow) return h.shadow_attack(c, data, victim, transfer_patch);
    if (sub == transfer) return h.transfer(c, data, victim, patch);
    if (sub == rep) return h.report(c, runs);
  } catch (const config::ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << sub->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace advpatch::cli
