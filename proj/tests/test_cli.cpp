#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "advpatch/cli.hpp"

using namespace advpatch;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kSmallConfig = R"(dataset:
  synth:
    class_count: 3
    image_size: 64
    n_train: 40
    n_val: 8
    min_objects: 1
    max_objects: 2
    min_size: 20
    max_size: 30
detector:
  input_size: 64
  class_count: 3
  pool: 1
  widths: [8, 16, 16, 16]
  strides: [2, 2, 2, 1]
  kernels: [3, 3, 3, 3]
  spp: [3]
detector_train:
  epochs: 3
  batch_size: 8
patch:
  side: 16
  epochs: 3
  batch_size: 4
  patch_frac: 0.5
eval:
  patch_frac: 0.5
)";

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "advpatch");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::map<std::string, std::string> tree_bytes(const fs::path& root, const std::string& skip = "") {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() != skip)
      out[fs::relative(e.path(), root).string()] = read_file_bytes(e.path());
  return out;
}

std::vector<json> history_without_timing(const fs::path& dir) {
  std::vector<json> out;
  std::istringstream in(read_file_bytes(dir / "history.jsonl"));
  for (std::string line; std::getline(in, line);) {
    json j = json::parse(line);
    j.erase("seconds");
    out.push_back(j);
  }
  return out;
}

// Shared small pipeline: dataset, detector and one patch run.
struct Workspace {
  fs::path root, config, data, det, patch;
  Workspace() {
    root = fs::temp_directory_path() / "advpatch_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    config = root / "small.yaml";
    std::ofstream(config) << kSmallConfig;
    data = root / "data";
    det = root / "det";
    patch = root / "patch";
    check(run({"synth-data", "-c", config.string(), "-o", data.string()}));
    check(run({"train-detector", "-c", config.string(), "--data", data.string(), "-o", det.string()}));
    check(run({"train-patch", "-c", config.string(), "--data", data.string(), "--detector",
               (det / "detector.bin").string(), "-o", patch.string()}));
  }
  static void check(const Result& r) {
    if (r.code != 0) throw std::runtime_error("setup command failed: " + r.err);
  }
};

const Workspace& ws() {
  static const Workspace w;
  return w;
}

}  // namespace

TEST(CliUsage, MissingSubcommandOrRequiredOption) {
  EXPECT_EQ(run({}).code, cli::kExitUsage);
  const Result r = run({"eval-patch", "--data", "d", "--detector", "x", "-o", "out"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("--patch"), std::string::npos) << r.err;
}

TEST(CliUsage, OutRequired) {
  const Result r = run({"synth-data"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
}

TEST(CliUsage, UnknownConfigKey) {
  const Result r = run({"synth-data", "--set", "dataset.synth.n_trian=3", "--dump-config"});
  EXPECT_EQ(r.code, cli::kExitUsage);
  EXPECT_NE(r.err.find("n_train"), std::string::npos) << r.err;
}

TEST(CliUsage, DumpConfigShowsOverridesAndSeed) {
  const Result r = run({"train-patch", "--data", "d", "--detector", "x", "--set", "patch.epochs=9", "--seed", "17",
                        "--attack", "creating", "--target", "2", "--dump-config"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cfg = config::parse_yaml_text(r.out, "dump");
  EXPECT_EQ(cfg.at("patch").at("epochs"), 9);
  EXPECT_EQ(cfg.at("patch").at("seed"), 17);
  EXPECT_EQ(cfg.at("attack").at("type"), "creating");
  EXPECT_EQ(cfg.at("attack").at("target_class"), 2);
}

TEST(CliRuntime, MissingInputsExitTwo) {
  const fs::path out = fs::temp_directory_path() / "advpatch_cli_missing";
  const Result r = run({"train-detector", "--data", "/nonexistent/dataset", "-o", out.string()});
  EXPECT_EQ(r.code, cli::kExitRuntime);
  EXPECT_NE(r.err.find("/nonexistent/dataset"), std::string::npos) << r.err;
  fs::remove_all(out);
}

TEST(CliPipeline, SynthDataReproducible) {
  const Workspace& w = ws();
  const fs::path again = w.root / "data2";
  ASSERT_EQ(run({"synth-data", "-c", w.config.string(), "-o", again.string()}).code, 0);
  EXPECT_EQ(tree_bytes(w.data, "manifest.json"), tree_bytes(again, "manifest.json"));
  const fs::path other = w.root / "data3";
  ASSERT_EQ(run({"synth-data", "-c", w.config.string(), "--seed", "5", "-o", other.string()}).code, 0);
  EXPECT_NE(tree_bytes(w.data, "manifest.json"), tree_bytes(other, "manifest.json"));
}

TEST(CliPipeline, TrainPatchReproducible) {
  const Workspace& w = ws();
  const fs::path again = w.root / "patch2";
  ASSERT_EQ(run({"train-patch", "-c", w.config.string(), "--data", w.data.string(), "--detector",
                 (w.det / "detector.bin").string(), "-o", again.string()})
                .code,
            0);
  EXPECT_EQ(read_file_bytes(w.patch / "patch.bin"), read_file_bytes(again / "patch.bin"));
  EXPECT_EQ(read_file_bytes(w.patch / "patch.bin.json"), read_file_bytes(again / "patch.bin.json"));
  EXPECT_EQ(history_without_timing(w.patch), history_without_timing(again));
  const auto manifest = json::parse(read_file_bytes(w.patch / "manifest.json"));
  EXPECT_EQ(manifest.at("command"), "train-patch");
  EXPECT_FALSE(manifest.at("outputs").empty());
}

TEST(CliPipeline, EvalAndReportTables) {
  const Workspace& w = ws();
  const fs::path ev = w.root / "eval";
  const Result r = run({"eval-patch", "-c", w.config.string(), "--data", w.data.string(), "--detector",
                        (w.det / "detector.bin").string(), "--patch", (w.patch / "patch.bin").string(), "-o",
                        ev.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("Noise"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("Gray Patch"), std::string::npos) << r.out;
  for (const char* f : {"report.json", "report.txt", "report.csv", "per_class.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(ev / f)) << f;
  const Result merged = run({"report", ev.string(), (ev / "report.json").string(), "-o", (w.root / "rep").string()});
  ASSERT_EQ(merged.code, 0) << merged.err;
  EXPECT_NE(merged.out.find("Gray Patch"), std::string::npos);
  std::ofstream(w.root / "bad.json") << "{not json";
  EXPECT_EQ(run({"report", (w.root / "bad.json").string(), "-o", (w.root / "rep2").string()}).code,
            cli::kExitRuntime);
}

TEST(CliPipeline, ApplyPatchWritesImage) {
  const Workspace& w = ws();
  fs::path image;
  for (const auto& e : fs::recursive_directory_iterator(w.data))
    if (e.path().extension() == ".ppm") {
      image = e.path();
      break;
    }
  ASSERT_FALSE(image.empty());
  const fs::path out = w.root / "apply";
  const fs::path labels = image.parent_path().parent_path() / "labels" / (image.stem().string() + ".txt");
  ASSERT_TRUE(fs::exists(labels));
  const Result r = run({"apply-patch", "-c", w.config.string(), "--image", image.string(), "--labels", labels.string(), "--patch",
                        (w.patch / "patch.bin").string(), "-o", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const Rgb8Image adv = read_ppm(out / "adversarial.ppm");
  const Rgb8Image clean = read_ppm(image);
  EXPECT_EQ(adv.width, clean.width);
  EXPECT_NE(adv.rgb, clean.rgb);
}

TEST(CliPipeline, TransferRejectsSameDetector) {
  const Workspace& w = ws();
  const Result r = run({"transfer-eval", "-c", w.config.string(), "--data", w.data.string(), "--victim",
                        (w.det / "detector.bin").string(), "--patch", (w.patch / "patch.bin").string(), "-o",
                        (w.root / "transfer").string()});
  EXPECT_EQ(r.code, cli::kExitRuntime);
}

TEST(CliPipeline, ColorsimNeedsInputs) {
  const Workspace& w = ws();
  const Result r = run({"colorsim", "-o", (w.root / "cs").string()});
  EXPECT_EQ(r.code, cli::kExitUsage);
}
