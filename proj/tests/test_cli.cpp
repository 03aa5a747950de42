#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

#include "solidmark/cli.hpp"

namespace fs = std::filesystem;
using namespace solidmark;

namespace {

struct Result {
  int code = 0;
  std::string output;
};

fs::path root() {
  static const fs::path r = [] {
    auto p = fs::temp_directory_path() / "sm_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return r;
}

// Runs the real binary; stdout and stderr are merged.
Result run(const std::string& args) {
  const fs::path log = root() / "last_output.txt";
  const std::string cmd = std::string(SOLIDMARK_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = imgdata::read_text(log);
  return r;
}

std::string p(const std::string& name) { return (root() / name).string(); }

// Every file under dir except run.log, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "run.log") continue;
    out[fs::relative(e.path(), dir).string()] = imgdata::read_text(e.path());
  }
  return out;
}

const std::string kTrainFlags = " --epochs 2 --batch-size 4 --width 4 ";
const std::string kEvalFlags = " --sampling-steps 3 --repeats 2 --subset-size 6 ";

void build_pipeline(const std::string& tag) {
  ASSERT_EQ(run("dataset generate --count 10 --base-size 8 --channels 1 --seed 3 --out " + p(tag + "/raw")).code, 0);
  ASSERT_EQ(run("dataset augment --in " + p(tag + "/raw") + " --thickness 2 --seed 4 --out " + p(tag + "/aug")).code, 0);
  ASSERT_EQ(run("dataset duplicate --in " + p(tag + "/aug") + " --id img000001 --count 3 --out " + p(tag + "/dup")).code, 0);
  ASSERT_EQ(run("train --data " + p(tag + "/dup") + kTrainFlags + " --seed 5 --out " + p(tag + "/model")).code, 0);
  ASSERT_EQ(run("evaluate --data " + p(tag + "/dup") + " --model " + p(tag + "/model") + kEvalFlags +
                " --save-samples 2 --seed 6 --workers 2 --out " + p(tag + "/eval"))
                .code,
            0);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { build_pipeline("main"); }
};

}  // namespace

TEST_F(CliPipeline, WritesExpectedArtifacts) {
  for (const char* f : {"raw/manifest.jsonl", "aug/keymap.json", "dup/dataset.json", "model/model.smck",
                        "model/losses.csv", "model/config.json", "eval/report.csv", "eval/summary.json",
                        "eval/config.json", "eval/run.log"})
    EXPECT_TRUE(fs::exists(root() / "main" / f)) << f;
  int samples = 0;
  for (const auto& e : fs::directory_iterator(root() / "main/eval/samples")) samples += e.is_regular_file();
  EXPECT_EQ(samples, 2);
  const auto summary = cli::read_json_file(root() / "main/eval/summary.json");
  EXPECT_EQ(summary.at("images"), 6);
  EXPECT_EQ(summary.at("repeats"), 2);
}

TEST_F(CliPipeline, AugmentedDatasetRoundTrips) {
  const auto raw = imgdata::load_dataset(root() / "main/raw");
  imgdata::SyntheticConfig sc;
  sc.count = 10;
  sc.base_size = 8;
  sc.channels = 1;
  sc.seed = 3;
  EXPECT_EQ(raw, imgdata::gen_synthetic_dataset(sc));
  PatternSpec spec;
  spec.thickness = 2;
  EXPECT_EQ(imgdata::load_dataset(root() / "main/aug"), imgdata::augment_dataset(raw, spec, 4));
  const auto dup = imgdata::load_dataset(root() / "main/dup");
  EXPECT_EQ(dup.size(), 12u);
  EXPECT_EQ(imgdata::ids_with_provenance(dup, "img000001").size(), 3u);
}

TEST_F(CliPipeline, ReportRecountAgrees) {
  const auto r = run("report --in " + p("main/eval"));
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("images 6"), std::string::npos);
}

TEST_F(CliPipeline, ReportDetectsTamperedSummary) {
  fs::create_directories(root() / "tampered");
  fs::copy_file(root() / "main/eval/report.csv", root() / "tampered/report.csv", fs::copy_options::overwrite_existing);
  auto summary = cli::read_json_file(root() / "main/eval/summary.json");
  summary["thresholds"][0]["count"] = summary["thresholds"][0]["count"].get<int>() + 1;
  cli::write_file(root() / "tampered/summary.json", summary.dump(2));
  const auto r = run("report --in " + p("tampered"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("disagree"), std::string::npos);
}

TEST_F(CliPipeline, RerunIsByteIdentical) {
  const auto first = snapshot(root() / "main");
  fs::remove_all(root() / "again");
  build_pipeline("again");
  // configs name their input directories; rerun into the same paths instead
  fs::remove_all(root() / "main");
  build_pipeline("main");
  const auto second = snapshot(root() / "main");
  ASSERT_EQ(first.size(), second.size());
  for (const auto& [name, bytes] : first) {
    ASSERT_TRUE(second.count(name)) << name;
    EXPECT_TRUE(second.at(name) == bytes) << name << " differs";
  }
  // outputs that do not embed paths match across directories too
  EXPECT_EQ(imgdata::read_text(root() / "again/eval/report.csv"), imgdata::read_text(root() / "main/eval/report.csv"));
}

TEST_F(CliPipeline, ResumeMatchesUninterruptedTraining) {
  const std::string data = " --data " + p("main/dup") + " --batch-size 4 --width 4 --seed 5";
  ASSERT_EQ(run("train" + data + " --epochs 3 --out " + p("full")).code, 0);
  ASSERT_EQ(run("train" + data + " --epochs 1 --out " + p("part")).code, 0);
  const auto r = run("train" + data + " --epochs 3 --resume --out " + p("part"));
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("resuming at epoch 1"), std::string::npos);
  EXPECT_TRUE(imgdata::read_text(root() / "full/model.smck") == imgdata::read_text(root() / "part/model.smck"));
  EXPECT_EQ(imgdata::read_text(root() / "full/losses.csv"), imgdata::read_text(root() / "part/losses.csv"));

  const auto bad = run("train" + data + " --epochs 4 --lr 0.5 --resume --out " + p("part"));
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.output.find("cannot resume"), std::string::npos) << bad.output;
}

TEST_F(CliPipeline, MissingKeymapFailsFast) {
  fs::remove_all(root() / "nokeys");
  fs::copy(root() / "main/dup", root() / "nokeys", fs::copy_options::recursive);
  fs::remove(root() / "nokeys/keymap.json");
  const auto r = run("evaluate --data " + p("nokeys") + " --model " + p("main/model") + " --out " + p("nokeys_eval"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("keymap absent"), std::string::npos) << r.output;
}

TEST(Cli, InvalidThicknessIsReported) {
  ASSERT_EQ(run("dataset generate --count 2 --base-size 8 --out " + p("thin/raw")).code, 0);
  const auto r = run("dataset augment --in " + p("thin/raw") + " --thickness 0 --out " + p("thin/aug"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("--thickness must be >= 1, got 0"), std::string::npos) << r.output;
}

TEST(Cli, UnknownExperimentListsNames) {
  const auto r = run("experiment foo --out " + p("foo"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("unknown experiment 'foo'"), std::string::npos) << r.output;
  for (const auto& name : cli::experiment_names()) EXPECT_NE(r.output.find(name), std::string::npos) << name;
}

TEST(Cli, ConfigFileAndFlagPrecedence) {
  cli::write_file(root() / "gen.json", R"({"count": 7, "base-size": 8, "channels": 1})");
  ASSERT_EQ(run("dataset generate --config " + p("gen.json") + " --out " + p("cfg_a")).code, 0);
  EXPECT_EQ(imgdata::load_dataset(root() / "cfg_a").size(), 7u);
  ASSERT_EQ(run("dataset generate --config " + p("gen.json") + " --count 4 --out " + p("cfg_b")).code, 0);
  EXPECT_EQ(imgdata::load_dataset(root() / "cfg_b").size(), 4u);
  cli::write_file(root() / "bad.json", R"({"cout": 7})");
  const auto r = run("dataset generate --config " + p("bad.json") + " --out " + p("cfg_c"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("cout"), std::string::npos) << r.output;
}

TEST(Cli, CalibrationExperimentWritesOutputs) {
  const auto r = run("experiment calibrate --queries 300 --seed 2 --out " + p("calib"));
  EXPECT_EQ(r.code, 0) << r.output;
  for (const char* f : {"summary.json", "results.csv", "plot.csv", "config.json"})
    EXPECT_TRUE(fs::exists(root() / "calib" / f)) << f;
  const auto s = cli::read_json_file(root() / "calib/summary.json");
  EXPECT_EQ(s.at("arms")[0].at("n"), 300);
}

TEST(Cli, InProcessEntryPoint) {
  std::ostringstream out, err;
  const char* argv[] = {"solidmark", "--version"};
  const int code = cli::run_cli(2, argv, out, err);
  EXPECT_EQ(code, 0);
  EXPECT_NE((out.str() + err.str()).find(cli::kVersion), std::string::npos);
}
