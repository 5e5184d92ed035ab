// Drives the uqseq executable named by UQSEQ_CLI.

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string cli() {
  const char* p = std::getenv("UQSEQ_CLI");
  return p ? p : "";
}

fs::path scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("uqseq_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const auto out = scratch() / "stdout.txt";
  const std::string cmd = cli() + " " + args + " > " + out.string() + " 2> " + (scratch() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream is(out);
  std::ostringstream ss;
  ss << is.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path write_config(const std::string& name, const std::string& variant) {
  const nlohmann::json j{
      {"dataset", {{"kind", "synthetic"}, {"synthetic", {{"train", 100}, {"horizon", 10}}}}},
      {"variant", variant},
      {"architecture",
       {{"encoder_units", 5}, {"decoder_units", 5}, {"meta_units", 3}, {"batch_size", 20},
        {"max_epochs_stage", 2}, {"max_epochs_phase", 2}, {"dropout_runs", 3}}},
      {"evaluation", {{"permutation_resamples", 200}}},
      {"seed", 3}};
  const auto path = scratch() / (name + ".json");
  std::ofstream(path) << j.dump(2);
  return path;
}

// prepare + train + evaluate into <scratch>/<name>.
fs::path pipeline(const std::string& name, const std::string& variant, const std::string& extra = "") {
  const auto cfg = write_config(name, variant);
  const auto out = scratch() / name;
  const std::string common = " --config " + cfg.string() + " --out " + out.string() + " --quiet " + extra;
  EXPECT_EQ(run("prepare" + common).code, 0);
  EXPECT_EQ(run("train" + common).code, 0);
  EXPECT_EQ(run("evaluate" + common).code, 0);
  return out;
}

class ScratchCleanup : public ::testing::Environment {
 public:
  void TearDown() override {
    std::error_code ec;
    fs::remove_all(scratch(), ec);
  }
};

[[maybe_unused]] const auto* const kCleanup = ::testing::AddGlobalTestEnvironment(new ScratchCleanup);

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    if (cli().empty()) GTEST_SKIP() << "UQSEQ_CLI not set";
  }
};

}  // namespace

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("train --variant nope --out " + (scratch() / "x").string()).code, 1);
  EXPECT_EQ(run("help-me --seed abc").code, 1);
}

TEST_F(Cli, DataErrorsExitTwo) {
  EXPECT_EQ(run("train --out " + (scratch() / "never_prepared").string()).code, 2);
  EXPECT_EQ(run("prepare --config " + (scratch() / "missing.json").string()).code, 2);
  const auto locked = scratch() / "locked";
  fs::create_directories(locked);
  std::ofstream(locked / ".lock") << "";
  EXPECT_EQ(run("prepare --quiet --out " + locked.string()).code, 2);
}

TEST_F(Cli, RerunIsByteIdentical) {
  const auto a = pipeline("rerun_a", "jms");
  const auto b = pipeline("rerun_b", "jms");
  for (const char* f : {"report.csv", "report.json", "model.json", "train_log.json", "predictions_test.jsonl"}) {
    ASSERT_TRUE(fs::exists(a / "jms" / f)) << f;
    EXPECT_EQ(slurp(a / "jms" / f), slurp(b / "jms" / f)) << f;
  }
  EXPECT_EQ(slurp(a / "data" / "train.jsonl"), slurp(b / "data" / "train.jsonl"));
}

TEST_F(Cli, TrainLogFollowsBetaSchedule) {
  const auto out = pipeline("schedule", "jma");
  const auto log = nlohmann::json::parse(slurp(out / "jma" / "train_log.json"));
  ASSERT_FALSE(log.empty());
  std::vector<double> betas;
  for (const auto& e : log) {
    const double b = e.at("beta").get<double>();
    if (betas.empty() || betas.back() != b) betas.push_back(b);
  }
  EXPECT_EQ(betas, (std::vector<double>{1.0, 0.5, 0.0}));
}

TEST_F(Cli, ConstantAgainstItselfHasZeroGain) {
  const auto out = pipeline("constant", "constant", "--drift");
  const auto report = nlohmann::json::parse(slurp(out / "constant" / "report.json"));
  const auto& evals = report.at("evaluations");
  ASSERT_EQ(evals.size(), 2u);
  EXPECT_EQ(evals[1].at("condition"), "test_drift");
  for (const auto& e : evals) {
    EXPECT_EQ(e.at("xval").at("gains").at("excess_deficit_average").get<double>(), 0.0);
    EXPECT_EQ(e.at("oracle").at("gains").at("excess_deficit_average").get<double>(), 0.0);
  }
}

TEST_F(Cli, CalibratePlotAndPermtest) {
  const auto out = pipeline("tools", "jms");
  const auto cfg = scratch() / "tools.json";
  const auto cal = run("calibrate --quiet --config " + cfg.string() + " --out " + out.string());
  ASSERT_EQ(cal.code, 0);
  const auto scales = nlohmann::json::parse(cal.out).at("scales");
  EXPECT_EQ(scales.size(), 3u);
  EXPECT_TRUE(fs::exists(out / "jms" / "calibration.json"));

  const auto preds = out / "jms" / "predictions_test.jsonl";
  const auto plot = run("plot --input " + preds.string() + " --out " + (out / "plots").string() + " --end 40");
  ASSERT_EQ(plot.code, 0);
  const auto svg = slurp(out / "plots" / "predictions_test_d0.svg");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_EQ(run("plot --input " + preds.string() + " --begin 30 --end 10").code, 2);

  const auto perm = run("permtest --a " + preds.string() + " --b " + preds.string() + " --resamples 100");
  ASSERT_EQ(perm.code, 0);
  EXPECT_EQ(nlohmann::json::parse(perm.out).at("p_value").get<double>(), 1.0);
}

TEST_F(Cli, EvaluateRejectsForeignCheckpoint) {
  const auto out = pipeline("foreign", "jms");
  const auto cfg = scratch() / "foreign.json";
  const auto r = run("evaluate --quiet --variant jma --config " + cfg.string() + " --out " + out.string() +
                     " --checkpoint " + (out / "jms" / "model.json").string());
  EXPECT_EQ(r.code, 1);
}
