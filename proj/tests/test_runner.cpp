#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pdose/experiments.hpp"

using namespace pdose;
using namespace pdose::runner;
namespace fs = std::filesystem;

namespace {

fs::path temp_root(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "pdose_test_runner" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json tiny_1d() {
  return {{"data", {{"n", 40}, {"generator", {{"voxels", 80}}}}},
          {"model", {{"width", 16}}},
          {"train", {{"epochs", 20}, {"batch_size", 8}}},
          {"uq", {{"passes_shape", 20}, {"passes_range", 40}, {"outer", 6}, {"hist_passes", 5}, {"hist_bins", 8}, {"passes", 20}}}};
}

json tiny_mc(bool three_d) {
  json grid = three_d ? json::array({{{"count", 8}, {"lower", -20}, {"upper", 20}},
                                     {{"count", 8}, {"lower", -20}, {"upper", 20}},
                                     {{"count", 8}, {"lower", -20}, {"upper", 20}}})
                      : json::array({{{"count", 30}, {"lower", -7.5}, {"upper", 7.5}},
                                     {{"count", 8}, {"lower", -5}, {"upper", 5}},
                                     {{"count", 1}, {"lower", -5}, {"upper", 5}}});
  return {{"data", {{"n", 10}, {"generator", {{"grid", grid}, {"histories", 60}}}}},
          {"model", {{"width", 16}}},
          {"train", {{"epochs", 10}, {"batch_size", 4}}},
          {"uq", {{"passes", 10}, {"outer", 4}, {"timing_repeats", 3}}}};
}

void expect_artifacts_exist(const RunReport& rep, const fs::path& dir) {
  EXPECT_FALSE(rep.artifacts.empty());
  for (const auto& a : rep.artifacts) EXPECT_TRUE(fs::exists(dir / a.file)) << a.file;
  EXPECT_TRUE(fs::exists(dir / "report.json"));
}

std::size_t count_ext(const RunReport& rep, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& a : rep.artifacts) n += fs::path(a.file).extension() == ext;
  return n;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(PDOSE_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Presets, ResolveEveryExperiment) {
  for (std::string id : {"e1", "e2", "e3", "e4", "e5", "e6", "e7"})
    for (std::string scale : {"desk", "paper"}) {
      const auto c = make_config(id, scale, "runs", 1);
      EXPECT_TRUE(c.params.contains("model"));
      EXPECT_NO_THROW(mlp_config(c.params.at("model"), 2, 3));
      EXPECT_NO_THROW(train_config(c.params.at("train"), 1));
    }
  const auto paper = preset("e1", "paper");
  EXPECT_EQ(paper["model"]["width"], 512);
  EXPECT_EQ(paper["model"]["hidden_layers"], 3);
  EXPECT_EQ(paper["model"]["dropout_layers"], 3);
  EXPECT_EQ(paper["model"]["p_drop"], 0.05);
  EXPECT_EQ(paper["train"]["learning_rate"], 1e-3);
  EXPECT_EQ(paper["train"]["epochs"], 3000);
  EXPECT_THROW(preset("e8", "desk"), ConfigError);
  EXPECT_THROW(preset("e1", "huge"), ConfigError);
}

TEST(Presets, OverridesMerge) {
  const auto c = make_config("e1", "desk", "runs", 1, {{"model", {{"width", 7}}}});
  EXPECT_EQ(c.params["model"]["width"], 7);
  EXPECT_EQ(c.params["model"]["hidden_layers"], 3);
  EXPECT_THROW(mlp_config(json{{"width", 4}}, 1, 1), ConfigError);
}

TEST(Helpers, SlopeAndInversions) {
  EXPECT_NEAR(loglog_slope({1, 10, 100}, {1, 0.1, 0.01}), -1.0, 1e-12);
  EXPECT_EQ(inversions({5, 4, 4.5, 3}, true), 1u);
  EXPECT_EQ(inversions({1, 2, 1.5, 3}, false), 1u);
  Eigen::VectorXd err(10), var(10);
  err << 0, 0, 0, 0, 0, 0, 0, 0, 0, 9;
  var << 0, 0, 0, 1, 1, 1, 1, 1, 1, 9;
  EXPECT_EQ(colocation(err, var), 1.0);
}

TEST(RunE1, EmitsSixFiguresWithTwinsAndIndex) {
  const auto root = temp_root("e1");
  const auto cfg = make_config("e1", "desk", root, 3, tiny_1d());
  const auto rep = run(cfg);
  expect_artifacts_exist(rep, cfg.run_dir());
  EXPECT_EQ(count_ext(rep, ".svg"), 6u);
  EXPECT_GE(count_ext(rep, ".csv"), 5u);
  EXPECT_NE(slurp(cfg.run_dir() / "range_hist.csv").find("dropout_only_density"), std::string::npos);
  ASSERT_NE(rep.find_check("band_ordering"), nullptr);
  EXPECT_TRUE(rep.find_check("band_ordering")->passed);
  EXPECT_GT(rep.timings.count("data-gen"), 0u);
  EXPECT_GT(rep.timings.count("train-shape"), 0u);

  const auto index = write_index(cfg.run_dir());
  const std::string html = slurp(index);
  for (const auto& a : rep.artifacts) EXPECT_NE(html.find(a.file), std::string::npos) << a.file;
  write_index(cfg.run_dir());
  EXPECT_EQ(slurp(index), html);

  const fs::path victim = cfg.run_dir() / rep.artifacts.front().file;
  fs::remove(victim);
  EXPECT_THROW(write_index(cfg.run_dir()), Error);
}

TEST(RunE1, ReproducibleCsv) {
  const auto a = make_config("e1", "desk", temp_root("e1a"), 5, tiny_1d());
  const auto b = make_config("e1", "desk", temp_root("e1b"), 5, tiny_1d());
  const auto ra = run(a);
  run(b);
  for (const auto& art : ra.artifacts) {
    if (fs::path(art.file).extension() != ".csv") continue;
    EXPECT_EQ(slurp(a.run_dir() / art.file), slurp(b.run_dir() / art.file)) << art.file;
  }
}

TEST(RunE2, ConvergenceTablesAndReportOnlyMode) {
  json o = tiny_1d();
  o["sizes"] = {5, 20, 40};
  auto rep = run(make_config("e2", "desk", temp_root("e2"), 1, o));
  EXPECT_NE(rep.find_check("ood_shape_error_nonincreasing"), nullptr);
  o["sizes"] = {20};
  const auto cfg = make_config("e2", "desk", temp_root("e2single"), 1, o);
  rep = run(cfg);
  EXPECT_TRUE(rep.checks.empty());
  EXPECT_EQ(rep.metrics["mode"], "report-only");
  expect_artifacts_exist(rep, cfg.run_dir());
}

TEST(RunE3, RejectsUnorderedPasses) {
  json o = tiny_1d();
  o["passes_list"] = {10, 100};
  o["repeats"] = 3;
  const auto cfg = make_config("e3", "desk", temp_root("e3"), 1, o);
  const auto rep = run(cfg);
  expect_artifacts_exist(rep, cfg.run_dir());
  EXPECT_NE(rep.find_check("shape_se_slope"), nullptr);
  o["passes_list"] = {100, 10};
  EXPECT_THROW(run(make_config("e3", "desk", temp_root("e3bad"), 1, o)), ConfigError);
}

TEST(RunE4, ZeroDropoutLayersGiveZeroVariance) {
  json o = tiny_1d();
  o["p_grid"] = {0.05, 0.5};
  const auto cfg = make_config("e4", "desk", temp_root("e4"), 1, o);
  const auto rep = run(cfg);
  expect_artifacts_exist(rep, cfg.run_dir());
  ASSERT_NE(rep.find_check("no_dropout_zero_variance"), nullptr);
  EXPECT_TRUE(rep.find_check("no_dropout_zero_variance")->passed);
}

TEST(RunMonteCarlo, E5E6E7PipelinesComplete) {
  const auto root = temp_root("mc");
  for (std::string id : {"e5", "e6"}) {
    const auto cfg = make_config(id, "desk", root, 2, tiny_mc(false));
    const auto rep = run(cfg);
    expect_artifacts_exist(rep, cfg.run_dir());
    EXPECT_NE(rep.find_check("error_uncertainty_colocation"), nullptr);
    if (id == "e6") {
      ASSERT_NE(rep.find_check("zero_input_reproduces_2d_geometry"), nullptr);
      EXPECT_TRUE(rep.find_check("zero_input_reproduces_2d_geometry")->passed);
    }
    EXPECT_TRUE(fs::exists(cfg.run_dir() / "dataset" / "manifest.json"));
  }
  const auto cfg = make_config("e7", "desk", root, 2, tiny_mc(true));
  const auto rep = run(cfg);
  expect_artifacts_exist(rep, cfg.run_dir());
  EXPECT_NE(rep.find_check("speedup_at_least_100x"), nullptr);
  EXPECT_TRUE(fs::exists(cfg.run_dir() / "timing.csv"));

  // A saved dataset can be reused through data.path.
  json o = tiny_mc(false);
  o["data"]["path"] = (root / "e5" / "dataset").string();
  const auto again = make_config("e5", "desk", temp_root("mc_reuse"), 2, o);
  EXPECT_NO_THROW(run(again));
  write_index(root);
}

TEST(StageErrors, CarryStageName) {
  json o = tiny_1d();
  o["data"]["generator"]["spectrum_variance"] = 1e6;
  try {
    run(make_config("e1", "desk", temp_root("stage"), 1, o));
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "data-gen");
  }
}

TEST(Cli, EndToEndSubcommands) {
  const auto root = temp_root("cli");
  const auto log = root / "log.txt";
  const auto cfg = root / "tiny.json";
  std::ofstream(cfg) << tiny_1d().dump();
  const std::string common = "--seed 4 --config " + cfg.string();
  ASSERT_EQ(run_cli("gen e1 --n 30 --out " + (root / "data").string() + " " + common, log), 0) << slurp(log);
  ASSERT_EQ(run_cli("train --data " + (root / "data").string() + " --model " + (root / "m.bin").string() + " " + common, log), 0)
      << slurp(log);
  EXPECT_TRUE(fs::exists(root / "m.bin.loss.csv"));
  ASSERT_EQ(run_cli("train --target range --data " + (root / "data").string() + " --model " + (root / "r.bin").string() + " " + common, log), 0)
      << slurp(log);
  ASSERT_EQ(run_cli("predict --model " + (root / "m.bin").string() + " --input 0.00246,1.75,1,130 --passes 20", log), 0);
  EXPECT_NE(slurp(log).find("component,mean,variance"), std::string::npos);
  ASSERT_EQ(run_cli("decompose --model " + (root / "m.bin").string() + " --data " + (root / "data").string() +
                        " --outer 4 --passes 5 --shift -2",
                    log),
            0)
      << slurp(log);
  EXPECT_NE(slurp(log).find("epistemic,parametric,total"), std::string::npos);
  ASSERT_EQ(run_cli("coverage --model " + (root / "r.bin").string() + " --data " + (root / "data").string() +
                        " --target range --passes 10",
                    log),
            0)
      << slurp(log);
  EXPECT_NE(slurp(log).find("nominal,empirical"), std::string::npos);
  ASSERT_EQ(run_cli("calibrate --model " + (root / "r.bin").string() + " --data " + (root / "data").string() +
                        " --target range --passes 10 --out " + (root / "cal.json").string(),
                    log),
            0)
      << slurp(log);
  const auto cal = json::parse(slurp(root / "cal.json"));
  EXPECT_TRUE(cal.contains("half_width"));
  EXPECT_TRUE(cal.contains("test_coverage"));

  ASSERT_EQ(run_cli("run e1 --out " + (root / "runs").string() + " " + common, log), 0) << slurp(log);
  EXPECT_TRUE(fs::exists(root / "runs" / "e1" / "index.html"));
  ASSERT_EQ(run_cli("report --out " + (root / "runs").string(), log), 0) << slurp(log);
  EXPECT_TRUE(fs::exists(root / "runs" / "index.html"));
  ASSERT_EQ(run_cli("run e4 --print-config", log), 0);
  EXPECT_NE(slurp(log).find("p_grid"), std::string::npos);
}

TEST(Cli, FailuresAreStageTagged) {
  const auto root = temp_root("cli_fail");
  const auto log = root / "log.txt";
  EXPECT_NE(run_cli("train --data " + (root / "missing").string() + " --model " + (root / "m.bin").string(), log), 0);
  EXPECT_NE(slurp(log).find("[train]"), std::string::npos) << slurp(log);
  std::ofstream(root / "bad.json") << R"({"data": {"generator": {"spectrum_variance": 1e6}}})";
  EXPECT_NE(run_cli("run e1 --out " + root.string() + " --config " + (root / "bad.json").string(), log), 0);
  EXPECT_NE(slurp(log).find("[data-gen]"), std::string::npos) << slurp(log);
  EXPECT_NE(run_cli("run e9", log), 0);
  EXPECT_NE(run_cli("--scale huge run e1", log), 0);
  EXPECT_NE(run_cli("report --out " + (root / "nothing").string(), log), 0);
}
