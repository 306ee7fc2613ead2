#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pdose/pdose.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pdose;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string scale = "desk";
  std::string out;
  std::string config;
};

json read_overrides(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

runner::ExperimentConfig experiment(const Globals& g, const std::string& id) {
  return runner::make_config(id, g.scale, g.out.empty() ? fs::path("runs") : fs::path(g.out), g.seed, read_overrides(g.config));
}

InputVector parse_vector(const std::string& text) {
  InputVector v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      v.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("cannot parse '" + item + "' as a number");
    }
  }
  if (v.empty()) throw ConfigError("empty input vector");
  return v;
}

/// Writes to `path`, or stdout when empty.
template <class F>
void emit(const std::string& path, F&& write) {
  if (path.empty()) {
    write(std::cout);
    return;
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write " + path);
  write(os);
}

void write_stats(std::ostream& os, const uq::EnsembleStats& st) {
  os << "component,mean,variance\n";
  os.precision(10);
  for (Eigen::Index j = 0; j < st.mean.size(); ++j) os << j << ',' << st.mean(j) << ',' << st.variance(j) << '\n';
}

InputDistribution dataset_distribution(const Dataset& ds) { return ds.generator.at("dist").get<InputDistribution>(); }

int fail(const std::string& stage, const std::string& what) {
  std::cerr << "pdose: error [" << stage << "] " << what << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Proton dose surrogate with Monte Carlo dropout uncertainty"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--scale", g.scale, "Preset scale")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--out", g.out, "Output directory or file");
  app.add_option("--config", g.config, "JSON file merged over the preset");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a dataset");
  std::string gen_kind = "e1";
  std::size_t gen_n = 0, gen_histories = 0;
  gen->add_option("kind", gen_kind, "Experiment whose generator to use (e1..e7)")->required();
  gen->add_option("--n", gen_n, "Sample count (default from preset)");
  gen->add_option("--histories", gen_histories, "Histories per sample for Monte Carlo generators");

  // train
  auto* train = app.add_subcommand("train", "Train a surrogate on a dataset");
  std::string train_data, train_model, train_target = "shape";
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--model", train_model, "Checkpoint to write")->required();
  train->add_option("--target", train_target, "shape or range (1-D data)")->check(CLI::IsMember({"shape", "range"}));

  // predict
  auto* predict = app.add_subcommand("predict", "Dropout-ensemble mean and variance at one input");
  std::string pred_model, pred_input;
  std::size_t pred_passes = 1000;
  predict->add_option("--model", pred_model, "Checkpoint")->required();
  predict->add_option("--input", pred_input, "Comma-separated input vector")->required();
  predict->add_option("--passes", pred_passes, "Dropout passes T");

  // decompose
  auto* decompose = app.add_subcommand("decompose", "Epistemic/parametric variance decomposition");
  std::string dec_model, dec_data, dec_dist;
  std::size_t dec_outer = 100, dec_passes = 100;
  double dec_shift = 0.0;
  decompose->add_option("--model", dec_model, "Checkpoint")->required();
  decompose->add_option("--data", dec_data, "Dataset whose input distribution to use");
  decompose->add_option("--dist", dec_dist, "JSON input distribution {mean, sigma}");
  decompose->add_option("--outer", dec_outer, "Outer input samples S");
  decompose->add_option("--passes", dec_passes, "Dropout passes T");
  decompose->add_option("--shift", dec_shift, "Shift the distribution mean by this many sigmas");

  // coverage
  auto* coverage = app.add_subcommand("coverage", "Empirical coverage of Gaussian intervals on a split");
  std::string cov_model, cov_data, cov_split = "test", cov_levels = "0.5,0.8,0.9,0.95", cov_target = "shape";
  std::size_t cov_passes = 100;
  coverage->add_option("--model", cov_model, "Checkpoint")->required();
  coverage->add_option("--data", cov_data, "Dataset directory")->required();
  coverage->add_option("--split", cov_split, "train, calibration or test")->check(CLI::IsMember({"train", "calibration", "test"}));
  coverage->add_option("--levels", cov_levels, "Comma-separated nominal levels");
  coverage->add_option("--passes", cov_passes, "Dropout passes T");
  coverage->add_option("--target", cov_target, "shape or range")->check(CLI::IsMember({"shape", "range"}));

  // calibrate
  auto* calibrate = app.add_subcommand("calibrate", "Split-conformal calibration on the calibration split");
  std::string cal_model, cal_data, cal_pooling = "global", cal_target = "shape";
  double cal_alpha = 0.1;
  std::size_t cal_passes = 100;
  calibrate->add_option("--model", cal_model, "Checkpoint")->required();
  calibrate->add_option("--data", cal_data, "Dataset directory")->required();
  calibrate->add_option("--alpha", cal_alpha, "Miscoverage level");
  calibrate->add_option("--passes", cal_passes, "Dropout passes T");
  calibrate->add_option("--pooling", cal_pooling, "global or component")->check(CLI::IsMember({"global", "component"}));
  calibrate->add_option("--target", cal_target, "shape or range")->check(CLI::IsMember({"shape", "range"}));

  // run
  auto* run = app.add_subcommand("run", "Run an experiment end to end");
  std::string run_id;
  run->add_option("experiment", run_id, "e1..e7")->required()->check(CLI::IsMember({"e1", "e2", "e3", "e4", "e5", "e6", "e7"}));
  bool run_print = false;
  run->add_flag("--print-config", run_print, "Print the resolved configuration and exit");

  // report
  auto* report = app.add_subcommand("report", "Write index.html for a run directory");

  CLI11_PARSE(app, argc, argv);

  std::string stage = "cli";
  try {
    if (*gen) {
      stage = "gen";
      if (g.out.empty()) throw ConfigError("gen needs --out DIR");
      auto cfg = experiment(g, gen_kind);
      json& data = cfg.params.at("data");
      const std::size_t n = gen_n ? gen_n : data.at("n").get<std::size_t>();
      if (gen_histories) data["generator"]["histories"] = gen_histories;
      Dataset ds;
      if (gen_kind == "e1" || gen_kind == "e2" || gen_kind == "e3" || gen_kind == "e4") {
        ds = generate_1d(n, Generator1D::from_json(data.at("generator")), g.seed);
        split(ds, data.value("split", std::array<double, 3>{0.8, 0.1, 0.1}), split_seed(g.seed, 8));
      } else if (gen_kind == "e7") {
        ds = generate_3d(n, Generator3D::from_json(data.at("generator")), g.seed, gen_kind);
        split(ds, data.at("split").get<std::array<double, 3>>(), split_seed(g.seed, 8));
      } else {
        ds = generate_2d(n, Generator2D::from_json(data.at("generator")), g.seed, gen_kind);
        split(ds, data.at("split").get<std::array<double, 3>>(), split_seed(g.seed, 8));
      }
      save_dataset(ds, g.out);
      std::cout << "wrote " << ds.size() << " samples to " << g.out << '\n';
    } else if (*train) {
      stage = "train";
      const Dataset ds = load_dataset(train_data);
      const bool range = train_target == "range";
      const auto cfg = experiment(g, ds.experiment);
      const auto mcfg = runner::mlp_config(cfg.params.at("model"), ds.input_dim(), range ? 1 : ds.output_dim());
      const auto tc = runner::train_config(cfg.params.at("train"), g.seed);
      const auto& idx = ds.split.empty() ? ds.all_indices() : ds.split.require(SplitPart::Train);
      const auto result = nn::train(ds.training_set(idx, range), mcfg, tc);
      nn::save_checkpoint(result.model, train_model);
      std::ofstream loss(train_model + ".loss.csv", std::ios::trunc);
      result.history.write_csv(loss);
      std::cout << "final loss " << result.history.epoch_loss.back() << ", wrote " << train_model << '\n';
    } else if (*predict) {
      stage = "predict";
      const auto model = nn::load_checkpoint(pred_model);
      const auto st = uq::dropout_ensemble(model, parse_vector(pred_input), pred_passes, g.seed);
      emit(g.out, [&](std::ostream& os) { write_stats(os, st); });
    } else if (*decompose) {
      stage = "decompose";
      const auto model = nn::load_checkpoint(dec_model);
      InputDistribution dist;
      if (!dec_dist.empty())
        dist = json::parse(dec_dist).get<InputDistribution>();
      else if (!dec_data.empty())
        dist = dataset_distribution(load_dataset(dec_data));
      else
        throw ConfigError("decompose needs --data or --dist");
      dist.validate();
      if (dec_shift != 0.0) dist = dist.shifted(dec_shift);
      const auto d = uq::decompose(model, dist, dec_outer, dec_passes, g.seed);
      emit(g.out, [&](std::ostream& os) {
        os << "component,mean,epistemic,parametric,total\n";
        os.precision(10);
        for (Eigen::Index j = 0; j < d.total.size(); ++j)
          os << j << ',' << d.grand_mean(j) << ',' << d.epistemic(j) << ',' << d.parametric(j) << ',' << d.total(j) << '\n';
      });
    } else if (*coverage) {
      stage = "coverage";
      const auto model = nn::load_checkpoint(cov_model);
      const Dataset ds = load_dataset(cov_data);
      const SplitPart part = cov_split == "train" ? SplitPart::Train : cov_split == "calibration" ? SplitPart::Calibration : SplitPart::Test;
      const auto pairs = ds.labelled(ds.split.require(part), cov_target == "range");
      const auto levels = parse_vector(cov_levels);
      const auto rep = uq::coverage(model, std::span<const uq::LabelledInput>(pairs), levels, cov_passes, g.seed);
      emit(g.out, [&](std::ostream& os) { rep.write_csv(os); });
    } else if (*calibrate) {
      stage = "calibrate";
      const auto model = nn::load_checkpoint(cal_model);
      const Dataset ds = load_dataset(cal_data);
      const bool range = cal_target == "range";
      const auto cal = ds.labelled(ds.split.require(SplitPart::Calibration), range);
      const auto pooling = cal_pooling == "global" ? uq::ConformalPooling::Global : uq::ConformalPooling::PerComponent;
      const auto off = uq::conformal_calibrate(model, std::span<const uq::LabelledInput>(cal), cal_alpha, cal_passes, g.seed, pooling);
      json j{{"alpha", cal_alpha}, {"level", off.level}, {"pooling", cal_pooling}, {"half_width", off.half_width}};
      if (!ds.split.test.empty()) {
        const auto test = ds.labelled(ds.split.test, range);
        std::vector<Eigen::VectorXd> means, truths;
        for (std::size_t i = 0; i < test.size(); ++i) {
          means.push_back(uq::dropout_ensemble(model, test[i].x, cal_passes, split_seed(g.seed, 1000 + i)).mean);
          truths.push_back(test[i].d);
        }
        j["test_coverage"] = uq::calibrated_coverage(off, means, truths);
      }
      emit(g.out, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
    } else if (*run) {
      stage = "run";
      const auto cfg = experiment(g, run_id);
      if (run_print) {
        std::cout << cfg.params.dump(2) << '\n';
        return 0;
      }
      const auto rep = runner::run(cfg);
      runner::write_index(cfg.run_dir());
      std::cout << rep.experiment << " (" << rep.scale << ") finished in " << cfg.run_dir().string() << '\n';
      for (const auto& c : rep.checks) std::cout << "  " << (c.passed ? "pass " : "FAIL ") << c.name << ": " << c.detail << '\n';
      for (const auto& [k, v] : rep.timings) std::cout << "  time " << k << " = " << v << " s\n";
    } else if (*report) {
      stage = "report";
      if (g.out.empty()) throw ConfigError("report needs --out DIR");
      std::cout << "wrote " << runner::write_index(g.out).string() << '\n';
    }
  } catch (const runner::StageError& e) {
    std::cerr << "pdose: " << stage << " failed: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    return fail(stage, e.what());
  }
  return 0;
}
