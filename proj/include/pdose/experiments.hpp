#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdose/analytic1d.hpp"
#include "pdose/checkpoint.hpp"
#include "pdose/dataset.hpp"
#include "pdose/error.hpp"
#include "pdose/mlp.hpp"
#include "pdose/phantom.hpp"
#include "pdose/random.hpp"
#include "pdose/report.hpp"
#include "pdose/svg.hpp"
#include "pdose/train.hpp"
#include "pdose/transport.hpp"
#include "pdose/uq.hpp"

namespace pdose::runner {

using Model = nn::Mlp<float>;

struct ExperimentConfig {
  std::string id;              // e1 .. e7
  std::string scale = "desk";  // desk | paper
  fs::path out = "runs";
  std::uint64_t seed = 0;
  json params;

  fs::path run_dir() const { return out / id; }
};

// ---- presets ----------------------------------------------------------------

inline bool is_paper(const std::string& scale) {
  if (scale == "paper") return true;
  if (scale == "desk") return false;
  throw ConfigError("unknown scale '" + scale + "' (expected desk or paper)");
}

inline json model_preset(bool paper, std::size_t desk_width = 128) {
  return {{"width", paper ? 512 : desk_width}, {"hidden_layers", 3}, {"dropout_layers", 3}, {"p_drop", 0.05},
          {"order", "dropout_first"}, {"output_floor", nullptr}};
}

inline json train_preset(bool paper, std::size_t desk_epochs, std::size_t batch) {
  return {{"learning_rate", 1e-3}, {"epochs", paper ? 3000 : desk_epochs}, {"batch_size", batch},
          {"weight_decay", 0.01}, {"standardize_inputs", true}, {"init_output_bias", true}};
}

inline json preset_1d(bool paper) {
  Generator1D g;
  return {{"data", {{"n", paper ? 1000 : 200}, {"generator", g.to_json()}}},
          {"model", model_preset(paper)},
          {"train", train_preset(paper, 500, 32)},
          {"uq", {{"passes_shape", 1000}, {"passes_range", paper ? 100000 : 10000}, {"outer", paper ? 1000 : 200},
                  {"hist_passes", 50}, {"hist_bins", 40}}}};
}

inline json preset_2d(bool paper, bool four_d) {
  Generator2D g;
  g.dist = four_d ? distributions::slab_and_beam() : distributions::slab_shift();
  if (paper) {
    g.grid = VoxelGrid({{1500, -7.5, 7.5}, {200, -5.0, 5.0}, {1, -5.0, 5.0}});
    g.histories = 250000;
  }
  json model = model_preset(paper);
  model["output_floor"] = -10.0;
  return {{"data", {{"n", paper && four_d ? 100 : 50}, {"split", {0.8, 0.1, 0.1}}, {"path", nullptr},
                    {"generator", g.to_json()}}},
          {"model", model},
          {"train", train_preset(paper, 500, 8)},
          {"uq", {{"passes", paper ? 1000 : 200}, {"outer", paper ? 1000 : 100}}}};
}

inline json preset_3d(bool paper) {
  Generator3D g;
  if (paper) {
    g.grid = VoxelGrid({{60, -20.0, 20.0}, {60, -20.0, 20.0}, {60, -20.0, 20.0}});
    g.histories = 1000000;
  }
  json model = model_preset(paper);
  model["output_floor"] = -10.0;
  return {{"data", {{"n", 100}, {"split", {0.8, 0.1, 0.1}}, {"path", nullptr}, {"generator", g.to_json()}}},
          {"model", model},
          {"train", train_preset(paper, 300, 16)},
          {"uq", {{"passes", paper ? 1000 : 100}, {"outer", paper ? 1000 : 50}, {"timing_repeats", 20}}},
          {"paper_timing", {{"mc_seconds", 344.2}, {"surrogate_seconds", 2.6735e-2}, {"reported_speedup", 12000}}}};
}

/// Complete parameter set for experiment `id` at `scale`.
inline json preset(const std::string& id, const std::string& scale) {
  const bool paper = is_paper(scale);
  if (id == "e1") return preset_1d(paper);
  if (id == "e2") {
    json p = preset_1d(paper);
    p["sizes"] = {25, 50, 100, 200, 400};
    p["shift_sigmas"] = -2.0;
    if (!paper) p["uq"]["passes_range"] = 2000;
    return p;
  }
  if (id == "e3") {
    json p = preset_1d(paper);
    p["passes_list"] = {10, 100, 1000, 10000};
    p["repeats"] = paper ? 50 : 20;
    return p;
  }
  if (id == "e4") {
    json p = preset_1d(paper);
    if (!paper) {
      p["model"]["width"] = 64;
      p["train"]["epochs"] = 300;
    }
    p["total_layers"] = 6;
    p["p_grid"] = {0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.67, 0.8};
    p["uq"]["passes"] = 1000;
    return p;
  }
  if (id == "e5") return preset_2d(paper, false);
  if (id == "e6") return preset_2d(paper, true);
  if (id == "e7") return preset_3d(paper);
  throw ConfigError("unknown experiment '" + id + "' (expected e1..e7)");
}

/// Preset with `overrides` merged in (JSON merge patch).
inline ExperimentConfig make_config(const std::string& id, const std::string& scale, const fs::path& out,
                                    std::uint64_t seed, const json& overrides = json::object()) {
  ExperimentConfig c;
  c.id = id;
  c.scale = scale;
  c.out = out;
  c.seed = seed;
  c.params = preset(id, scale);
  if (!overrides.is_null() && !overrides.empty()) {
    if (!overrides.is_object()) throw ConfigError("config overrides must be a JSON object");
    c.params.merge_patch(overrides);
  }
  return c;
}

// ---- configuration decoding -------------------------------------------------

template <class T>
T param(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline nn::MlpConfig mlp_config(const json& m, std::size_t n_in, std::size_t n_out) {
  nn::MlpConfig c;
  c.n_in = n_in;
  c.n_out = n_out;
  c.width = param<std::size_t>(m, "width");
  c.hidden_layers = param<std::size_t>(m, "hidden_layers");
  c.dropout_layers = param<std::size_t>(m, "dropout_layers");
  c.p_drop = param<double>(m, "p_drop");
  const std::string order = m.value("order", std::string("dropout_first"));
  if (order == "dropout_first")
    c.order = nn::BlockOrder::DropoutFirst;
  else if (order == "hidden_first")
    c.order = nn::BlockOrder::HiddenFirst;
  else
    throw ConfigError("model.order must be dropout_first or hidden_first");
  if (m.contains("output_floor") && !m.at("output_floor").is_null()) c.output_floor = m.at("output_floor").get<double>();
  try {
    c.validate();
  } catch (const PreconditionError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline nn::TrainConfig train_config(const json& t, std::uint64_t seed) {
  nn::TrainConfig c;
  c.learning_rate = param<double>(t, "learning_rate");
  c.epochs = param<std::size_t>(t, "epochs");
  c.batch_size = param<std::size_t>(t, "batch_size");
  c.weight_decay = param<double>(t, "weight_decay");
  c.standardize_inputs = t.value("standardize_inputs", true);
  c.init_output_bias = t.value("init_output_bias", true);
  c.seed = seed;
  return c;
}

// ---- numeric helpers ----------------------------------------------------------

inline std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw PreconditionError("loglog_slope: need two or more points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += std::log(x[i]), my += std::log(y[i]);
  mx /= x.size(), my /= y.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Number of adjacent pairs where v increases (for non-increase) or
/// decreases (for non-decrease).
inline std::size_t inversions(const std::vector<double>& v, bool expect_decreasing) {
  std::size_t n = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (expect_decreasing ? v[i] > v[i - 1] : v[i] < v[i - 1]) ++n;
  return n;
}

inline std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// Mean of |mean - truth| / truth over depths shallower than `fraction` of
/// the distal edge.
inline double proximal_relative_error(const Eigen::VectorXd& mean, const analytic::DoseCurve& truth, double edge,
                                      double fraction = 0.9) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < truth.depth.size(); ++k)
    if (truth.depth[k] < fraction * edge && truth.dose[k] > 0.0) {
      s += std::abs(mean(static_cast<Eigen::Index>(k)) - truth.dose[k]) / truth.dose[k];
      ++n;
    }
  if (n == 0) throw PreconditionError("no depths proximal to the distal edge");
  return s / static_cast<double>(n);
}

inline double relative_l2(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return (a - b).norm() / b.norm(); }

// ---- 1-D pipeline pieces ------------------------------------------------------

struct OneDSetup {
  Generator1D generator;
  std::size_t n = 200;
  json model;
  json train;

  nn::MlpConfig shape_config() const { return mlp_config(model, 4, generator.voxels); }
  nn::MlpConfig range_config() const { return mlp_config(model, 4, 1); }
};

inline OneDSetup one_d_setup(const json& p) {
  OneDSetup s;
  s.generator = Generator1D::from_json(p.at("data").at("generator"));
  s.n = param<std::size_t>(p.at("data"), "n");
  s.model = p.at("model");
  s.train = p.at("train");
  return s;
}

inline analytic::DoseCurve analytic_curve(const Generator1D& g, const InputVector& x) {
  return analytic::depth_dose_spectrum(bragg_kleeman_from_input(x), analytic::DepthGrid(g.depth, g.voxels),
                                       g.spectrum_variance, g.nodes);
}

inline nn::TrainResult<float> train_on(const Dataset& ds, const std::vector<std::size_t>& idx, const nn::MlpConfig& cfg,
                                       const nn::TrainConfig& tc, bool range = false) {
  return nn::train(ds.training_set(idx, range), cfg, tc);
}

inline void emit_loss(RunWriter& w, const std::string& stem, const nn::LossHistory& h, const std::string& what) {
  std::vector<double> epochs(h.epoch_loss.size());
  std::iota(epochs.begin(), epochs.end(), 1.0);
  CsvTable t;
  t.add("epoch", epochs).add("loss", h.epoch_loss);
  w.csv(stem + ".csv", t, "Training loss per epoch, " + what);
  plot::LineChart c{"Training loss, " + what, "epoch", "mean squared error", false, true, {}, {{"loss", epochs, h.epoch_loss}}};
  w.chart(stem + ".svg", c, "Training loss history, " + what);
}

/// True when the average loss over the last tenth of epochs is below the
/// first tenth.
inline bool loss_trending_down(const nn::LossHistory& h) {
  const auto& l = h.epoch_loss;
  const std::size_t k = std::max<std::size_t>(1, l.size() / 10);
  const double head = std::accumulate(l.begin(), l.begin() + static_cast<long>(k), 0.0) / k;
  const double tail = std::accumulate(l.end() - static_cast<long>(k), l.end(), 0.0) / k;
  return tail < head;
}

// ---- e1 ----------------------------------------------------------------------

inline RunReport run_e1(const ExperimentConfig& cfg) {
  RunReport rep{cfg.id, cfg.scale, cfg.seed, cfg.params};
  RunWriter w(cfg.run_dir(), rep);
  const auto setup = one_d_setup(cfg.params);
  const json& uqp = cfg.params.at("uq");
  const auto passes_shape = param<std::size_t>(uqp, "passes_shape");
  const auto passes_range = param<std::size_t>(uqp, "passes_range");
  const auto outer = param<std::size_t>(uqp, "outer");
  const auto hist_passes = param<std::size_t>(uqp, "hist_passes");
  const auto hist_bins = param<std::size_t>(uqp, "hist_bins");
  const auto& dist = setup.generator.dist;

  const Dataset ds = w.stage("data-gen", [&] { return generate_1d(setup.n, setup.generator, split_seed(cfg.seed, 1)); });
  const auto idx = ds.all_indices();
  const auto shape = w.stage("train-shape", [&] {
    return train_on(ds, idx, setup.shape_config(), train_config(setup.train, split_seed(cfg.seed, 2)));
  });
  const auto range = w.stage("train-range", [&] {
    return train_on(ds, idx, setup.range_config(), train_config(setup.train, split_seed(cfg.seed, 3)), true);
  });
  emit_loss(w, "loss_shape", shape.history, "shape model");
  emit_loss(w, "loss_range", range.history, "range model");

  const InputVector xbar = dist.mean;
  const auto truth = analytic_curve(setup.generator, xbar);
  const double edge = analytic::distal_edge(truth, setup.generator.edge_fraction);
  const Eigen::VectorXd truth_v = Eigen::Map<const Eigen::VectorXd>(truth.dose.data(), static_cast<Eigen::Index>(truth.dose.size()));

  const auto t_inf = std::chrono::steady_clock::now();
  const auto st = w.stage("inference-shape", [&] { return uq::dropout_ensemble(shape.model, xbar, passes_shape, split_seed(cfg.seed, 4)); });
  rep.timings["inference_per_pass_shape"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_inf).count() / static_cast<double>(passes_shape);
  const auto sr = w.stage("inference-range", [&] { return uq::dropout_ensemble(range.model, xbar, passes_range, split_seed(cfg.seed, 5)); });

  // Mean curve with bands.
  const auto sd = st.stddev();
  CsvTable bands;
  std::vector<double> m2, m1, p1, p2;
  bool ordered = true;
  for (Eigen::Index k = 0; k < st.mean.size(); ++k) {
    m2.push_back(st.mean(k) - 2 * sd(k));
    m1.push_back(st.mean(k) - sd(k));
    p1.push_back(st.mean(k) + sd(k));
    p2.push_back(st.mean(k) + 2 * sd(k));
    ordered = ordered && m2.back() <= m1.back() && m1.back() <= st.mean(k) && st.mean(k) <= p1.back() && p1.back() <= p2.back();
  }
  bands.add("depth_cm", truth.depth).add("exact", truth.dose).add("mean", to_vec(st.mean)).add("minus_2sd", m2)
      .add("minus_1sd", m1).add("plus_1sd", p1).add("plus_2sd", p2);
  w.csv("shape_bands.csv", bands, "Shape-model ensemble mean with one and two standard deviation bands at the mean input");
  plot::LineChart bc{"Shape model at mean input", "depth (cm)", "dose", false, false,
                     {{"+-2 sd", truth.depth, m2, p2, "#1f77b4", 0.15}, {"+-1 sd", truth.depth, m1, p1, "#1f77b4", 0.3}},
                     {{"ensemble mean", truth.depth, to_vec(st.mean), "#1f77b4"}, {"exact", truth.depth, truth.dose, "#d62728", true}}};
  w.chart("shape_bands.svg", bc, "Predicted depth-dose curve with shaded uncertainty bands");

  // Range distribution: pooled passes over sampled inputs against exact edges.
  const auto inputs = sample_inputs(dist, outer, split_seed(cfg.seed, 6));
  std::vector<double> predicted, exact;
  w.stage("range-distribution", [&] {
    for (std::size_t s = 0; s < inputs.size(); ++s) {
      const auto out = range.model.sample_passes(inputs[s], 0, hist_passes, split_seed(cfg.seed, 1000 + s));
      for (Eigen::Index t = 0; t < out.cols(); ++t) predicted.push_back(out(0, t));
      exact.push_back(analytic::distal_edge(analytic_curve(setup.generator, inputs[s]), setup.generator.edge_fraction));
    }
  });
  // Dropout-only passes at the mean input, same seed as the inference-range stage.
  const Eigen::MatrixXd at_mean = uq::ensemble_outputs(range.model, xbar, passes_range, split_seed(cfg.seed, 5));
  const std::vector<double> dropout_only(at_mean.data(), at_mean.data() + at_mean.size());
  const double pmean = std::accumulate(predicted.begin(), predicted.end(), 0.0) / predicted.size();
  double pvar = 0.0;
  for (double v : predicted) pvar += (v - pmean) * (v - pmean);
  pvar /= static_cast<double>(predicted.size() - 1);
  const double emean = std::accumulate(exact.begin(), exact.end(), 0.0) / exact.size();
  double evar = 0.0;
  for (double v : exact) evar += (v - emean) * (v - emean);
  evar /= static_cast<double>(exact.size() - 1);
  double lo = std::min({*std::min_element(predicted.begin(), predicted.end()), *std::min_element(exact.begin(), exact.end()),
                        *std::min_element(dropout_only.begin(), dropout_only.end())});
  double hi = std::max({*std::max_element(predicted.begin(), predicted.end()), *std::max_element(exact.begin(), exact.end()),
                        *std::max_element(dropout_only.begin(), dropout_only.end())});
  if (!(hi > lo)) hi = lo + 1e-6;
  std::vector<double> edges(hist_bins + 1), centres(hist_bins), dens_pred(hist_bins, 0.0), dens_exact(hist_bins, 0.0),
      dens_dropout(hist_bins, 0.0), gauss(hist_bins);
  const double bw = (hi - lo) / static_cast<double>(hist_bins);
  for (std::size_t b = 0; b <= hist_bins; ++b) edges[b] = lo + bw * static_cast<double>(b);
  auto bin_of = [&](double v) { return std::min(hist_bins - 1, static_cast<std::size_t>((v - lo) / bw)); };
  for (double v : predicted) dens_pred[bin_of(v)] += 1.0 / (predicted.size() * bw);
  for (double v : exact) dens_exact[bin_of(v)] += 1.0 / (exact.size() * bw);
  for (double v : dropout_only) dens_dropout[bin_of(v)] += 1.0 / (dropout_only.size() * bw);
  for (std::size_t b = 0; b < hist_bins; ++b) {
    centres[b] = lo + bw * (b + 0.5);
    gauss[b] = std::exp(-0.5 * (centres[b] - pmean) * (centres[b] - pmean) / pvar) / std::sqrt(2 * M_PI * pvar);
  }
  CsvTable hist;
  hist.add("bin_centre_cm", centres).add("predicted_density", dens_pred).add("exact_density", dens_exact).add("dropout_only_density", dens_dropout).add("gaussian_fit", gauss);
  w.csv("range_hist.csv", hist, "Distribution of predicted distal-edge ranges pooled over the input distribution, dropout-only at the mean input, and exact ranges");
  plot::LineChart hc{"Range model distribution", "distal edge (cm)", "density", false, false, {},
                     {plot::step_series("surrogate", edges, dens_pred, "#1f77b4"),
                      plot::step_series("exact", edges, dens_exact, "#d62728"),
                      plot::step_series("dropout only, mean input", edges, dens_dropout, "#9467bd"),
                      {"gaussian fit", centres, gauss, "#2ca02c", true},
                      {"deterministic range", {edge, edge}, {0.0, *std::max_element(dens_pred.begin(), dens_pred.end())}, "#000000", true}}};
  w.chart("range_hist.svg", hc, "Histogram of predicted ranges with the exact distribution, deterministic range and Gaussian fit");

  // Pointwise errors at the mean input.
  const auto err = uq::normalised_error_from_stats(st, truth_v);
  CsvTable et;
  et.add("depth_cm", truth.depth).add("absolute_error", to_vec(err.absolute)).add("normalised_error", to_vec(err.normalised));
  w.csv("shape_errors.csv", et, "Absolute and normalised pointwise error of the shape model at the mean input");
  plot::LineChart ea{"Absolute error", "depth (cm)", "|d - mean|", false, false, {}, {{"absolute", truth.depth, to_vec(err.absolute)}}};
  w.chart("error_absolute.svg", ea, "Absolute pointwise error of the shape model");
  plot::LineChart en{"Normalised error", "depth (cm)", "|d - mean| / sd", false, false, {}, {{"normalised", truth.depth, to_vec(err.normalised)}}};
  w.chart("error_normalised.svg", en, "Normalised pointwise error of the shape model");

  const double rel = proximal_relative_error(st.mean, truth, edge);
  auto& m = rep.metrics;
  m["shape_proximal_relative_error"] = rel;
  m["shape_max_variance"] = st.variance.maxCoeff();
  m["range_exact_at_mean"] = edge;
  m["range_mean_at_mean"] = sr.mean(0);
  m["range_sd_at_mean"] = std::sqrt(sr.variance(0));
  m["range_predicted_mean"] = pmean;
  m["range_predicted_sd"] = std::sqrt(pvar);
  m["range_exact_mean"] = emean;
  m["range_exact_sd"] = std::sqrt(evar);
  m["loss_shape_first"] = shape.history.epoch_loss.front();
  m["loss_shape_last"] = shape.history.epoch_loss.back();
  m["loss_range_first"] = range.history.epoch_loss.front();
  m["loss_range_last"] = range.history.epoch_loss.back();
  w.check("band_ordering", ordered, "mean-2sd <= mean-sd <= mean <= mean+sd <= mean+2sd at every depth");
  w.check("shape_proximal_error_below_5pct", rel < 0.05, "mean relative error proximal to 0.9 x edge = " + fmt(rel));
  w.check("shape_loss_drops_10x", shape.history.epoch_loss.back() < shape.history.epoch_loss.front() / 10,
          fmt(shape.history.epoch_loss.front()) + " -> " + fmt(shape.history.epoch_loss.back()));
  w.check("range_loss_drops_10x", range.history.epoch_loss.back() < range.history.epoch_loss.front() / 10,
          fmt(range.history.epoch_loss.front()) + " -> " + fmt(range.history.epoch_loss.back()));
  w.finish();
  return rep;
}

// ---- e2 ----------------------------------------------------------------------

inline RunReport run_e2(const ExperimentConfig& cfg) {
  RunReport rep{cfg.id, cfg.scale, cfg.seed, cfg.params};
  RunWriter w(cfg.run_dir(), rep);
  const auto setup = one_d_setup(cfg.params);
  const auto sizes = param<std::vector<std::size_t>>(cfg.params, "sizes");
  if (sizes.empty()) throw ConfigError("sizes must not be empty");
  const double k = param<double>(cfg.params, "shift_sigmas");
  const auto passes_shape = param<std::size_t>(cfg.params.at("uq"), "passes_shape");
  const auto passes_range = param<std::size_t>(cfg.params.at("uq"), "passes_range");
  const auto& dist = setup.generator.dist;
  const InputVector x_id = dist.mean;
  const InputVector x_ood = dist.shifted(k).mean;
  const auto truth_id = analytic_curve(setup.generator, x_id);
  const auto truth_ood = analytic_curve(setup.generator, x_ood);
  const double edge_id = analytic::distal_edge(truth_id, setup.generator.edge_fraction);
  const double edge_ood = analytic::distal_edge(truth_ood, setup.generator.edge_fraction);

  const std::size_t n_max = *std::max_element(sizes.begin(), sizes.end());
  // Sample i is seeded independently of N, so smaller sets are prefixes.
  const Dataset full = w.stage("data-gen", [&] { return generate_1d(n_max, setup.generator, split_seed(cfg.seed, 1)); });

  std::vector<double> ns, s_err_id, s_var_id, s_err_ood, s_var_ood, r_mean_id, r_var_id, r_err_id, r_mean_ood, r_var_ood,
      r_err_ood;
  std::vector<Eigen::VectorXd> means_id;
  CsvTable curves;
  curves.add("depth_cm", truth_id.depth).add("exact_id", truth_id.dose).add("exact_ood", truth_ood.dose);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const std::size_t n = sizes[i];
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::string tag = "N" + std::to_string(n);
    json train = setup.train;
    train["batch_size"] = std::min(param<std::size_t>(train, "batch_size"), n);
    const auto shape = w.stage("train-shape-" + tag, [&] {
      return train_on(full, idx, setup.shape_config(), train_config(train, split_seed(cfg.seed, 2)));
    });
    const auto range = w.stage("train-range-" + tag, [&] {
      return train_on(full, idx, setup.range_config(), train_config(train, split_seed(cfg.seed, 3)), true);
    });
    w.stage("inference-" + tag, [&] {
      const auto a = uq::dropout_ensemble(shape.model, x_id, passes_shape, split_seed(cfg.seed, 4));
      const auto b = uq::dropout_ensemble(shape.model, x_ood, passes_shape, split_seed(cfg.seed, 5));
      const auto c = uq::dropout_ensemble(range.model, x_id, passes_range, split_seed(cfg.seed, 6));
      const auto d = uq::dropout_ensemble(range.model, x_ood, passes_range, split_seed(cfg.seed, 7));
      ns.push_back(static_cast<double>(n));
      s_err_id.push_back(proximal_relative_error(a.mean, truth_id, edge_id));
      s_var_id.push_back(a.variance.mean());
      s_err_ood.push_back(proximal_relative_error(b.mean, truth_ood, edge_ood));
      s_var_ood.push_back(b.variance.mean());
      r_mean_id.push_back(c.mean(0));
      r_var_id.push_back(c.variance(0));
      r_err_id.push_back(std::abs(c.mean(0) - edge_id));
      r_mean_ood.push_back(d.mean(0));
      r_var_ood.push_back(d.variance(0));
      r_err_ood.push_back(std::abs(d.mean(0) - edge_ood));
      means_id.push_back(a.mean);
      curves.add("mean_id_" + tag, to_vec(a.mean)).add("var_id_" + tag, to_vec(a.variance));
      curves.add("mean_ood_" + tag, to_vec(b.mean)).add("var_ood_" + tag, to_vec(b.variance));
    });
  }
  CsvTable st;
  st.add("N", ns).add("rel_error_id", s_err_id).add("mean_var_id", s_var_id).add("rel_error_ood", s_err_ood).add("mean_var_ood", s_var_ood);
  w.csv("convergence_shape.csv", st, "Shape model error and mean variance against training-set size, in and out of distribution");
  CsvTable rt;
  rt.add("N", ns).add("mean_id", r_mean_id).add("var_id", r_var_id).add("abs_error_id", r_err_id).add("mean_ood", r_mean_ood)
      .add("var_ood", r_var_ood).add("abs_error_ood", r_err_ood);
  w.csv("convergence_range.csv", rt, "Range model mean, variance and error against training-set size, in and out of distribution");
  w.csv("curves_by_N.csv", curves, "Shape-model mean and variance curves per training-set size");
  w.chart("convergence_shape.svg",
          plot::LineChart{"Shape model convergence in N", "N", "mean relative error", true, true, {},
                          {{"in distribution", ns, s_err_id, "#1f77b4"}, {"shifted", ns, s_err_ood, "#d62728"}}},
          "Shape-model error against N");
  w.chart("convergence_range.svg",
          plot::LineChart{"Range model convergence in N", "N", "|mean - exact| (cm)", true, true, {},
                          {{"in distribution", ns, r_err_id, "#1f77b4"}, {"shifted", ns, r_err_ood, "#d62728"}}},
          "Range-model error against N");
  w.chart("variance_range.svg",
          plot::LineChart{"Range model variance in N", "N", "variance (cm^2)", true, true, {},
                          {{"in distribution", ns, r_var_id, "#1f77b4"}, {"shifted", ns, r_var_ood, "#d62728"}}},
          "Range-model variance against N");
  rep.metrics["sizes"] = ns;
  rep.metrics["range_exact_id"] = edge_id;
  rep.metrics["range_exact_ood"] = edge_ood;
  if (sizes.size() == 1) {
    rep.metrics["mode"] = "report-only";
  } else {
    double max_dev_shape = 0.0, max_dev_range = 0.0;
    for (std::size_t a = 0; a < sizes.size(); ++a)
      for (std::size_t b = a + 1; b < sizes.size(); ++b)
        if (sizes[a] >= 100 && sizes[b] >= 100) {
          const Eigen::VectorXd& ref = means_id[b];
          analytic::DoseCurve ref_curve{truth_id.depth, to_vec(ref)};
          max_dev_shape = std::max(max_dev_shape, proximal_relative_error(means_id[a], ref_curve, edge_id));
          max_dev_range = std::max(max_dev_range, std::abs(r_mean_id[a] - r_mean_id[b]) / std::abs(r_mean_id[b]));
        }
    rep.metrics["max_pairwise_dev_shape_id"] = max_dev_shape;
    rep.metrics["max_pairwise_dev_range_id"] = max_dev_range;
    w.check("ood_shape_error_nonincreasing", inversions(s_err_ood, true) <= 1,
            std::to_string(inversions(s_err_ood, true)) + " inversions");
    w.check("ood_range_error_nonincreasing", inversions(r_err_ood, true) <= 1,
            std::to_string(inversions(r_err_ood, true)) + " inversions");
    w.check("id_shape_mean_stable", max_dev_shape < 0.02, "max pairwise proximal relative deviation (N >= 100) = " + fmt(max_dev_shape));
    w.check("id_range_mean_stable", max_dev_range < 0.02, "max pairwise relative deviation (N >= 100) = " + fmt(max_dev_range));
  }
  w.finish();
  return rep;
}

// ---- e3 ----------------------------------------------------------------------

struct PassConvergence {
  std::vector<double> passes;
  std::vector<double> range_se, shape_se;      // spread of the ensemble mean across repeats
  std::vector<double> range_var, shape_var;    // average ensemble variance estimate
  std::vector<double> range_mean;              // repeat-0 ensemble mean
  std::vector<Eigen::VectorXd> shape_mean;     // repeat-0 ensemble mean
};

/// Repeats each ensemble size with independent seeds and measures how the
/// ensemble mean scatters.
inline PassConvergence pass_convergence(const Model& shape, const Model* range, const InputVector& x,
                                        const std::vector<std::size_t>& passes, std::size_t repeats, std::uint64_t seed) {
  if (repeats < 2) throw ConfigError("repeats must be >= 2");
  for (std::size_t i = 1; i < passes.size(); ++i)
    if (passes[i] <= passes[i - 1]) throw ConfigError("pass counts must be strictly ascending");
  PassConvergence pc;
  for (std::size_t i = 0; i < passes.size(); ++i) {
    const std::size_t T = passes[i];
    uq::MomentAccumulator shape_means(shape.output_dim());
    Eigen::VectorXd shape_var_sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(shape.output_dim()));
    std::vector<double> rm;
    double rv = 0.0;
    Eigen::MatrixXd col(static_cast<Eigen::Index>(shape.output_dim()), 1);
    for (std::size_t r = 0; r < repeats; ++r) {
      const std::uint64_t s = split_seed(seed, i * 100000 + r);
      const auto a = uq::dropout_ensemble(shape, x, T, split_seed(s, 0));
      col.col(0) = a.mean;
      shape_means.add_columns(col);
      shape_var_sum += a.variance;
      if (r == 0) pc.shape_mean.push_back(a.mean);
      if (range) {
        const auto b = uq::dropout_ensemble(*range, x, T, split_seed(s, 1));
        rm.push_back(b.mean(0));
        rv += b.variance(0);
        if (r == 0) pc.range_mean.push_back(b.mean(0));
      }
    }
    pc.passes.push_back(static_cast<double>(T));
    pc.shape_se.push_back(std::sqrt(shape_means.variance().mean()));
    pc.shape_var.push_back(shape_var_sum.mean() / static_cast<double>(repeats));
    if (range) {
      const double mu = std::accumulate(rm.begin(), rm.end(), 0.0) / rm.size();
      double v = 0.0;
      for (double q : rm) v += (q - mu) * (q - mu);
      pc.range_se.push_back(std::sqrt(v / static_cast<double>(rm.size() - 1)));
      pc.range_var.push_back(rv / static_cast<double>(repeats));
    }
  }
  return pc;
}

inline RunReport run_e3(const ExperimentConfig& cfg) {
  RunReport rep{cfg.id, cfg.scale, cfg.seed, cfg.params};
  RunWriter w(cfg.run_dir(), rep);
  const auto setup = one_d_setup(cfg.params);
  const auto passes = param<std::vector<std::size_t>>(cfg.params, "passes_list");
  const auto repeats = param<std::size_t>(cfg.params, "repeats");
  for (std::size_t i = 1; i < passes.size(); ++i)
    if (passes[i] <= passes[i - 1]) throw ConfigError("passes_list must be strictly ascending");
  if (passes.empty() || passes.front() < 2) throw ConfigError("passes_list entries must be >= 2");

  const Dataset ds = w.stage("data-gen", [&] { return generate_1d(setup.n, setup.generator, split_seed(cfg.seed, 1)); });
  const auto idx = ds.all_indices();
  const auto shape = w.stage("train-shape", [&] {
    return train_on(ds, idx, setup.shape_config(), train_config(setup.train, split_seed(cfg.seed, 2)));
  });
  const auto range = w.stage("train-range", [&] {
    return train_on(ds, idx, setup.range_config(), train_config(setup.train, split_seed(cfg.seed, 3)), true);
  });
  const auto pc = w.stage("ensembles", [&] {
    return pass_convergence(shape.model, &range.model, setup.generator.dist.mean, passes, repeats, split_seed(cfg.seed, 4));
  });
  CsvTable t;
  t.add("T", pc.passes).add("range_mean", pc.range_mean).add("range_mean_se", pc.range_se).add("range_variance", pc.range_var)
      .add("shape_mean_se", pc.shape_se).add("shape_mean_variance", pc.shape_var);
  w.csv("convergence_T.csv", t, "Ensemble mean scatter and variance estimates against the number of dropout passes");
  w.chart("mean_se_T.svg",
          plot::LineChart{"Standard error of the ensemble mean", "T", "standard error", true, true, {},
                          {{"range", pc.passes, pc.range_se, "#1f77b4"}, {"shape (rms)", pc.passes, pc.shape_se, "#d62728"}}},
          "Spread of the dropout-ensemble mean against T");
  w.chart("variance_T.svg",
          plot::LineChart{"Variance estimate", "T", "variance", true, true, {},
                          {{"range", pc.passes, pc.range_var, "#1f77b4"}, {"shape (mean)", pc.passes, pc.shape_var, "#d62728"}}},
          "Dropout variance estimate against T");
  CsvTable sm;
  sm.add("depth_cm", analytic::DepthGrid(setup.generator.depth, setup.generator.voxels).centres());
  for (std::size_t i = 0; i < pc.passes.size(); ++i) sm.add("mean_T" + std::to_string(passes[i]), to_vec(pc.shape_mean[i]));
  w.csv("shape_mean_by_T.csv", sm, "Shape-model ensemble mean for each T");

  if (pc.passes.size() >= 2) {
    const double sr = loglog_slope(pc.passes, pc.range_se);
    const double ss = loglog_slope(pc.passes, pc.shape_se);
    rep.metrics["range_se_slope"] = sr;
    rep.metrics["shape_se_slope"] = ss;
    w.check("range_se_slope", std::abs(sr + 0.5) <= 0.1, "slope " + fmt(sr));
    w.check("shape_se_slope", std::abs(ss + 0.5) <= 0.1, "slope " + fmt(ss));
  }
  const auto i3 = std::find(passes.begin(), passes.end(), 1000);
  const auto i4 = std::find(passes.begin(), passes.end(), 10000);
  if (i3 != passes.end() && i4 != passes.end()) {
    const auto a = static_cast<std::size_t>(i3 - passes.begin()), b = static_cast<std::size_t>(i4 - passes.begin());
    const double dr = std::abs(pc.range_mean[a] - pc.range_mean[b]) / std::abs(pc.range_mean[b]);
    const double dsh = relative_l2(pc.shape_mean[a], pc.shape_mean[b]);
    rep.metrics["range_mean_rel_change_1e3_1e4"] = dr;
    rep.metrics["shape_mean_rel_change_1e3_1e4"] = dsh;
    w.check("range_mean_stable_1e3_1e4", dr < 0.01, fmt(dr));
    w.check("shape_mean_stable_1e3_1e4", dsh < 0.01, fmt(dsh));
  }
  w.finish();
  return rep;
}

// ---- e4 ----------------------------------------------------------------------

/// Mean epistemic variance at `x` of a model trained with the given layer
/// counts and dropout probability.
inline double epistemic_for(const Dataset& ds, const OneDSetup& setup, std::size_t lh, std::size_t ld, double p,
                            bool range, std::size_t passes, std::uint64_t seed, Eigen::VectorXd* pointwise = nullptr) {
  json m = setup.model;
  m["hidden_layers"] = lh;
  m["dropout_layers"] = ld;
  m["p_drop"] = p;
  const auto cfg = mlp_config(m, 4, range ? 1 : setup.generator.voxels);
  const auto r = train_on(ds, ds.all_indices(), cfg, train_config(setup.train, split_seed(seed, 0)), range);
  const auto st = uq::dropout_ensemble(r.model, setup.generator.dist.mean, passes, split_seed(seed, 1));
  if (pointwise) *pointwise = st.variance;
  return st.variance.mean();
}

inline RunReport run_e4(const ExperimentConfig& cfg) {
  RunReport rep{cfg.id, cfg.scale, cfg.seed, cfg.params};
  RunWriter w(cfg.run_dir(), rep);
  const auto setup = one_d_setup(cfg.params);
  const auto total = param<std::size_t>(cfg.params, "total_layers");
  const auto p_grid = param<std::vector<double>>(cfg.params, "p_grid");
  const auto passes = param<std::size_t>(cfg.params.at("uq"), "passes");
  const double p0 = param<double>(setup.model, "p_drop");
  const Dataset ds = w.stage("data-gen", [&] { return generate_1d(setup.n, setup.generator, split_seed(cfg.seed, 1)); });

  std::vector<double> ld_list, var_layers;
  CsvTable pointwise;
  pointwise.add("depth_cm", analytic::DepthGrid(setup.generator.depth, setup.generator.voxels).centres());
  w.stage("layer-sweep", [&] {
    for (std::size_t ld = 0; ld <= total; ++ld) {
      Eigen::VectorXd v;
      var_layers.push_back(epistemic_for(ds, setup, total - ld, ld, p0, false, passes, split_seed(cfg.seed, 10 + ld), &v));
      ld_list.push_back(static_cast<double>(ld));
      pointwise.add("var_ld" + std::to_string(ld) + "_lh" + std::to_string(total - ld), to_vec(v));
    }
  });
  CsvTable lt;
  lt.add("dropout_layers", ld_list).add("mean_epistemic_variance", var_layers);
  w.csv("layer_sweep.csv", lt, "Shape-model mean epistemic variance against the dropout-to-hidden layer ratio");
  w.csv("layer_sweep_pointwise.csv", pointwise, "Pointwise shape epistemic variance for each layer ratio");
  w.chart("layer_sweep.svg",
          plot::LineChart{"Epistemic variance against L_d (L_d + L_h = " + std::to_string(total) + ")", "dropout layers L_d",
                          "mean epistemic variance", false, false, {}, {{"shape", ld_list, var_layers, "#1f77b4"}}},
          "More dropout layers raise epistemic variance");

  std::vector<double> var_range, var_shape;
  w.stage("p-sweep", [&] {
    for (std::size_t i = 0; i < p_grid.size(); ++i) {
      var_range.push_back(epistemic_for(ds, setup, 3, 3, p_grid[i], true, passes, split_seed(cfg.seed, 100 + i)));
      var_shape.push_back(epistemic_for(ds, setup, 0, 6, p_grid[i], false, passes, split_seed(cfg.seed, 200 + i)));
    }
  });
  CsvTable pt;
  pt.add("p_drop", p_grid).add("range_variance_lh3_ld3", var_range).add("shape_mean_variance_lh0_ld6", var_shape);
  w.csv("p_sweep.csv", pt, "Mean epistemic variance against dropout probability");
  w.chart("p_sweep_range.svg",
          plot::LineChart{"Range model, L_h = L_d = 3", "p_drop", "epistemic variance", false, true, {},
                          {{"range", p_grid, var_range, "#1f77b4"}}},
          "Range-model epistemic variance against dropout probability");
  w.chart("p_sweep_shape.svg",
          plot::LineChart{"Shape model, L_h = 0, L_d = 6", "p_drop", "mean epistemic variance", false, true, {},
                          {{"shape", p_grid, var_shape, "#d62728"}}},
          "Shape-model epistemic variance against dropout probability");

  rep.metrics["layer_variances"] = var_layers;
  rep.metrics["p_sweep_range"] = var_range;
  rep.metrics["p_sweep_shape"] = var_shape;
  // Observation only: growth of shape variance past p = 0.67.
  double below = 0.0, above = 0.0;
  for (std::size_t i = 0; i < p_grid.size(); ++i) {
    if (p_grid[i] <= 0.67) below = std::max(below, var_shape[i]);
    if (p_grid[i] > 0.67) above = std::max(above, var_shape[i]);
  }
  if (below > 0.0 && above > 0.0) rep.metrics["shape_variance_growth_beyond_0p67"] = above / below;
  w.check("no_dropout_zero_variance", var_layers.front() == 0.0, "variance at L_d = 0 is " + fmt(var_layers.front()));
  w.check("variance_nondecreasing_in_ld", inversions(var_layers, false) <= 1,
          std::to_string(inversions(var_layers, false)) + " inversions");
  if (total >= 1)
    w.check("all_dropout_exceeds_one_dropout", var_layers.back() > var_layers[1],
            fmt(var_layers.back()) + " vs " + fmt(var_layers[1]));
  w.finish();
  return rep;
}

// ---- e5 / e6 / e7 ------------------------------------------------------------

template <class Gen>
Dataset mc_dataset(RunWriter& w, const json& data, const Gen& g, std::uint64_t seed, const std::string& id) {
  if (data.contains("path") && !data.at("path").is_null()) {
    const fs::path p = data.at("path").get<std::string>();
    if (fs::exists(p / "manifest.json")) return w.stage("data-load", [&] { return load_dataset(p); });
  }
  const auto n = param<std::size_t>(data, "n");
  const auto fr = param<std::array<double, 3>>(data, "split");
  Dataset ds = w.stage("data-gen", [&] {
    Dataset d;
    if constexpr (std::is_same_v<Gen, Generator3D>)
      d = generate_3d(n, g, split_seed(seed, 1), id);
    else
      d = generate_2d(n, g, split_seed(seed, 1), id);
    split(d, fr, split_seed(seed, 8));
    return d;
  });
  w.stage("data-save", [&] { save_dataset(ds, w.dir() / "dataset"); });
  return ds;
}

/// Fraction of the top-decile entries of `error` that lie inside the
/// top-quartile entries of `variance`.
inline double colocation(const Eigen::VectorXd& error, const Eigen::VectorXd& variance, double err_q = 0.9,
                         double var_q = 0.75) {
  const auto n = static_cast<std::size_t>(error.size());
  auto top = [n](const Eigen::VectorXd& v, double q) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto keep = static_cast<std::size_t>(std::ceil((1.0 - q) * static_cast<double>(n)));
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v(static_cast<Eigen::Index>(a)) > v(static_cast<Eigen::Index>(b)); });
    std::vector<char> mask(n, 0);
    for (std::size_t i = 0; i < keep; ++i) mask[idx[i]] = 1;
    return std::pair{mask, keep};
  };
  const auto [emask, ecount] = top(error, err_q);
  const auto [vmask, vcount] = top(variance, var_q);
  (void)vcount;
  std::size_t both = 0;
  for (std::size_t i = 0; i < n; ++i) both += emask[i] && vmask[i];
  return static_cast<double>(both) / static_cast<double>(ecount);
}

struct SurrogateMaps {
  Eigen::VectorXd reference, mean, parametric, epistemic, total, abs_error, log_error;
  double colocation = 0.0;
  double colocation_log = 0.0;
};

template <class Gen>
SurrogateMaps evaluate_maps(const Model& model, const Gen& g, const json& uqp, std::uint64_t seed) {
  const auto passes = param<std::size_t>(uqp, "passes");
  const auto outer = param<std::size_t>(uqp, "outer");
  const InputVector x = g.dist.mean;
  SurrogateMaps m;
  const auto field = mc_target(g, simulate_sample(g, x, split_seed(seed, 0)));
  m.reference = Eigen::Map<const Eigen::VectorXd>(field.values.data(), static_cast<Eigen::Index>(field.values.size()));
  const auto st = uq::dropout_ensemble(model, x, passes, split_seed(seed, 1));
  m.mean = st.mean;
  const auto dec = uq::decompose(model, g.dist, outer, passes, split_seed(seed, 2));
  m.parametric = dec.parametric;
  m.epistemic = dec.epistemic;
  m.total = dec.total;
  m.log_error = (m.reference - m.mean).cwiseAbs();
  m.abs_error = (m.reference.unaryExpr([](double v) { return std::pow(10.0, v); }) -
                 m.mean.unaryExpr([](double v) { return std::pow(10.0, v); }))
                    .cwiseAbs();
  m.colocation = colocation(m.abs_error, m.total);
  m.colocation_log = colocation(m.log_error, m.total);
  return m;
}

inline double mean_abs_log_error(const Model& model, const Dataset& ds, const std::vector<std::size_t>& idx,
                                 std::size_t passes, std::uint64_t seed) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i : idx) {
    const auto st = uq::dropout_ensemble(model, ds.input(i), passes, split_seed(seed, i));
    s += (st.mean - ds.target(i)).cwiseAbs().sum();
    n += static_cast<std::size_t>(st.mean.size());
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

inline void emit_maps_2d(RunWriter& w, const VoxelGrid& grid, const SurrogateMaps& m, const std::string& label) {
  const std::size_t nx = grid.dim(0), ny = grid.dim(1);
  std::vector<double> xs, ys;
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) xs.push_back(grid.centre(0, i)), ys.push_back(grid.centre(1, j));
  CsvTable t;
  t.add("x_cm", xs).add("y_cm", ys).add("mc_log_dose", to_vec(m.reference)).add("surrogate_mean", to_vec(m.mean))
      .add("var_parametric", to_vec(m.parametric)).add("var_epistemic", to_vec(m.epistemic)).add("var_total", to_vec(m.total))
      .add("abs_error", to_vec(m.abs_error)).add("log_error", to_vec(m.log_error));
  w.csv("maps.csv", t, "Per-pixel maps at " + label + ": Monte Carlo and surrogate log-dose, variance components, errors");
  auto heat = [&](const std::string& name, const std::string& title, const Eigen::VectorXd& v, const std::string& caption) {
    plot::Heatmap h{title, "x (cm)", "y (cm)", nx, ny, to_vec(v), grid.lower(0), grid.upper(0), grid.lower(1), grid.upper(1)};
    w.heatmap(name, h, caption);
  };
  heat("map_mc.svg", "Monte Carlo log10 dose", m.reference, "Monte Carlo reference log-dose at " + label);
  heat("map_mean.svg", "Surrogate mean log10 dose", m.mean, "Surrogate ensemble-mean log-dose at " + label);
  heat("map_var_parametric.svg", "Parametric variance", m.parametric, "Parametric variance map");
  heat("map_var_epistemic.svg", "Epistemic variance", m.epistemic, "Epistemic variance map");
  heat("map_error_abs.svg", "|10^d - 10^mean|", m.abs_error, "Absolute dose error at " + label);
  heat("map_error_log.svg", "|d - mean|", m.log_error, "Log-space error at " + label);
}

inline RunReport run_mc_2d(const ExperimentConfig& cfg) {
  RunReport rep{cfg.id, cfg.scale, cfg.seed, cfg.params};
  RunWriter w(cfg.run_dir(), rep);
  const json& data = cfg.params.at("data");
  const auto g = Generator2D::from_json(data.at("generator"));
  const Dataset ds = mc_dataset(w, data, g, cfg.seed, cfg.id);
  if (data.contains("n")) rep.timings["data_gen_per_sample"] = rep.timings["data-gen"] / static_cast<double>(ds.size());
  const auto& train_idx = ds.split.require(SplitPart::Train);
  const auto mcfg = mlp_config(cfg.params.at("model"), ds.input_dim(), ds.output_dim());
  const auto trained = w.stage("train", [&] {
    return train_on(ds, train_idx, mcfg, train_config(cfg.params.at("train"), split_seed(cfg.seed, 2)));
  });
  nn::save_checkpoint(trained.model, w.dir() / "model.bin");
  emit_loss(w, "loss", trained.history, cfg.id == "e6" ? "4-D surrogate" : "2-D surrogate");
  const auto maps = w.stage("evaluate", [&] { return evaluate_maps(trained.model, g, cfg.params.at("uq"), split_seed(cfg.seed, 3)); });
  const VoxelGrid plane({{g.grid.dim(0), g.grid.lower(0), g.grid.upper(0)}, {g.grid.dim(1), g.grid.lower(1), g.grid.upper(1)}});
  emit_maps_2d(w, plane, maps, "the mean input");
  const auto passes = param<std::size_t>(cfg.params.at("uq"), "passes");
  if (!ds.split.test.empty())
    rep.metrics["test_mean_abs_log_error"] = w.stage("evaluate-test", [&] {
      return mean_abs_log_error(trained.model, ds, ds.split.test, passes, split_seed(cfg.seed, 4));
    });
  rep.metrics["mean_abs_log_error_at_mean"] = maps.log_error.mean();
  rep.metrics["colocation_top10_error_in_top25_variance"] = maps.colocation;
  rep.metrics["colocation_log_error"] = maps.colocation_log;
  rep.metrics["mean_parametric_variance"] = maps.parametric.mean();
  rep.metrics["mean_epistemic_variance"] = maps.epistemic.mean();
  rep.metrics["loss_first"] = trained.history.epoch_loss.front();
  rep.metrics["loss_last"] = trained.history.epoch_loss.back();
  w.check("loss_decreases", loss_trending_down(trained.history), "last-decile mean loss below first-decile mean loss");
  w.check("error_uncertainty_colocation", maps.colocation > 0.5, "fraction = " + fmt(maps.colocation));
  if (cfg.id == "e6") {
    Generator2D g2 = g;
    g2.dist = distributions::slab_shift();
    const auto [p4, b4] = g.setup({0.0, 0.0, 0.0, 0.0});
    const auto [p2, b2] = g2.setup({0.0, 0.0});
    const bool same = p4.material_map() == p2.material_map() && b4.direction == b2.direction && b4.energy_mean == b2.energy_mean &&
                      b4.energy_mean == g.energy;
    w.check("zero_input_reproduces_2d_geometry", same, "x = (0,0,0,0) against x = (0,0)");
  }
  w.finish();
  return rep;
}

inline RunReport run_e5(const ExperimentConfig& cfg) { return run_mc_2d(cfg); }
inline RunReport run_e6(const ExperimentConfig& cfg) { return run_mc_2d(cfg); }

/// Median wall time of `repeats` calls.
template <class F>
double median_seconds(std::size_t repeats, F&& f) {
  std::vector<double> t;
  for (std::size_t r = 0; r < std::max<std::size_t>(1, repeats); ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f(r);
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

inline RunReport run_e7(const ExperimentConfig& cfg) {
  RunReport rep{cfg.id, cfg.scale, cfg.seed, cfg.params};
  RunWriter w(cfg.run_dir(), rep);
  const json& data = cfg.params.at("data");
  const auto g = Generator3D::from_json(data.at("generator"));
  const Dataset ds = mc_dataset(w, data, g, cfg.seed, cfg.id);
  const auto& train_idx = ds.split.require(SplitPart::Train);
  const auto mcfg = mlp_config(cfg.params.at("model"), ds.input_dim(), ds.output_dim());
  const auto trained = w.stage("train", [&] {
    return train_on(ds, train_idx, mcfg, train_config(cfg.params.at("train"), split_seed(cfg.seed, 2)));
  });
  nn::save_checkpoint(trained.model, w.dir() / "model.bin");
  emit_loss(w, "loss", trained.history, "3-D surrogate");

  const json& uqp = cfg.params.at("uq");
  const auto passes = param<std::size_t>(uqp, "passes");
  const auto repeats = param<std::size_t>(uqp, "timing_repeats");
  const InputVector x = g.dist.mean;
  const auto maps = w.stage("evaluate", [&] { return evaluate_maps(trained.model, g, uqp, split_seed(cfg.seed, 3)); });
  const double mc_seconds = median_seconds(1, [&](std::size_t) { (void)simulate_sample(g, x, split_seed(cfg.seed, 5)); });
  const double fwd_seconds = median_seconds(repeats, [&](std::size_t r) { (void)trained.model.forward(x, split_seed(cfg.seed, 100 + r)); });
  const double ens_seconds = median_seconds(3, [&](std::size_t r) { (void)uq::dropout_ensemble(trained.model, x, passes, split_seed(cfg.seed, 200 + r)); });
  rep.timings["inference_per_pass"] = fwd_seconds;
  const double speedup = mc_seconds / fwd_seconds;
  const json& paper = cfg.params.at("paper_timing");
  CsvTable tt;
  tt.add("mc_seconds_per_input", {mc_seconds, paper.at("mc_seconds").get<double>()})
      .add("surrogate_single_forward_seconds", {fwd_seconds, paper.at("surrogate_seconds").get<double>()})
      .add("surrogate_ensemble_seconds", {ens_seconds, std::nan("")})
      .add("speedup_single_forward", {speedup, paper.at("reported_speedup").get<double>()});
  w.csv("timing.csv", tt, "Wall time per input: row 1 internal Monte Carlo against this surrogate; row 2 the published TOPAS and GPU figures (not reproducible here)");

  // Central x-z slice through y = 0.
  const std::size_t nx = g.grid.dim(0), ny = g.grid.dim(1), nz = g.grid.dim(2), j = ny / 2;
  auto slice = [&](const Eigen::VectorXd& v) {
    std::vector<double> s;
    for (std::size_t k = 0; k < nz; ++k)
      for (std::size_t i = 0; i < nx; ++i) s.push_back(v(static_cast<Eigen::Index>(g.grid.linear_index(i, j, k))));
    return s;
  };
  std::vector<double> xs, zs;
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t i = 0; i < nx; ++i) xs.push_back(g.grid.centre(0, i)), zs.push_back(g.grid.centre(2, k));
  CsvTable st;
  st.add("x_cm", xs).add("z_cm", zs).add("mc_log_dose", slice(maps.reference)).add("surrogate_mean", slice(maps.mean))
      .add("var_total", slice(maps.total)).add("var_parametric", slice(maps.parametric)).add("var_epistemic", slice(maps.epistemic))
      .add("abs_error", slice(maps.abs_error)).add("log_error", slice(maps.log_error));
  w.csv("slice_y0.csv", st, "Central x-z slice at the mean input: log-dose, variance components and errors");
  auto heat = [&](const std::string& name, const std::string& title, const Eigen::VectorXd& v, const std::string& caption) {
    plot::Heatmap h{title, "x (cm)", "z (cm)", nx, nz, slice(v), g.grid.lower(0), g.grid.upper(0), g.grid.lower(2), g.grid.upper(2)};
    w.heatmap(name, h, caption);
  };
  heat("slice_mean.svg", "Surrogate mean log10 dose (y = 0)", maps.mean, "Expected log-dose, central slice");
  heat("slice_mc.svg", "Monte Carlo log10 dose (y = 0)", maps.reference, "Monte Carlo log-dose, central slice");
  heat("slice_var_total.svg", "Total variance (y = 0)", maps.total, "Dose variance, central slice");
  heat("slice_var_parametric.svg", "Parametric variance (y = 0)", maps.parametric, "Parametric variance, central slice");
  heat("slice_var_epistemic.svg", "Epistemic variance (y = 0)", maps.epistemic, "Epistemic variance, central slice");
  heat("slice_error_log.svg", "|d - mean| (y = 0)", maps.log_error, "Log-space error, central slice");

  rep.metrics["mc_seconds_per_input"] = mc_seconds;
  rep.metrics["surrogate_forward_seconds"] = fwd_seconds;
  rep.metrics["surrogate_ensemble_seconds"] = ens_seconds;
  rep.metrics["speedup_single_forward"] = speedup;
  rep.metrics["paper_reported_speedup"] = paper.at("reported_speedup");
  rep.metrics["mean_abs_log_error_at_mean"] = maps.log_error.mean();
  rep.metrics["colocation_top10_error_in_top25_variance"] = maps.colocation;
  if (!ds.split.test.empty())
    rep.metrics["test_mean_abs_log_error"] = w.stage("evaluate-test", [&] {
      return mean_abs_log_error(trained.model, ds, ds.split.test, passes, split_seed(cfg.seed, 4));
    });
  w.check("loss_decreases", loss_trending_down(trained.history), "last-decile mean loss below first-decile mean loss");
  w.check("speedup_at_least_100x", speedup >= 100.0, "speedup " + fmt(speedup));
  w.finish();
  return rep;
}

inline RunReport run(const ExperimentConfig& cfg) {
  if (cfg.id == "e1") return run_e1(cfg);
  if (cfg.id == "e2") return run_e2(cfg);
  if (cfg.id == "e3") return run_e3(cfg);
  if (cfg.id == "e4") return run_e4(cfg);
  if (cfg.id == "e5") return run_e5(cfg);
  if (cfg.id == "e6") return run_e6(cfg);
  if (cfg.id == "e7") return run_e7(cfg);
  throw ConfigError("unknown experiment '" + cfg.id + "'");
}

}  // namespace pdose::runner
