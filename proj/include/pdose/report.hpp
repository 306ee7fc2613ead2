#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "pdose/error.hpp"
#include "pdose/svg.hpp"

namespace pdose::runner {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Failure inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct Artifact {
  std::string file;
  std::string caption;
};

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Named columns of equal length.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;

  CsvTable& add(std::string name, std::vector<double> values) {
    if (!columns.empty() && values.size() != columns.front().size())
      throw ShapeError("csv column '" + name + "' has a different length");
    header.push_back(std::move(name));
    columns.push_back(std::move(values));
    return *this;
  }

  std::size_t rows() const noexcept { return columns.empty() ? 0 : columns.front().size(); }

  void write(std::ostream& os) const {
    for (std::size_t c = 0; c < header.size(); ++c) os << (c ? "," : "") << header[c];
    os << '\n';
    os.precision(10);
    for (std::size_t r = 0; r < rows(); ++r) {
      for (std::size_t c = 0; c < columns.size(); ++c) os << (c ? "," : "") << columns[c][r];
      os << '\n';
    }
  }
};

struct RunReport {
  std::string experiment;
  std::string scale;
  std::uint64_t seed = 0;
  json config = json::object();
  std::map<std::string, double> timings;  // seconds
  json metrics = json::object();
  std::vector<Artifact> artifacts;
  std::vector<Check> checks;

  bool all_checks_passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return true;
  }

  const Check* find_check(const std::string& name) const {
    for (const auto& c : checks)
      if (c.name == name) return &c;
    return nullptr;
  }

  json to_json() const {
    json j;
    j["experiment"] = experiment;
    j["scale"] = scale;
    j["seed"] = seed;
    j["config"] = config;
    j["timings_s"] = timings;
    j["metrics"] = metrics;
    json a = json::array();
    for (const auto& x : artifacts) a.push_back({{"file", x.file}, {"caption", x.caption}});
    j["artifacts"] = a;
    json c = json::array();
    for (const auto& x : checks) c.push_back({{"name", x.name}, {"passed", x.passed}, {"detail", x.detail}});
    j["checks"] = c;
    return j;
  }

  static RunReport from_json(const json& j) {
    RunReport r;
    r.experiment = j.at("experiment").get<std::string>();
    r.scale = j.value("scale", std::string());
    r.seed = j.value("seed", std::uint64_t{0});
    r.config = j.value("config", json::object());
    r.timings = j.value("timings_s", std::map<std::string, double>{});
    r.metrics = j.value("metrics", json::object());
    for (const auto& a : j.at("artifacts")) r.artifacts.push_back({a.at("file"), a.value("caption", std::string())});
    for (const auto& c : j.value("checks", json::array()))
      r.checks.push_back({c.at("name"), c.at("passed"), c.value("detail", std::string())});
    return r;
  }
};

/// Writes artifacts into one run directory and records them in the report.
class RunWriter {
 public:
  RunWriter(fs::path dir, RunReport& report) : dir_(std::move(dir)), report_(report) { fs::create_directories(dir_); }

  const fs::path& dir() const noexcept { return dir_; }
  RunReport& report() noexcept { return report_; }

  void csv(const std::string& name, const CsvTable& table, const std::string& caption) {
    std::ofstream os(dir_ / name, std::ios::trunc);
    if (!os) throw Error("cannot write " + (dir_ / name).string());
    table.write(os);
    add(name, caption);
  }

  void chart(const std::string& name, const plot::LineChart& c, const std::string& caption) {
    c.write(dir_ / name);
    add(name, caption);
  }

  void heatmap(const std::string& name, const plot::Heatmap& h, const std::string& caption) {
    h.write(dir_ / name);
    add(name, caption);
  }

  void check(std::string name, bool passed, std::string detail) {
    report_.checks.push_back({std::move(name), passed, std::move(detail)});
  }

  /// Runs `fn` as a timed stage; failures are rethrown tagged with the stage.
  template <class F>
  auto stage(const std::string& name, F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    auto finish = [&] {
      report_.timings[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    try {
      if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        finish();
      } else {
        auto result = fn();
        finish();
        return result;
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  }

  void finish() {
    for (const auto& a : report_.artifacts)
      if (!fs::exists(dir_ / a.file)) throw StageError("finish", "artifact missing: " + a.file);
    std::ofstream os(dir_ / "report.json", std::ios::trunc);
    os << report_.to_json().dump(2) << '\n';
    if (!os) throw StageError("finish", "cannot write report.json");
  }

 private:
  void add(const std::string& name, const std::string& caption) {
    for (auto& a : report_.artifacts)
      if (a.file == name) {
        a.caption = caption;
        return;
      }
    report_.artifacts.push_back({name, caption});
  }

  fs::path dir_;
  RunReport& report_;
};

inline RunReport read_report(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw Error("cannot read " + file.string());
  try {
    return RunReport::from_json(json::parse(is));
  } catch (const json::exception& e) {
    throw FormatError("malformed report " + file.string() + ": " + e.what());
  }
}

/// index.html for every report.json at `dir` or one level below it. Each
/// listed artifact must exist.
inline fs::path write_index(const fs::path& dir) {
  std::vector<std::pair<fs::path, RunReport>> runs;
  if (fs::exists(dir / "report.json")) runs.emplace_back(fs::path("."), read_report(dir / "report.json"));
  if (fs::is_directory(dir)) {
    std::vector<fs::path> subdirs;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_directory() && fs::exists(e.path() / "report.json")) subdirs.push_back(e.path().filename());
    std::sort(subdirs.begin(), subdirs.end());
    for (const auto& s : subdirs) runs.emplace_back(s, read_report(dir / s / "report.json"));
  }
  if (runs.empty()) throw Error("no report.json found under " + dir.string());
  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>pdose runs</title></head><body>\n";
  for (const auto& [sub, rep] : runs) {
    html << "<h2>" << plot::detail::escape(rep.experiment) << " (" << plot::detail::escape(rep.scale) << ", seed "
         << rep.seed << ")</h2>\n<ul>\n";
    for (const auto& a : rep.artifacts) {
      const fs::path rel = sub / a.file;
      if (!fs::exists(dir / rel)) throw Error("report lists a missing artifact: " + rel.string());
      html << "<li><a href=\"" << rel.generic_string() << "\">" << plot::detail::escape(a.file) << "</a>: "
           << plot::detail::escape(a.caption) << "</li>\n";
    }
    html << "</ul>\n";
    if (!rep.checks.empty()) {
      html << "<table border=\"1\"><tr><th>check</th><th>result</th><th>detail</th></tr>\n";
      for (const auto& c : rep.checks)
        html << "<tr><td>" << plot::detail::escape(c.name) << "</td><td>" << (c.passed ? "pass" : "FAIL") << "</td><td>"
             << plot::detail::escape(c.detail) << "</td></tr>\n";
      html << "</table>\n";
    }
  }
  html << "</body></html>\n";
  const fs::path out = dir / "index.html";
  std::ofstream os(out, std::ios::trunc);
  os << html.str();
  if (!os) throw Error("cannot write " + out.string());
  return out;
}

}  // namespace pdose::runner
