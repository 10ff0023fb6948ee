#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlmdet/eval/experiments.hpp"
#include "vlmdet/io/fs.hpp"

namespace vlmdet {

inline constexpr const char* kCodeVersion = "vlmdet 1.0.0";

namespace report_detail {

inline std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
  return buf;
}

inline std::string quoted(std::string s) {
  for (auto& c : s)
    if (c == '"' || c == '\n' || c == '\r') c = '\'';
  return "\"" + s + "\"";
}

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace report_detail

inline constexpr const char* kReportCsvHeader = "dataset,family,n_real,n_fake,ap,acc";

// Rows then one aggregate row (mAP, mean accuracy); metric values x100.
inline std::string report_csv(const MetricsReport& r) {
  using report_detail::pct;
  std::string out = std::string(kReportCsvHeader) + "\n";
  std::size_t nr = 0, nf = 0;
  for (const auto& row : r.rows) {
    out += row.dataset + "," + family_name(row.family) + "," + std::to_string(row.n_real) + "," +
           std::to_string(row.n_fake) + "," + pct(row.ap) + "," + pct(row.acc) + "\n";
    nr += row.n_real;
    nf += row.n_fake;
  }
  out += "mean,ALL," + std::to_string(nr) + "," + std::to_string(nf) + "," + pct(r.map) + "," + pct(r.mean_acc) + "\n";
  return out;
}

// Several reports stacked, prefixed with the report name.
inline std::string reports_csv(const std::vector<MetricsReport>& reports) {
  std::string out = std::string("report,") + kReportCsvHeader + "\n";
  for (const auto& r : reports) {
    const std::string body = report_csv(r);
    std::size_t pos = body.find('\n') + 1;
    while (pos < body.size()) {
      const std::size_t end = body.find('\n', pos);
      out += r.name + "," + body.substr(pos, end - pos) + "\n";
      pos = end + 1;
    }
  }
  return out;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"dataset", row.dataset},
                    {"family", family_name(row.family)},
                    {"n_real", row.n_real},
                    {"n_fake", row.n_fake},
                    {"ap", row.ap},
                    {"acc", row.acc}});
  }
  return {{"name", r.name}, {"rows", rows}, {"mAP", r.map}, {"mean_acc", r.mean_acc}, {"metadata", r.metadata}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    r.name = j.at("name").get<std::string>();
    for (const auto& row : j.at("rows")) {
      MetricsRow m;
      m.dataset = row.at("dataset").get<std::string>();
      m.family = parse_family(row.at("family").get<std::string>());
      m.n_real = row.at("n_real").get<std::size_t>();
      m.n_fake = row.at("n_fake").get<std::size_t>();
      m.ap = row.at("ap").get<double>();
      m.acc = row.at("acc").get<double>();
      r.rows.push_back(m);
    }
    r.map = j.at("mAP").get<double>();
    r.mean_acc = j.at("mean_acc").get<double>();
    r.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed report JSON: ") + e.what());
  }
  return r;
}

inline std::string report_json(const MetricsReport& r) { return to_json(r).dump(2) + "\n"; }

inline std::string reports_json(const std::vector<MetricsReport>& rs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rs) arr.push_back(to_json(r));
  return arr.dump(2) + "\n";
}

// ---- sweep -------------------------------------------------------------------

inline std::string sweep_csv(const SweepResult& s) {
  using report_detail::pct;
  std::string out = "perturbation,param,family,n_real,n_fake,ap,acc,error\n";
  for (const auto& c : s.cells) {
    out += std::string(c.perturbation.kind_name()) + "," + report_detail::num(c.perturbation.param) + "," +
           family_name(c.family) + "," + std::to_string(c.n_real) + "," + std::to_string(c.n_fake) + "," +
           (c.error.empty() ? pct(c.ap) + "," + pct(c.acc) : std::string(",")) + "," + report_detail::quoted(c.error) + "\n";
  }
  return out;
}

inline nlohmann::json to_json(const SweepResult& s) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : s.cells) {
    cells.push_back({{"perturbation", c.perturbation.kind_name()},
                     {"param", c.perturbation.param},
                     {"family", family_name(c.family)},
                     {"n_real", c.n_real},
                     {"n_fake", c.n_fake},
                     {"ap", c.ap},
                     {"acc", c.acc},
                     {"error", c.error}});
  }
  return {{"cells", cells}, {"metadata", s.metadata}};
}

inline SweepResult sweep_from_json(const nlohmann::json& j) {
  SweepResult s;
  try {
    for (const auto& c : j.at("cells")) {
      SweepCell cell;
      const auto kind = c.at("perturbation").get<std::string>();
      const double param = c.at("param").get<double>();
      if (kind == "identity") cell.perturbation = Perturbation::identity();
      else if (kind == "jpeg") cell.perturbation = {Perturbation::Kind::Jpeg, param};
      else if (kind == "blur") cell.perturbation = {Perturbation::Kind::Blur, param};
      else throw IoError("unknown perturbation kind " + kind);
      cell.family = parse_family(c.at("family").get<std::string>());
      cell.n_real = c.at("n_real").get<std::size_t>();
      cell.n_fake = c.at("n_fake").get<std::size_t>();
      cell.ap = c.at("ap").get<double>();
      cell.acc = c.at("acc").get<double>();
      cell.error = c.at("error").get<std::string>();
      s.cells.push_back(std::move(cell));
    }
    s.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed sweep JSON: ") + e.what());
  }
  return s;
}

inline std::string sweep_json(const SweepResult& s) { return to_json(s).dump(2) + "\n"; }

// Plot series: one line per (family, perturbation) point; identity at x=0.
inline std::string sweep_plot_data(const SweepResult& s) {
  std::string out = "family,series,x,ap,acc\n";
  std::vector<Family> fams;
  for (const auto& c : s.cells)
    if (std::find(fams.begin(), fams.end(), c.family) == fams.end()) fams.push_back(c.family);
  for (Family f : fams)
    for (const auto& c : s.cells) {
      if (c.family != f || !c.error.empty()) continue;
      out += std::string(family_name(f)) + "," + c.perturbation.kind_name() + "," + report_detail::num(c.perturbation.param) +
             "," + report_detail::num(c.ap) + "," + report_detail::num(c.acc) + "\n";
    }
  return out;
}

inline std::string loss_curve_csv(const std::vector<double>& curve) {
  std::string out = "epoch,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out += std::to_string(i + 1) + "," + report_detail::num(curve[i]) + "\n";
  return out;
}

// ---- run manifest -------------------------------------------------------------

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config_digest;
  std::string code_version = kCodeVersion;
  std::uint64_t seed = 0;
  std::string started, finished;
  std::vector<std::pair<std::string, std::string>> files;  // relative path, sha256

  nlohmann::json to_json() const {
    nlohmann::json fl = nlohmann::json::array();
    for (const auto& [p, h] : files) fl.push_back({{"path", p}, {"sha256", h}});
    return {{"command", command},   {"config_digest", config_digest}, {"code_version", code_version},
            {"seed", seed},         {"started", started},             {"finished", finished},
            {"files", fl}};
  }
};

// Collects artifacts of one run directory and records their hashes.
class RunWriter {
 public:
  RunWriter(std::string dir, RunManifest manifest) : dir_(std::move(dir)), manifest_(std::move(manifest)) {
    manifest_.started = utc_timestamp();
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create run directory " + dir_ + ": " + ec.message());
  }

  const std::string& dir() const { return dir_; }
  std::string path(const std::string& name) const { return (std::filesystem::path(dir_) / name).string(); }

  std::string write(const std::string& name, const std::string& bytes) {
    const std::string p = path(name);
    fsio::atomic_write(p, bytes);
    manifest_.files.emplace_back(name, sha256_hex(bytes));
    return p;
  }

  std::string finish() {
    manifest_.finished = utc_timestamp();
    const std::string p = path("manifest.json");
    fsio::atomic_write(p, manifest_.to_json().dump(2) + "\n");
    return p;
  }

  const RunManifest& manifest() const { return manifest_; }

 private:
  std::string dir_;
  RunManifest manifest_;
};

}  // namespace vlmdet
