// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gruaunet/metrics/metrics.hpp"

namespace gruaunet::metrics {

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["threshold"] = r.threshold;
  j["apcer_overall"] = r.apcer_overall;
  j["apcer_max_pai"] = r.apcer_max_pai;
  j["apcer_per_pai"] = r.apcer_per_pai;
  j["bpcer"] = r.bpcer;
  j["acer"] = r.acer;
  j["counts"] = {{"bonafide", r.bonafide},
                 {"attack", r.attacks},
                 {"missed_attacks", r.missed_attacks},
                 {"flagged_bonafide", r.flagged_bonafide},
                 {"attack_per_pai", r.attacks_per_pai}};
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.threshold = j.at("threshold").get<double>();
  r.apcer_overall = j.at("apcer_overall").get<double>();
  r.apcer_max_pai = j.at("apcer_max_pai").get<double>();
  r.apcer_per_pai = j.at("apcer_per_pai").get<std::map<std::string, double>>();
  r.bpcer = j.at("bpcer").get<double>();
  r.acer = j.at("acer").get<double>();
  const auto& c = j.at("counts");
  r.bonafide = c.at("bonafide").get<std::size_t>();
  r.attacks = c.at("attack").get<std::size_t>();
  r.missed_attacks = c.at("missed_attacks").get<std::size_t>();
  r.flagged_bonafide = c.at("flagged_bonafide").get<std::size_t>();
  r.attacks_per_pai = c.at("attack_per_pai").get<std::map<std::string, std::size_t>>();
  return r;
}

/// Aligned plain-text table, rates in percent at 4 decimals (half-to-even).
inline std::string to_text(const MetricsReport& r, const std::string& title = "PAD evaluation") {
  std::ostringstream os;
  os << title << "\n";
  os << "threshold " << std::setprecision(6) << r.threshold << " (attack iff score >= threshold)\n\n";
  std::size_t w = 16;
  for (const auto& [tag, v] : r.apcer_per_pai) w = std::max(w, tag.size() + 8);
  auto row = [&](const std::string& name, const std::string& value, const std::string& count) {
    os << std::left << std::setw(static_cast<int>(w)) << name << std::right << std::setw(10) << value << "  " << count
       << "\n";
  };
  row("metric", "percent", "count");
  row("APCER (pooled)", format_rate(r.apcer_overall), detail::concat(r.missed_attacks, "/", r.attacks));
  for (const auto& [tag, v] : r.apcer_per_pai) row("APCER[" + tag + "]", format_rate(v), detail::concat(r.attacks_per_pai.at(tag)));
  row("APCER (max PAI)", format_rate(r.apcer_max_pai), "");
  row("BPCER", format_rate(r.bpcer), detail::concat(r.flagged_bonafide, "/", r.bonafide));
  row("ACER", format_rate(r.acer), "");
  return os.str();
}

inline std::string det_csv(const std::vector<DetPoint>& curve) {
  std::ostringstream os;
  os << "threshold,apcer,bpcer\n" << std::setprecision(17);
  for (const auto& p : curve) os << p.threshold << ',' << p.apcer << ',' << p.bpcer << '\n';
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << content;
  if (!f) throw IoError("write failed for " + path.string());
}

/// report.json, report.txt and det.csv under `dir`.
inline void write_report(const std::filesystem::path& dir, const MetricsReport& r, const std::vector<DetPoint>& curve,
                         const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = to_json(r);
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_text_file(dir / "report.json", j.dump(2) + "\n");
  write_text_file(dir / "report.txt", to_text(r));
  write_text_file(dir / "det.csv", det_csv(curve));
}

}  // namespace gruaunet::metrics
