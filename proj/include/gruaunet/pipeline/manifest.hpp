// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "gruaunet/core/error.hpp"
#include "gruaunet/metrics/metrics.hpp"

namespace gruaunet::pipeline {

inline constexpr const char* kManifestVersionLine = "# gruaunet-manifest v1";

struct ManifestEntry {
  std::filesystem::path path;  ///< resolved against the manifest's directory
  std::string raw_path;        ///< as written in the file
  metrics::Label label = metrics::Label::Bonafide;
  std::string pai_type;
  std::string dataset_id;
  std::string subject_id;
  std::size_t line = 0;

  int label_index() const { return label == metrics::Label::Attack ? 1 : 0; }
};

struct ManifestOptions {
  bool check_files = true;
};

namespace detail {

/// RFC 4180 style: commas separate, double quotes group, "" escapes a quote.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        out.back() += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.emplace_back();
    } else {
      out.back() += ch;
    }
  }
  if (quoted) throw ManifestError(gruaunet::detail::concat("manifest line ", lineno, ": unterminated quote"));
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

}  // namespace detail

inline std::vector<ManifestEntry> parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                                                 const std::string& source = "manifest",
                                                 const ManifestOptions& opt = {}) {
  using gruaunet::detail::concat;
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      if (t.rfind("# gruaunet-manifest", 0) == 0 && t != kManifestVersionLine) {
        throw ManifestError(concat(source, " line ", lineno, ": unsupported manifest version '", t, "'"));
      }
      continue;
    }
    header = detail::split_csv_line(t, lineno);
    break;
  }
  if (header.empty()) throw ManifestError(source + ": missing header row");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) {
    const std::string name = detail::trim(header[i]);
    if (!col.emplace(name, i).second) throw ManifestError(concat(source, ": duplicate column '", name, "'"));
  }
  std::vector<std::string> missing;
  for (const char* required : {"path", "label", "pai_type", "dataset_id", "subject_id"}) {
    if (!col.count(required)) missing.emplace_back(required);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw ManifestError(concat(source, ": missing column(s): ", list));
  }

  std::vector<ManifestEntry> out;
  std::map<std::string, std::vector<std::size_t>> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto fields = detail::split_csv_line(t, lineno);
    if (fields.size() != header.size()) {
      throw ManifestError(concat(source, " line ", lineno, ": expected ", header.size(), " fields, got ",
                                 fields.size()));
    }
    for (auto& f : fields) f = detail::trim(f);
    ManifestEntry e;
    e.line = lineno;
    e.raw_path = fields[col["path"]];
    e.pai_type = fields[col["pai_type"]];
    e.dataset_id = fields[col["dataset_id"]];
    e.subject_id = fields[col["subject_id"]];
    const std::string& label = fields[col["label"]];
    if (label == "bonafide") {
      e.label = metrics::Label::Bonafide;
    } else if (label == "attack") {
      e.label = metrics::Label::Attack;
    } else {
      throw ManifestError(concat(source, " line ", lineno, ": bad label '", label, "' (expected bonafide or attack)"));
    }
    if (e.raw_path.empty()) throw ManifestError(concat(source, " line ", lineno, ": empty path"));
    if (e.label == metrics::Label::Attack && e.pai_type.empty()) {
      throw ManifestError(concat(source, " line ", lineno, ": attack row needs a pai_type"));
    }
    if (e.label == metrics::Label::Bonafide && !e.pai_type.empty()) {
      throw ManifestError(concat(source, " line ", lineno, ": bonafide row must leave pai_type empty"));
    }
    const std::filesystem::path p(e.raw_path);
    e.path = p.is_absolute() ? p : base_dir / p;
    if (opt.check_files && !std::filesystem::is_regular_file(e.path)) {
      throw ManifestError(concat(source, " line ", lineno, ": file not found: ", e.path.string()));
    }
    seen[e.path.lexically_normal().string()].push_back(lineno);
    out.push_back(std::move(e));
  }

  std::string dupes;
  for (const auto& [path, lines] : seen) {
    if (lines.size() < 2) continue;
    dupes += concat(dupes.empty() ? "" : "; ", path, " (lines");
    for (std::size_t l : lines) dupes += concat(" ", l);
    dupes += ")";
  }
  if (!dupes.empty()) throw ManifestError(source + ": duplicate paths: " + dupes);
  if (out.empty()) warn(source + ": manifest has no entries");
  return out;
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path, const ManifestOptions& opt = {}) {
  std::ifstream f(path);
  if (!f) throw ManifestError("cannot open manifest " + path.string());
  return parse_manifest(f, path.parent_path(), path.string(), opt);
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << kManifestVersionLine << "\npath,label,pai_type,dataset_id,subject_id\n";
  for (const auto& e : entries) {
    f << detail::csv_field(e.raw_path) << ',' << metrics::label_name(e.label) << ',' << detail::csv_field(e.pai_type)
      << ',' << detail::csv_field(e.dataset_id) << ',' << detail::csv_field(e.subject_id) << '\n';
  }
  if (!f) throw IoError("write failed for " + path.string());
}

inline std::vector<int> manifest_labels(const std::vector<ManifestEntry>& entries) {
  std::vector<int> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.label_index());
  return out;
}

}  // namespace gruaunet::pipeline
