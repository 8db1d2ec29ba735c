// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "gruaunet/pipeline/config.hpp"
#include "gruaunet/pipeline/image.hpp"
#include "gruaunet/pipeline/manifest.hpp"

namespace gruaunet::pipeline {

/// Recording conditions shared by every image of one synthetic "sensor".
struct SyntheticDomain {
  double brightness = 0.0;  ///< additive offset
  double contrast = 1.0;    ///< scales the ridge amplitude
  double freq_lo = 3.0, freq_hi = 6.0;  ///< ridge periods per image side
};

/// Bonafide: smooth oriented ridge sinusoids around mean 0.45.
/// Attack: the same ridges, brighter by `class_offset`, with a per-PAI
/// high-frequency overlay of amplitude `noise_amp`.
struct SyntheticSpec {
  std::size_t image_size = 64;
  std::size_t bonafide = 16;
  std::size_t attack = 16;
  std::vector<std::string> pai_types{"PH", "PD", "EF"};
  std::uint64_t seed = 7;
  std::string dataset_id = "SYN";
  std::string format = "png";
  double ridge_amp = 0.2;
  double class_offset = 0.15;
  double noise_amp = 0.2;
  SyntheticDomain domain;

  void validate() const {
    if (image_size < 4) throw ConfigError("synthetic: image_size must be >= 4");
    if (bonafide + attack == 0) throw ConfigError("synthetic: no samples requested");
    if (attack > 0 && pai_types.empty()) throw ConfigError("synthetic: attacks need at least one pai type");
    for (const auto& t : pai_types) {
      if (t.empty()) throw ConfigError("synthetic: empty pai type");
    }
    if (format != "png" && format != "ppm") throw ConfigError("synthetic: format must be png or ppm");
    if (dataset_id.empty()) throw ConfigError("synthetic: dataset_id must be non-empty");
    if (!(domain.freq_lo > 0 && domain.freq_hi >= domain.freq_lo)) throw ConfigError("synthetic: bad ridge frequency range");
    if (!(ridge_amp >= 0 && noise_amp >= 0 && domain.contrast >= 0)) {
      throw ConfigError("synthetic: amplitudes must be >= 0");
    }
  }
};

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  detail::Reader r(j, "synthetic");
  int version = 0;
  r.get("version", version);
  if (version != kConfigVersion) {
    throw ConfigError(gruaunet::detail::concat("synthetic: version ", version, " not supported (expected ",
                                               kConfigVersion, ")"));
  }
  SyntheticSpec s;
  r.get("image_size", s.image_size);
  r.get("bonafide", s.bonafide);
  r.get("attack", s.attack);
  r.get("pai_types", s.pai_types);
  r.get("seed", s.seed);
  r.get("dataset_id", s.dataset_id);
  r.get("format", s.format);
  r.get("ridge_amp", s.ridge_amp);
  r.get("class_offset", s.class_offset);
  r.get("noise_amp", s.noise_amp);
  if (auto* d = r.child("domain")) {
    detail::Reader dr(*d, "synthetic.domain");
    dr.get("brightness", s.domain.brightness);
    dr.get("contrast", s.domain.contrast);
    std::vector<double> freq{s.domain.freq_lo, s.domain.freq_hi};
    dr.get("ridge_freq", freq);
    if (freq.size() != 2) throw ConfigError("synthetic.domain.ridge_freq must be [lo, hi]");
    s.domain.freq_lo = freq[0];
    s.domain.freq_hi = freq[1];
    dr.finish();
  }
  r.finish();
  s.validate();
  return s;
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"version", kConfigVersion},
          {"image_size", s.image_size},
          {"bonafide", s.bonafide},
          {"attack", s.attack},
          {"pai_types", s.pai_types},
          {"seed", s.seed},
          {"dataset_id", s.dataset_id},
          {"format", s.format},
          {"ridge_amp", s.ridge_amp},
          {"class_offset", s.class_offset},
          {"noise_amp", s.noise_amp},
          {"domain",
           {{"brightness", s.domain.brightness},
            {"contrast", s.domain.contrast},
            {"ridge_freq", {s.domain.freq_lo, s.domain.freq_hi}}}}};
}

inline SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open synthetic spec " + path.string());
  try {
    return synthetic_spec_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

namespace detail {

/// Portable generator: the output only depends on (seed, stream).
class SplitMix {
 public:
  SplitMix(std::uint64_t seed, std::uint64_t stream) : s_(seed ^ (stream * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL)) {
    next();
  }
  std::uint64_t next() {
    std::uint64_t z = (s_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  double uniform(double lo = 0, double hi = 1) {
    return lo + (hi - lo) * static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t s_;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// One image; `pai` indexes spec.pai_types, or is negative for bonafide.
inline Image synthesize_image(const SyntheticSpec& spec, std::size_t index, int pai) {
  detail::SplitMix rng(spec.seed, index);
  const std::size_t n = spec.image_size;
  const double pi = std::numbers::pi;
  const double theta = rng.uniform(0, pi);
  const double freq = rng.uniform(spec.domain.freq_lo, spec.domain.freq_hi);
  const double phase = rng.uniform(0, 2 * pi);
  const double amp = spec.ridge_amp * spec.domain.contrast;
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.02, 0.02);
  const double base = 0.45 + spec.domain.brightness + (pai >= 0 ? spec.class_offset : 0.0);
  const double kx = 2 * pi * freq * std::cos(theta) / static_cast<double>(n);
  const double ky = 2 * pi * freq * std::sin(theta) / static_cast<double>(n);
  Image im(n, n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double ridge = amp * std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
      double overlay = 0;
      if (pai >= 0) {
        const double u = rng.uniform(-1, 1);
        switch (pai % 3) {
          case 0: overlay = u; break;                                      // white grain
          case 1: overlay = ((x + y) % 2 ? 1.0 : -1.0) * (0.5 + 0.5 * std::abs(u)); break;  // checker print
          default: overlay = ((x / 2 + y) % 2 ? 1.0 : -1.0) * std::abs(u); break;            // moire stripes
        }
        overlay *= spec.noise_amp;
      }
      for (std::size_t c = 0; c < 3; ++c) im.at(y, x, c) = detail::to_byte(base + tint[c] + ridge + overlay);
    }
  }
  return im;
}

/// Writes images under out/images and returns the manifest entries, also
/// saved as out/manifest.csv. Bonafide samples come first.
inline std::vector<ManifestEntry> generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out / "images", ec);
  if (ec) throw IoError("cannot create " + (out / "images").string() + ": " + ec.message());
  std::vector<ManifestEntry> entries;
  const std::size_t total = spec.bonafide + spec.attack;
  for (std::size_t i = 0; i < total; ++i) {
    const bool attack = i >= spec.bonafide;
    const int pai = attack ? static_cast<int>((i - spec.bonafide) % spec.pai_types.size()) : -1;
    ManifestEntry e;
    e.label = attack ? metrics::Label::Attack : metrics::Label::Bonafide;
    e.pai_type = attack ? spec.pai_types[static_cast<std::size_t>(pai)] : "";
    e.dataset_id = spec.dataset_id;
    e.subject_id = gruaunet::detail::concat("s", i / 2);
    char name[64];
    std::snprintf(name, sizeof name, "%05zu_%s.%s", i, attack ? "attack" : "bonafide", spec.format.c_str());
    e.raw_path = std::string("images/") + name;
    e.path = out / e.raw_path;
    const Image im = synthesize_image(spec, i, pai);
    if (spec.format == "png") {
      write_png(e.path, im);
    } else {
      write_ppm(e.path, im);
    }
    entries.push_back(std::move(e));
  }
  write_manifest(out / "manifest.csv", entries);
  return entries;
}

}  // namespace gruaunet::pipeline
