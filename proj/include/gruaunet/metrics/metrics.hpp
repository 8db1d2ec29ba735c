// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gruaunet/core/error.hpp"
#include "gruaunet/tensor/params.hpp"

namespace gruaunet::metrics {

enum class Label : std::uint8_t { Bonafide, Attack };

inline const char* label_name(Label l) { return l == Label::Attack ? "attack" : "bonafide"; }

/// score = P(spoof); the sample is called an attack iff score >= threshold.
struct ScoredSample {
  double score = 0;
  Label label = Label::Bonafide;
  std::string pai_type;
  std::string dataset_id;
};

inline void validate_samples(const std::vector<ScoredSample>& samples) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!std::isfinite(s.score) || s.score < 0 || s.score > 1) {
      throw ValidationError(detail::concat("sample ", i, ": score ", s.score, " outside [0,1]"));
    }
    if (s.label == Label::Attack && s.pai_type.empty()) {
      throw ValidationError(detail::concat("sample ", i, ": attack without a PAI type"));
    }
    if (s.label == Label::Bonafide && !s.pai_type.empty()) {
      throw ValidationError(detail::concat("sample ", i, ": bonafide sample tagged with PAI '", s.pai_type, "'"));
    }
  }
}

struct ApcerResult {
  double overall = 0;  ///< pooled over every attack, percent
  std::map<std::string, double> per_pai;
  std::map<std::string, std::size_t> attacks_per_pai, missed_per_pai;
  std::size_t attacks = 0, missed = 0;
};

inline ApcerResult apcer(const std::vector<ScoredSample>& samples, double threshold) {
  ApcerResult r;
  for (const auto& s : samples) {
    if (s.label != Label::Attack) continue;
    ++r.attacks;
    ++r.attacks_per_pai[s.pai_type];
    r.missed_per_pai.try_emplace(s.pai_type, 0);
    if (s.score < threshold) {
      ++r.missed;
      ++r.missed_per_pai[s.pai_type];
    }
  }
  if (r.attacks == 0) throw ValidationError("apcer: no attack samples");
  r.overall = 100.0 * static_cast<double>(r.missed) / static_cast<double>(r.attacks);
  for (const auto& [tag, n] : r.attacks_per_pai) {
    r.per_pai[tag] = 100.0 * static_cast<double>(r.missed_per_pai[tag]) / static_cast<double>(n);
  }
  return r;
}

struct BpcerResult {
  double rate = 0;
  std::size_t bonafide = 0, flagged = 0;
};

inline BpcerResult bpcer_counts(const std::vector<ScoredSample>& samples, double threshold) {
  BpcerResult r;
  for (const auto& s : samples) {
    if (s.label != Label::Bonafide) continue;
    ++r.bonafide;
    if (s.score >= threshold) ++r.flagged;
  }
  if (r.bonafide == 0) throw ValidationError("bpcer: no bonafide samples");
  r.rate = 100.0 * static_cast<double>(r.flagged) / static_cast<double>(r.bonafide);
  return r;
}

inline double bpcer(const std::vector<ScoredSample>& samples, double threshold) {
  return bpcer_counts(samples, threshold).rate;
}

inline double acer(double apcer_pct, double bpcer_pct) { return (apcer_pct + bpcer_pct) / 2.0; }

enum class Rounding { HalfEven, HalfUp };

/// Rounds the decimal value of `v` (after discarding binary noise below
/// 1e-12) to `places` decimals.
inline double round_decimal(double v, int places, Rounding mode = Rounding::HalfEven) {
  if (!std::isfinite(v)) return v;
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, std::abs(v), std::chars_format::fixed, 12);
  std::string s(buf, res.ptr);
  const std::size_t dot = s.find('.');
  std::string digits = s.substr(0, dot) + s.substr(dot + 1);
  const std::size_t keep = dot + static_cast<std::size_t>(places);
  const std::string tail = digits.substr(keep);
  bool up = false;
  if (tail[0] > '5') {
    up = true;
  } else if (tail[0] == '5') {
    const bool exact_half = tail.find_first_not_of('0', 1) == std::string::npos;
    if (!exact_half || mode == Rounding::HalfUp) {
      up = true;
    } else {
      up = ((digits[keep - 1] - '0') % 2) == 1;
    }
  }
  digits.resize(keep);
  double out = 0;
  for (char c : digits) out = out * 10 + (c - '0');
  if (up) out += 1;
  out /= std::pow(10.0, places);
  return v < 0 ? -out : out;
}

inline std::string format_rate(double v, int places = 4) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, round_decimal(v, places), std::chars_format::fixed, places);
  return std::string(buf, res.ptr);
}

struct DetPoint {
  double threshold, apcer, bpcer;
};

inline void require_both_classes(const std::vector<ScoredSample>& samples, const char* who) {
  bool a = false, b = false;
  for (const auto& s : samples) (s.label == Label::Attack ? a : b) = true;
  if (!a || !b) throw ValidationError(detail::concat(who, ": both bonafide and attack samples are required"));
}

/// Sweeps the sorted unique scores plus one threshold above the maximum
/// (everything called bonafide). `num_points` > 0 thins the sweep evenly,
/// always keeping both ends.
inline std::vector<DetPoint> det_curve(const std::vector<ScoredSample>& samples, std::size_t num_points = 0) {
  require_both_classes(samples, "det_curve");
  std::vector<double> bona, att;
  for (const auto& s : samples) (s.label == Label::Attack ? att : bona).push_back(s.score);
  std::sort(bona.begin(), bona.end());
  std::sort(att.begin(), att.end());
  std::vector<double> ts;
  for (const auto& s : samples) ts.push_back(s.score);
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  ts.push_back(std::nextafter(ts.back(), 2.0));
  if (num_points >= 2 && ts.size() > num_points) {
    std::vector<double> thin;
    for (std::size_t i = 0; i < num_points; ++i) thin.push_back(ts[i * (ts.size() - 1) / (num_points - 1)]);
    thin.erase(std::unique(thin.begin(), thin.end()), thin.end());
    ts = std::move(thin);
  }
  std::vector<DetPoint> out;
  out.reserve(ts.size());
  for (double t : ts) {
    const auto missed = std::lower_bound(att.begin(), att.end(), t) - att.begin();
    const auto flagged = bona.end() - std::lower_bound(bona.begin(), bona.end(), t);
    out.push_back({t, 100.0 * static_cast<double>(missed) / static_cast<double>(att.size()),
                   100.0 * static_cast<double>(flagged) / static_cast<double>(bona.size())});
  }
  return out;
}

struct EerPoint {
  double threshold, eer;
};

/// Operating point where |APCER - BPCER| is smallest; eer is their mean there.
inline EerPoint equal_error_rate(const std::vector<ScoredSample>& samples) {
  auto curve = det_curve(samples);
  const DetPoint* best = &curve.front();
  for (const auto& p : curve) {
    if (std::abs(p.apcer - p.bpcer) < std::abs(best->apcer - best->bpcer)) best = &p;
  }
  return {best->threshold, acer(best->apcer, best->bpcer)};
}

/// How the decision threshold is picked on calibration scores.
struct ThresholdPolicy {
  enum class Kind { BpcerTarget, Fixed, Eer } kind = Kind::BpcerTarget;
  double value = 0.1;  ///< BPCER target in percent, or the fixed threshold

  static ThresholdPolicy parse(const std::string& s) {
    const auto colon = s.find(':');
    const std::string name = s.substr(0, colon);
    auto number = [&]() {
      if (colon == std::string::npos) throw ConfigError("threshold policy '" + s + "' needs a value after ':'");
      const std::string v = s.substr(colon + 1);
      double out = 0;
      auto res = std::from_chars(v.data(), v.data() + v.size(), out);
      if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
        throw ConfigError("threshold policy '" + s + "': bad number '" + v + "'");
      }
      return out;
    };
    ThresholdPolicy p;
    if (name == "bpcer") {
      p.kind = Kind::BpcerTarget;
      p.value = number();
      if (p.value < 0 || p.value > 100) throw ConfigError("bpcer target must be a percentage in [0,100]");
    } else if (name == "fixed") {
      p.kind = Kind::Fixed;
      p.value = number();
      if (p.value < 0 || p.value > 1) throw ConfigError("fixed threshold must be in [0,1]");
    } else if (name == "eer") {
      if (colon != std::string::npos) throw ConfigError("the eer threshold policy takes no value");
      p.kind = Kind::Eer;
      p.value = 0;
    } else {
      throw ConfigError("unknown threshold policy '" + s + "' (expected bpcer:<pct>|fixed:<t>|eer)");
    }
    return p;
  }

  std::string str() const {
    switch (kind) {
      case Kind::BpcerTarget:
        return detail::concat("bpcer:", value);
      case Kind::Fixed:
        return detail::concat("fixed:", value);
      case Kind::Eer:
        break;
    }
    return "eer";
  }
};

/// Smallest threshold meeting the policy on `calibration`. For the BPCER
/// target the returned threshold is the midpoint between the chosen score and
/// the next lower one, which leaves every calibration decision unchanged.
inline double choose_threshold(const std::vector<ScoredSample>& calibration, const ThresholdPolicy& policy) {
  if (policy.kind == ThresholdPolicy::Kind::Fixed) return policy.value;
  if (policy.kind == ThresholdPolicy::Kind::Eer) return equal_error_rate(calibration).threshold;
  auto curve = det_curve(calibration);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve[i].bpcer <= policy.value + 1e-12) {
      if (i == 0) return curve[i].threshold;
      const double mid = 0.5 * (curve[i - 1].threshold + curve[i].threshold);
      return mid > curve[i - 1].threshold ? mid : curve[i].threshold;
    }
  }
  return curve.back().threshold;
}

struct MetricsReport {
  double threshold = 0.5;
  double apcer_overall = 0;
  std::map<std::string, double> apcer_per_pai;
  double apcer_max_pai = 0;  ///< worst per-PAI APCER, the alternative convention
  double bpcer = 0;
  double acer = 0;
  std::size_t bonafide = 0, attacks = 0, missed_attacks = 0, flagged_bonafide = 0;
  std::map<std::string, std::size_t> attacks_per_pai;
};

inline MetricsReport make_report(const std::vector<ScoredSample>& samples, double threshold) {
  validate_samples(samples);
  MetricsReport r;
  r.threshold = threshold;
  const ApcerResult a = apcer(samples, threshold);
  const BpcerResult b = bpcer_counts(samples, threshold);
  r.apcer_overall = a.overall;
  r.apcer_per_pai = a.per_pai;
  for (const auto& [tag, v] : a.per_pai) r.apcer_max_pai = std::max(r.apcer_max_pai, v);
  r.attacks_per_pai = a.attacks_per_pai;
  r.attacks = a.attacks;
  r.missed_attacks = a.missed;
  r.bpcer = b.rate;
  r.bonafide = b.bonafide;
  r.flagged_bonafide = b.flagged;
  r.acer = acer(r.apcer_overall, r.bpcer);
  return r;
}

/// Stratified k-fold split; fold sizes differ by at most one.
struct FoldSpec {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> folds;

  /// Every index outside fold `f`, ascending.
  std::vector<std::size_t> train_indices(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < folds.size(); ++j) {
      if (j != f) out.insert(out.end(), folds[j].begin(), folds[j].end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

inline FoldSpec kfold_split(const std::vector<int>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError(detail::concat("kfold: k must be >= 2, got ", k));
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [c, idx] : by_class) {
    if (idx.size() < k) {
      throw ValidationError(detail::concat("kfold: class ", c, " has ", idx.size(), " samples, fewer than k=", k));
    }
  }
  if (by_class.empty()) throw ValidationError("kfold: no samples");
  Rng rng(seed);
  FoldSpec spec{k, seed, std::vector<std::vector<std::size_t>>(k)};
  std::size_t next = 0;
  for (auto& [c, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (std::size_t i : idx) {
      spec.folds[next].push_back(i);
      next = (next + 1) % k;
    }
  }
  for (auto& f : spec.folds) std::sort(f.begin(), f.end());
  return spec;
}

}  // namespace gruaunet::metrics
