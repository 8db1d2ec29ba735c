// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "gruaunet/loss/losses.hpp"
#include "gruaunet/loss/optim.hpp"
#include "gruaunet/metrics/metrics.hpp"
#include "gruaunet/pipeline/model.hpp"

namespace gruaunet::pipeline {

inline constexpr int kConfigVersion = 1;

struct TrainingConfig {
  std::size_t epochs = 200;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  long warmup = -1;  ///< optimizer steps; negative = 5% of the run
  bool hflip = false;
  loss::PairStrategy pairs = loss::PairStrategy::Balanced;
};

struct EvalConfig {
  metrics::ThresholdPolicy policy{};
  std::size_t k = 5;
  double calibration_fraction = 0.2;
};

struct RunConfig {
  std::string preset = "default";
  ModelConfig model;
  loss::FocalConfig focal;
  loss::ContrastiveConfig contrastive;
  loss::AdamConfig adam;
  TrainingConfig training;
  EvalConfig eval;

  static RunConfig defaults(const std::string& preset) {
    RunConfig c;
    c.preset = preset;
    if (preset == "toy") {
      c.model = ModelConfig::toy();
      c.adam.lr = 3e-3;
    } else if (preset != "default") {
      throw ConfigError("unknown preset '" + preset + "' (expected default or toy)");
    }
    return c;
  }

  void validate() const {
    model.validate();
    focal.validate();
    contrastive.validate();
    adam.validate();
    if (training.epochs == 0) throw ConfigError("training.epochs must be >= 1");
    if (training.batch < 2) throw ConfigError("training.batch must be >= 2 so pairs can be formed");
    if (eval.k < 2) throw ConfigError("eval.k must be >= 2");
    if (!(eval.calibration_fraction > 0 && eval.calibration_fraction < 1)) {
      throw ConfigError("eval.calibration_fraction must be in (0,1)");
    }
  }
};

namespace detail {

using nlohmann::json;

/// Walks one JSON object, rejecting keys nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
      if (!j_.at(key).is_number_unsigned()) throw ConfigError(where_ + "." + key + ": expected a non-negative integer");
    }
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline std::string pair_strategy_name(loss::PairStrategy s) {
  return s == loss::PairStrategy::All ? "all" : "balanced";
}
inline loss::PairStrategy parse_pair_strategy(const std::string& s) {
  if (s == "all") return loss::PairStrategy::All;
  if (s == "balanced") return loss::PairStrategy::Balanced;
  throw ConfigError("training.pairs must be 'balanced' or 'all', got '" + s + "'");
}
inline std::string focal_variant_name(loss::FocalVariant v) {
  return v == loss::FocalVariant::Standard ? "standard" : "verbatim";
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& m = c.model;
  nlohmann::json j;
  j["version"] = kConfigVersion;
  j["preset"] = c.preset;
  j["encoder"] = {{"image_size", m.encoder.image_size}, {"patch_size", m.encoder.patch_size},
                  {"embed_dim", m.encoder.embed_dim},   {"depths", m.encoder.depths},
                  {"heads", m.encoder.heads},           {"window_size", m.encoder.window_size},
                  {"mlp_ratio", m.encoder.mlp_ratio}};
  j["dfn"] = {{"filters", m.dfn_filters}, {"reduction", m.dfn_reduction}};
  j["decoder"] = {{"blocks_per_level", m.decoder.blocks_per_level},
                  {"gate_reduction", m.decoder.gate_reduction},
                  {"spatial_kernel", m.decoder.spatial_kernel},
                  {"bypass_gates", m.decoder.bypass_gates}};
  j["head"] = {{"widths", m.head.widths},
               {"hidden", m.head.hidden},
               {"reduction", m.head.reduction},
               {"conv_kernel", m.head.conv_kernel},
               {"spatial_kernel", m.head.spatial_kernel}};
  j["loss"] = {{"alpha", c.focal.alpha},
               {"gamma", c.focal.gamma},
               {"focal_variant", detail::focal_variant_name(c.focal.variant)},
               {"strict", c.focal.strict},
               {"margin", c.contrastive.margin},
               {"lambda", c.contrastive.lambda}};
  j["optimizer"] = {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
  j["training"] = {{"epochs", c.training.epochs},
                   {"batch", c.training.batch},
                   {"seed", c.training.seed},
                   {"warmup", c.training.warmup},
                   {"hflip", c.training.hflip},
                   {"pairs", detail::pair_strategy_name(c.training.pairs)}};
  j["eval"] = {{"threshold_policy", c.eval.policy.str()},
               {"k", c.eval.k},
               {"calibration_fraction", c.eval.calibration_fraction}};
  return j;
}

inline bool same_architecture(const RunConfig& a, const RunConfig& b) {
  const auto ja = to_json(a), jb = to_json(b);
  for (const char* k : {"encoder", "dfn", "decoder", "head"}) {
    if (ja.at(k) != jb.at(k)) return false;
  }
  return true;
}

/// Missing keys keep the preset's value; unknown keys are an error.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::Reader;
  Reader top(j, "config");
  int version = 0;
  top.get("version", version);
  if (!j.contains("version")) throw ConfigError("config: missing 'version'");
  if (version != kConfigVersion) {
    throw ConfigError(gruaunet::detail::concat("config: version ", version, " not supported (expected ",
                                               kConfigVersion, ")"));
  }
  std::string preset = "default";
  top.get("preset", preset);
  RunConfig c = RunConfig::defaults(preset);
  auto& m = c.model;
  if (auto* s = top.child("encoder")) {
    Reader r(*s, "encoder");
    r.get("image_size", m.encoder.image_size);
    r.get("patch_size", m.encoder.patch_size);
    r.get("embed_dim", m.encoder.embed_dim);
    r.get("depths", m.encoder.depths);
    r.get("heads", m.encoder.heads);
    r.get("window_size", m.encoder.window_size);
    r.get("mlp_ratio", m.encoder.mlp_ratio);
    r.finish();
  }
  if (auto* s = top.child("dfn")) {
    Reader r(*s, "dfn");
    r.get("filters", m.dfn_filters);
    r.get("reduction", m.dfn_reduction);
    r.finish();
  }
  if (auto* s = top.child("decoder")) {
    Reader r(*s, "decoder");
    r.get("blocks_per_level", m.decoder.blocks_per_level);
    r.get("gate_reduction", m.decoder.gate_reduction);
    r.get("spatial_kernel", m.decoder.spatial_kernel);
    r.get("bypass_gates", m.decoder.bypass_gates);
    r.finish();
  }
  if (auto* s = top.child("head")) {
    Reader r(*s, "head");
    r.get("widths", m.head.widths);
    r.get("hidden", m.head.hidden);
    r.get("reduction", m.head.reduction);
    r.get("conv_kernel", m.head.conv_kernel);
    r.get("spatial_kernel", m.head.spatial_kernel);
    r.finish();
  }
  if (auto* s = top.child("loss")) {
    Reader r(*s, "loss");
    r.get("alpha", c.focal.alpha);
    r.get("gamma", c.focal.gamma);
    std::string variant = detail::focal_variant_name(c.focal.variant);
    r.get("focal_variant", variant);
    c.focal.variant = loss::parse_focal_variant(variant);
    r.get("strict", c.focal.strict);
    r.get("margin", c.contrastive.margin);
    r.get("lambda", c.contrastive.lambda);
    r.finish();
  }
  if (auto* s = top.child("optimizer")) {
    Reader r(*s, "optimizer");
    r.get("lr", c.adam.lr);
    r.get("beta1", c.adam.beta1);
    r.get("beta2", c.adam.beta2);
    r.get("eps", c.adam.eps);
    r.finish();
  }
  if (auto* s = top.child("training")) {
    Reader r(*s, "training");
    r.get("epochs", c.training.epochs);
    r.get("batch", c.training.batch);
    r.get("seed", c.training.seed);
    r.get("warmup", c.training.warmup);
    r.get("hflip", c.training.hflip);
    std::string pairs = detail::pair_strategy_name(c.training.pairs);
    r.get("pairs", pairs);
    c.training.pairs = detail::parse_pair_strategy(pairs);
    r.finish();
  }
  if (auto* s = top.child("eval")) {
    Reader r(*s, "eval");
    std::string policy = c.eval.policy.str();
    r.get("threshold_policy", policy);
    c.eval.policy = metrics::ThresholdPolicy::parse(policy);
    r.get("k", c.eval.k);
    r.get("calibration_fraction", c.eval.calibration_fraction);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace gruaunet::pipeline
