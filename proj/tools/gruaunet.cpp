// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "gruaunet/metrics/report.hpp"
#include "gruaunet/pipeline/checkpoint.hpp"
#include "gruaunet/pipeline/config.hpp"
#include "gruaunet/pipeline/gradcheck_suite.hpp"
#include "gruaunet/pipeline/manifest.hpp"
#include "gruaunet/pipeline/synthetic.hpp"
#include "gruaunet/pipeline/train.hpp"

namespace fs = std::filesystem;
using namespace gruaunet;
using namespace gruaunet::pipeline;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

/// Test failures that are not caller mistakes, e.g. a failed gradient check.
struct RuntimeFailure : Error {
  using Error::Error;
};

Objective parse_objective(const std::string& s) {
  if (s == "combined") return Objective::Combined;
  if (s == "focal") return Objective::FocalOnly;
  throw ConfigError("--objective must be combined or focal, got '" + s + "'");
}

void cmd_train(const std::string& config, const std::string& manifest, const std::string& out,
               const std::string& resume, std::size_t epochs, const std::string& objective, bool quiet) {
  const RunConfig cfg = load_run_config(config);
  std::optional<Checkpoint> ck;
  if (!resume.empty()) ck = load_checkpoint(resume);
  const Dataset data = load_dataset(load_manifest(manifest), cfg.model.encoder.image_size);
  TrainOptions opt;
  opt.out_dir = fs::path(out);
  opt.resume = ck ? &*ck : nullptr;
  opt.objective = parse_objective(objective);
  opt.epochs_override = epochs;
  opt.progress = quiet ? nullptr : &std::cerr;
  const TrainResult r = train(cfg, data, opt);
  nlohmann::json j{{"checkpoint", (fs::path(out) / "model.gaun").string()},
                   {"steps", r.step},
                   {"threshold", r.threshold},
                   {"train_accuracy", r.final_accuracy}};
  if (!r.log.empty()) {
    j["initial_loss"] = r.log.front().loss;
    j["final_loss"] = r.log.back().loss;
  }
  std::cout << j.dump(2) << "\n";
}

void cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& report,
              const std::string& policy, bool strict_size) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  std::optional<metrics::ThresholdPolicy> p;
  if (!policy.empty()) p = metrics::ThresholdPolicy::parse(policy);
  const Dataset data = load_dataset(load_manifest(manifest), ck.config.model.encoder.image_size, strict_size);
  const EvalResult r = evaluate(ck.params, ck.config.model, data, ck.threshold, p);
  nlohmann::json extra{{"checkpoint", checkpoint}, {"manifest", manifest},
                       {"threshold_source", p ? "policy " + p->str() : std::string("checkpoint")}};
  metrics::write_report(report, r.report, r.curve, extra);
  std::cout << metrics::to_text(r.report);
}

void cmd_gradcheck(const std::string& module, std::size_t points, bool verbose) {
  const auto s = suite::run_suite(module, points, verbose ? &std::cout : nullptr);
  std::printf("gradcheck %s: %zu checks over %zu cases, %zu failed, worst rel err %.3e (%s), %.1f s\n",
              module.c_str(), s.points, s.cases, s.failures, s.worst, s.worst_case.c_str(), s.seconds);
  if (!s.pass()) throw RuntimeFailure("gradient check failed");
}

void cmd_synth(const std::string& spec, const std::string& out) {
  const auto entries = generate_synthetic(load_synthetic_spec(spec), out);
  std::printf("wrote %zu images and %s\n", entries.size(), (fs::path(out) / "manifest.csv").string().c_str());
}

void cmd_predict(const std::string& checkpoint, const std::string& image) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const auto p = predict_one(ck.params, ck.config.model,
                             load_image_tensor<float>(image, ck.config.model.encoder.image_size));
  nlohmann::json j{{"image", image},
                   {"score", p.prob},
                   {"threshold", ck.threshold},
                   {"decision", p.prob >= ck.threshold ? "attack" : "bonafide"}};
  std::cout << j.dump(2) << "\n";
}

void cmd_kfold(std::size_t k, std::uint64_t seed, const std::string& config, const std::string& manifest,
               const std::string& out, bool run) {
  RunConfig cfg = load_run_config(config);
  auto entries = load_manifest(manifest);
  const auto spec = metrics::kfold_split(manifest_labels(entries), k, seed);
  nlohmann::json j{{"k", k}, {"seed", seed}};
  for (std::size_t f = 0; f < k; ++f) {
    std::size_t attacks = 0;
    for (std::size_t i : spec.folds[f]) attacks += entries[i].label_index();
    j["folds"].push_back({{"indices", spec.folds[f]},
                          {"bonafide", spec.folds[f].size() - attacks},
                          {"attack", attacks}});
  }
  if (run) {
    const Dataset data = load_dataset(std::move(entries), cfg.model.encoder.image_size);
    double apcer = 0, bpcer = 0, acer = 0;
    for (std::size_t f = 0; f < k; ++f) {
      TrainOptions opt;
      if (!out.empty()) opt.out_dir = fs::path(out) / ("fold" + std::to_string(f));
      const TrainResult tr = train(cfg, data.subset(spec.train_indices(f)), opt);
      const EvalResult ev = evaluate(tr.params, cfg.model, data.subset(spec.folds[f]), tr.threshold);
      if (opt.out_dir) metrics::write_report(*opt.out_dir / "report", ev.report, ev.curve);
      j["folds"][f]["report"] = metrics::to_json(ev.report);
      apcer += ev.report.apcer_overall / static_cast<double>(k);
      bpcer += ev.report.bpcer / static_cast<double>(k);
      acer += ev.report.acer / static_cast<double>(k);
      std::cerr << "fold " << f << ": " << metrics::to_text(ev.report, "fold " + std::to_string(f));
    }
    j["mean"] = {{"apcer", apcer}, {"bpcer", bpcer}, {"acer", acer}};
  }
  if (!out.empty()) {
    fs::create_directories(out);
    metrics::write_text_file(fs::path(out) / "kfold.json", j.dump(2) + "\n");
  }
  std::cout << j.dump(2) << "\n";
}

void cmd_cross_eval(const std::string& config, const std::string& train_manifest, const std::string& test_manifest,
                    const std::string& report) {
  const RunConfig cfg = load_run_config(config);
  const std::size_t S = cfg.model.encoder.image_size;
  const Dataset train_ds = load_dataset(load_manifest(train_manifest), S);
  const Dataset test_ds = load_dataset(load_manifest(test_manifest), S);
  TrainOptions opt;
  opt.out_dir = fs::path(report) / "train";
  const auto r = cross_dataset_eval(cfg, train_ds, test_ds, opt);
  nlohmann::json extra{{"train_manifest", train_manifest},
                       {"test_manifest", test_manifest},
                       {"calibration_samples", r.calibration_size},
                       {"fit_samples", r.fit_size}};
  metrics::write_report(report, r.eval.report, r.eval.curve, extra);
  std::cout << metrics::to_text(r.eval.report, "cross-dataset evaluation");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GRU-AUNet presentation attack detection"};
  app.require_subcommand(1);

  std::string config, manifest, out, resume, objective = "combined";
  std::size_t epochs = 0;
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest");
  train_cmd->add_option("--config", config, "Run config JSON")->required();
  train_cmd->add_option("--manifest", manifest, "Training manifest CSV")->required();
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_option("--resume", resume, "Continue from a checkpoint");
  train_cmd->add_option("--epochs", epochs, "Override the configured epoch count");
  train_cmd->add_option("--objective", objective, "combined or focal");
  train_cmd->add_flag("--quiet", quiet, "No per-epoch progress");

  std::string checkpoint, report, policy;
  bool strict_size = false;
  auto* eval_cmd = app.add_subcommand("eval", "Score a manifest and write a report");
  eval_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--manifest", manifest, "Evaluation manifest CSV")->required();
  eval_cmd->add_option("--report", report, "Report directory")->required();
  eval_cmd->add_option("--threshold-policy", policy, "bpcer:<percent>, fixed:<t> or eer (default: stored threshold)");
  eval_cmd->add_flag("--strict-size", strict_size, "Reject images whose size differs from the model input");

  std::string module = "all";
  std::size_t points = 3;
  bool verbose = false;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient certification");
  gc_cmd->add_option("--module", module, "all, tensor, encoder, dfn, decoder, head or loss");
  gc_cmd->add_option("--points", points, "Random points per check")->check(CLI::PositiveNumber);
  gc_cmd->add_flag("--verbose,-v", verbose, "One line per check");

  std::string spec;
  auto* synth_cmd = app.add_subcommand("synth-data", "Generate a synthetic dataset");
  synth_cmd->add_option("--spec", spec, "Synthetic spec JSON")->required();
  synth_cmd->add_option("--out", out, "Output directory")->required();

  std::string image;
  auto* predict_cmd = app.add_subcommand("predict", "Score one image");
  predict_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  predict_cmd->add_option("--image", image, "PNG or PPM image")->required();

  std::size_t k = 5;
  std::uint64_t seed = 0;
  bool run_folds = false;
  auto* kfold_cmd = app.add_subcommand("kfold", "Stratified k-fold split, optionally trained and scored");
  kfold_cmd->add_option("--k", k, "Fold count");
  kfold_cmd->add_option("--seed", seed, "Split seed");
  kfold_cmd->add_option("--config", config, "Run config JSON")->required();
  kfold_cmd->add_option("--manifest", manifest, "Manifest CSV")->required();
  kfold_cmd->add_option("--out", out, "Write kfold.json (and per-fold runs) here");
  kfold_cmd->add_flag("--train", run_folds, "Train on k-1 folds and score the held-out fold");

  std::string train_manifest, test_manifest;
  auto* cross_cmd = app.add_subcommand("cross-eval", "Train on one dataset, test on another");
  cross_cmd->add_option("--config", config, "Run config JSON")->required();
  cross_cmd->add_option("--train-manifest", train_manifest, "Training-domain manifest")->required();
  cross_cmd->add_option("--test-manifest", test_manifest, "Test-domain manifest")->required();
  cross_cmd->add_option("--report", report, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    worker_threads();
    if (*train_cmd) cmd_train(config, manifest, out, resume, epochs, objective, quiet);
    if (*eval_cmd) cmd_eval(checkpoint, manifest, report, policy, strict_size);
    if (*gc_cmd) cmd_gradcheck(module, points, verbose);
    if (*synth_cmd) cmd_synth(spec, out);
    if (*predict_cmd) cmd_predict(checkpoint, image);
    if (*kfold_cmd) cmd_kfold(k, seed, config, manifest, out, run_folds);
    if (*cross_cmd) cmd_cross_eval(config, train_manifest, test_manifest, report);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
