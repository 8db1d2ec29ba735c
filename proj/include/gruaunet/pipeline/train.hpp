// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gruaunet/loss/losses.hpp"
#include "gruaunet/loss/optim.hpp"
#include "gruaunet/metrics/metrics.hpp"
#include "gruaunet/metrics/report.hpp"
#include "gruaunet/pipeline/checkpoint.hpp"
#include "gruaunet/pipeline/config.hpp"
#include "gruaunet/pipeline/image.hpp"
#include "gruaunet/pipeline/manifest.hpp"
#include "gruaunet/pipeline/model.hpp"

namespace gruaunet::pipeline {

/// Worker count: GRUAUNET_THREADS if set, else the hardware concurrency.
inline std::size_t worker_threads() {
  std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  const char* env = std::getenv("GRUAUNET_THREADS");
  if (!env || !*env) return hw;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError(std::string("GRUAUNET_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<std::size_t>(v);
}

/// Runs fn(i) for i in [0,n) on up to `threads` workers; rethrows the first
/// failure by index so errors are reproducible.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(std::max<std::size_t>(threads, 1), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct Dataset {
  std::vector<ManifestEntry> entries;
  std::vector<Tensor<float>> images;  ///< [3,S,S] each

  std::size_t size() const { return entries.size(); }
  std::vector<int> labels() const { return manifest_labels(entries); }
  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    for (std::size_t i : idx) {
      d.entries.push_back(entries.at(i));
      d.images.push_back(images.at(i));
    }
    return d;
  }
};

/// Decodes every entry, resizing to `size`. With `strict_size` a native size
/// other than size x size is an error instead.
inline Dataset load_dataset(std::vector<ManifestEntry> entries, std::size_t size, bool strict_size = false) {
  Dataset d;
  d.images.resize(entries.size());
  parallel_for(entries.size(), worker_threads(), [&](std::size_t i) {
    const Image im = read_image(entries[i].path);
    if (strict_size && (im.width != size || im.height != size)) {
      throw ShapeError(gruaunet::detail::concat("manifest line ", entries[i].line, ": image ", entries[i].raw_path,
                                                " is ", im.width, "x", im.height, ", model expects ", size, "x", size));
    }
    d.images[i] = image_to_tensor<float>(im, size);
  });
  d.entries = std::move(entries);
  return d;
}

inline Tensor<float> hflip(const Tensor<float>& img) {
  const auto& s = img.shape();
  Tensor<float> out(s);
  const std::size_t C = s[0], H = s[1], W = s[2];
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(c * H + y) * W + x] = img[(c * H + y) * W + (W - 1 - x)];
  return out;
}

struct Prediction {
  double prob = 0;
  double logit = 0;
  std::vector<float> embedding;
};

inline Prediction predict_one(const ParamSet<float>& params, const ModelConfig& cfg, const Tensor<float>& image) {
  Graph<float> g;
  auto out = model_forward(g, params, g.constant(image), cfg);
  Prediction p;
  p.prob = out.prob.value()[0];
  p.logit = out.logit.value()[0];
  p.embedding.assign(out.embedding.value().data().begin(), out.embedding.value().data().end());
  return p;
}

inline std::vector<Prediction> predict_all(const ParamSet<float>& params, const ModelConfig& cfg, const Dataset& data) {
  std::vector<Prediction> out(data.size());
  parallel_for(data.size(), worker_threads(), [&](std::size_t i) { out[i] = predict_one(params, cfg, data.images[i]); });
  return out;
}

inline std::vector<metrics::ScoredSample> scored_samples(const Dataset& data, const std::vector<Prediction>& preds) {
  std::vector<metrics::ScoredSample> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& e = data.entries[i];
    out.push_back({preds[i].prob, e.label, e.pai_type, e.dataset_id});
  }
  return out;
}

struct EpochLog {
  std::size_t epoch = 0;  ///< 1-based
  std::size_t step = 0;   ///< optimizer steps taken so far
  double loss = 0, focal = 0, contrastive = 0, lr = 0, train_acc = 0;
};

enum class Objective { Combined, FocalOnly };

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  ///< log, checkpoint and failure dumps
  const Checkpoint* resume = nullptr;
  Objective objective = Objective::Combined;
  std::size_t epochs_override = 0;  ///< 0 = config value
  std::ostream* progress = nullptr;
};

struct TrainResult {
  ParamSet<float> params;
  std::vector<EpochLog> log;
  std::uint64_t step = 0;
  double threshold = 0.5;
  double final_accuracy = 0;  ///< at threshold 0.5, after training
};

inline std::string log_csv_header() { return "epoch,step,loss,focal,contrastive,lr,train_acc\n"; }
inline std::string log_csv_row(const EpochLog& e) {
  std::ostringstream os;
  os << std::setprecision(10) << e.epoch << ',' << e.step << ',' << e.loss << ',' << e.focal << ',' << e.contrastive
     << ',' << e.lr << ',' << e.train_acc << '\n';
  return os.str();
}

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Per-epoch order: each class shuffled, then interleaved so batches mix classes.
inline std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<int>& labels, std::size_t batch,
                                                           std::uint64_t seed) {
  Rng rng(seed);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<std::vector<std::size_t>*> queues;
  for (auto& [c, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    queues.push_back(&idx);
  }
  std::vector<std::size_t> order;
  order.reserve(labels.size());
  std::vector<double> taken(queues.size(), 0);
  while (order.size() < labels.size()) {
    std::size_t best = queues.size();
    double best_frac = 2;
    for (std::size_t q = 0; q < queues.size(); ++q) {
      const double n = static_cast<double>(queues[q]->size());
      if (taken[q] >= n) continue;
      const double frac = (taken[q] + 0.5) / n;
      if (frac < best_frac) best_frac = frac, best = q;
    }
    order.push_back((*queues[best])[static_cast<std::size_t>(taken[best])]);
    taken[best] += 1;
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch)));
  }
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].insert(out[out.size() - 2].end(), out.back().begin(), out.back().end());
    out.pop_back();
  }
  return out;
}

inline void dump_bad_batch(const std::filesystem::path& path, const Dataset& data, const std::vector<std::size_t>& idx,
                           const std::vector<double>& logits, std::size_t step, const std::string& what) {
  nlohmann::json j;
  j["step"] = step;
  j["error"] = what;
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& e = data.entries[idx[b]];
    j["samples"].push_back({{"path", e.path.string()},
                            {"label", metrics::label_name(e.label)},
                            {"logit", std::isfinite(logits[b]) ? nlohmann::json(logits[b]) : nlohmann::json("non-finite")}});
  }
  metrics::write_text_file(path, j.dump(2) + "\n");
}

}  // namespace detail

struct BatchStats {
  double loss = 0, focal = 0, contrastive = 0;
  std::size_t correct = 0;
};

/// One optimizer step on `idx`: per-sample model graphs, a small loss graph
/// over their outputs, then gradients summed in sample order.
inline BatchStats train_step(const RunConfig& cfg, ParamSet<float>& params, loss::Adam<float>& adam,
                             const Dataset& data, const std::vector<std::size_t>& idx, std::uint64_t step, double lr,
                             Objective objective, bool flip_parity, const std::optional<std::filesystem::path>& dump_dir) {
  const std::size_t B = idx.size();
  std::vector<std::unique_ptr<Graph<float>>> graphs(B);
  std::vector<ModelOutput<float>> outs(B);
  auto fail = [&](const std::string& what, const std::vector<double>& logits) {
    std::string where = "(no output directory)";
    if (dump_dir) {
      const auto path = *dump_dir / gruaunet::detail::concat("nonfinite_step", step, ".json");
      detail::dump_bad_batch(path, data, idx, logits, step, what);
      where = path.string();
    }
    return NumericError(gruaunet::detail::concat("non-finite value at step ", step, ": ", what, "; batch dumped to ",
                                                 where));
  };
  try {
    parallel_for(B, worker_threads(), [&](std::size_t b) {
      graphs[b] = std::make_unique<Graph<float>>();
      const std::size_t i = idx[b];
      const bool flip = cfg.training.hflip && ((detail::mix_seed(step, i) & 1u) == static_cast<unsigned>(flip_parity));
      auto& g = *graphs[b];
      outs[b] = model_forward(g, params, g.constant(flip ? hflip(data.images[i]) : data.images[i]), cfg.model);
    });
  } catch (const NumericError& e) {
    throw fail(e.what(), std::vector<double>(B, std::nan("")));
  }

  const std::size_t E = outs[0].embedding.value().size();
  Tensor<float> logits(Shape{B}), emb(Shape{B, E});
  std::vector<int> labels(B);
  std::vector<double> raw_logits(B);
  for (std::size_t b = 0; b < B; ++b) {
    logits[b] = outs[b].logit.value()[0];
    raw_logits[b] = logits[b];
    for (std::size_t e = 0; e < E; ++e) emb[b * E + e] = outs[b].embedding.value()[e];
    labels[b] = data.entries[idx[b]].label_index();
  }

  BatchStats st;
  Graph<float> lg;
  Var<float> L = lg.leaf(logits), Em = lg.leaf(emb);
  Var<float> total;
  try {
    Var<float> prob = sigmoid(L);
    if (objective == Objective::FocalOnly) {
      total = loss::focal_loss(labels, prob, cfg.focal);
      st.focal = st.loss = total.value()[0];
    } else {
      const auto pairs = loss::make_pairs(labels, detail::mix_seed(cfg.training.seed, step), cfg.training.pairs);
      loss::LossParts parts;
      total = loss::combined_loss(labels, prob, Em, pairs, cfg.focal, cfg.contrastive, &parts);
      st = {parts.total, parts.focal, parts.contrastive, 0};
    }
    if (!std::isfinite(st.loss)) throw NumericError("loss is not finite");
  } catch (const NumericError& e) {
    throw fail(e.what(), raw_logits);
  }
  for (std::size_t b = 0; b < B; ++b) st.correct += (logits[b] >= 0) == (labels[b] == 1);

  lg.backward(total);
  const Tensor<float>& dL = lg.grad(L);
  const Tensor<float>* dE = lg.has_grad(Em) ? &lg.grad(Em) : nullptr;
  parallel_for(B, worker_threads(), [&](std::size_t b) {
    std::vector<std::pair<Var<float>, Tensor<float>>> seeds;
    seeds.emplace_back(outs[b].logit, Tensor<float>(Shape{1}, std::vector<float>{dL[b]}));
    if (dE) {
      Tensor<float> s(Shape{E});
      for (std::size_t e = 0; e < E; ++e) s[e] = (*dE)[b * E + e];
      seeds.emplace_back(outs[b].embedding, std::move(s));
    }
    graphs[b]->backward(seeds);
  });
  Gradients<float> grads(params);
  for (std::size_t b = 0; b < B; ++b) grads.accumulate(*graphs[b], params);
  std::vector<const Tensor<float>*> ptrs;
  for (std::size_t k = 0; k < grads.size(); ++k) ptrs.push_back(&grads[k]);
  adam.step(params, ptrs, lr);
  return st;
}

inline TrainResult train(const RunConfig& cfg, const Dataset& data, const TrainOptions& opt = {}) {
  cfg.validate();
  const auto labels = data.labels();
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
    throw ValidationError("train: the manifest needs both bonafide and attack samples");
  }
  for (const auto& img : data.images) {
    const std::size_t S = cfg.model.encoder.image_size;
    if (img.shape() != Shape{3, S, S}) throw ShapeError("train: dataset images do not match the configured size");
  }
  const std::size_t epochs = opt.epochs_override ? opt.epochs_override : cfg.training.epochs;
  const std::size_t steps_per_epoch = detail::epoch_batches(labels, cfg.training.batch, 0).size();
  const std::size_t total = epochs * steps_per_epoch;
  const std::size_t warmup =
      cfg.training.warmup < 0 ? loss::default_warmup(total) : static_cast<std::size_t>(cfg.training.warmup);

  TrainResult res;
  std::uint64_t step = 0;
  if (opt.resume) {
    if (!same_architecture(opt.resume->config, cfg)) {
      throw ConfigError("resume: checkpoint architecture differs from the run config");
    }
    res.params = opt.resume->params;
    step = opt.resume->step;
  } else {
    res.params = init_model<float>(cfg.model, cfg.training.seed);
  }
  if (step > total) throw ConfigError(gruaunet::detail::concat("resume: checkpoint step ", step,
                                                               " is beyond the configured run of ", total, " steps"));
  loss::Adam<float> adam(res.params, cfg.adam);

  std::ofstream csv;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    const auto path = *opt.out_dir / "train_log.csv";
    const bool append = opt.resume && std::filesystem::exists(path);
    csv.open(path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write " + path.string());
    if (!append) csv << log_csv_header();
  }

  for (std::size_t epoch = step / steps_per_epoch; epoch < epochs; ++epoch) {
    const auto batches = detail::epoch_batches(labels, cfg.training.batch, detail::mix_seed(cfg.training.seed, epoch));
    EpochLog log;
    log.epoch = epoch + 1;
    std::size_t seen = 0, correct = 0;
    for (std::size_t bi = step - epoch * steps_per_epoch; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      const double lr = loss::lr_schedule(step + 1, total + 1, cfg.adam.lr, warmup);
      const auto st = train_step(cfg, res.params, adam, data, idx, step, lr, opt.objective, epoch % 2, opt.out_dir);
      ++step;
      const double w = static_cast<double>(idx.size());
      log.loss += w * st.loss;
      log.focal += w * st.focal;
      log.contrastive += w * st.contrastive;
      log.lr = lr;
      seen += idx.size();
      correct += st.correct;
    }
    if (seen == 0) continue;
    log.loss /= static_cast<double>(seen);
    log.focal /= static_cast<double>(seen);
    log.contrastive /= static_cast<double>(seen);
    log.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    log.step = step;
    res.log.push_back(log);
    if (csv.is_open()) csv << log_csv_row(log) << std::flush;
    if (opt.progress) {
      *opt.progress << "epoch " << log.epoch << "/" << epochs << " loss " << std::setprecision(6) << log.loss
                    << " acc " << log.train_acc << " lr " << log.lr << "\n";
    }
  }
  res.step = step;

  const auto preds = predict_all(res.params, cfg.model, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += (preds[i].prob >= 0.5) == (labels[i] == 1);
  res.final_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  res.threshold = metrics::choose_threshold(scored_samples(data, preds), cfg.eval.policy);
  if (opt.out_dir) {
    save_checkpoint(*opt.out_dir / "model.gaun", res.params, cfg, res.step, res.threshold);
    metrics::write_text_file(*opt.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  }
  return res;
}

struct EvalResult {
  metrics::MetricsReport report;
  std::vector<metrics::DetPoint> curve;
  std::vector<Prediction> predictions;
};

/// Scores `data` with `params`. The threshold comes from `policy` applied to
/// these scores when given, else `stored_threshold`.
inline EvalResult evaluate(const ParamSet<float>& params, const ModelConfig& model, const Dataset& data,
                           double stored_threshold, const std::optional<metrics::ThresholdPolicy>& policy = {}) {
  EvalResult r;
  r.predictions = predict_all(params, model, data);
  const auto samples = scored_samples(data, r.predictions);
  const double t = policy ? metrics::choose_threshold(samples, *policy) : stored_threshold;
  r.report = metrics::make_report(samples, t);
  r.curve = metrics::det_curve(samples);
  return r;
}

struct CrossDatasetResult {
  EvalResult eval;
  TrainResult training;
  double threshold = 0;
  std::size_t fit_size = 0, calibration_size = 0;
};

/// Trains on `train_ds` minus a stratified calibration slice, picks the
/// threshold on that slice with the configured policy, and scores `test_ds`.
inline CrossDatasetResult cross_dataset_eval(const RunConfig& cfg, const Dataset& train_ds, const Dataset& test_ds,
                                             const TrainOptions& opt = {}) {
  std::set<std::string> train_ids, overlap;
  for (const auto& e : train_ds.entries) train_ids.insert(e.dataset_id);
  for (const auto& e : test_ds.entries) {
    if (train_ids.count(e.dataset_id)) overlap.insert(e.dataset_id);
  }
  if (!overlap.empty()) {
    std::string list;
    for (const auto& id : overlap) list += (list.empty() ? "" : ", ") + id;
    throw ValidationError("cross_dataset_eval: train and test share dataset id(s): " + list);
  }
  const auto labels = train_ds.labels();
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2) throw ValidationError("cross_dataset_eval: training set needs both classes");
  Rng rng(detail::mix_seed(cfg.training.seed, 0xCA11B));
  std::vector<std::size_t> fit, calib;
  for (auto& [c, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    const auto n = static_cast<std::size_t>(std::llround(cfg.eval.calibration_fraction * static_cast<double>(idx.size())));
    const std::size_t nc = std::clamp<std::size_t>(n, 1, idx.size() - 1);
    calib.insert(calib.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nc));
    fit.insert(fit.end(), idx.begin() + static_cast<std::ptrdiff_t>(nc), idx.end());
  }
  std::sort(fit.begin(), fit.end());
  std::sort(calib.begin(), calib.end());
  CrossDatasetResult r;
  r.fit_size = fit.size();
  r.calibration_size = calib.size();
  const Dataset fit_ds = train_ds.subset(fit), calib_ds = train_ds.subset(calib);
  r.training = train(cfg, fit_ds, opt);
  const auto calib_scores = scored_samples(calib_ds, predict_all(r.training.params, cfg.model, calib_ds));
  r.threshold = metrics::choose_threshold(calib_scores, cfg.eval.policy);
  r.eval = evaluate(r.training.params, cfg.model, test_ds, r.threshold);
  return r;
}

}  // namespace gruaunet::pipeline
