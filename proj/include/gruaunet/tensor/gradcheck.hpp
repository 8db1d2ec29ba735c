// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "gruaunet/tensor/params.hpp"

namespace gruaunet {

struct GradCheckOptions {
  double eps = 1e-3;
  double tol = 1e-4;
  /// Coordinates probed per input; 0 probes all of them. A seeded random
  /// subset is drawn when an input is larger.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string input;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::string op;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> per_input;
  bool pass = false;
};

/// Builds the scalar under test. Bind every input through `vars.bind(g, name)`.
using GradCheckFn = std::function<Var<double>(Graph<double>&, const ParamSet<double>&)>;

/// Compares recorded backward gradients with central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every entry of `vars`. Relative error
/// uses the denominator max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport gradcheck(std::string op, ParamSet<double>& vars, const GradCheckFn& fn,
                                 const GradCheckOptions& opts = {}) {
  auto evaluate = [&](bool with_backward, std::vector<Tensor<double>>* grads) {
    Graph<double> g;
    Var<double> out = fn(g, vars);
    if (out.value().size() != 1) {
      throw ShapeError(detail::concat("gradcheck '", op, "': closure returned non-scalar shape ",
                                      shape_str(out.shape())));
    }
    const double v = out.value()[0];
    if (!std::isfinite(v)) throw NumericError(detail::concat("gradcheck '", op, "': non-finite output"));
    if (with_backward) {
      g.backward(out);
      for (const auto& e : vars.entries()) {
        const Tensor<double>* gr = g.param_grad(e.name);
        grads->push_back(gr ? *gr : Tensor<double>(e.value.shape()));
        if (!grads->back().all_finite()) {
          throw NumericError(detail::concat("gradcheck '", op, "': non-finite gradient for ", e.name));
        }
      }
    }
    return v;
  };

  std::vector<Tensor<double>> analytic;
  evaluate(true, &analytic);

  GradCheckReport report;
  report.op = std::move(op);
  report.tolerance = opts.tol;
  Rng rng(opts.seed);
  for (std::size_t k = 0; k < vars.size(); ++k) {
    auto& entry = vars.entries()[k];
    std::vector<std::size_t> coords(entry.value.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords && coords.size() > opts.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(opts.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    GradCheckEntry row;
    row.input = entry.name;
    for (std::size_t c : coords) {
      const double saved = entry.value[c];
      entry.value[c] = saved + opts.eps;
      const double fp = evaluate(false, nullptr);
      entry.value[c] = saved - opts.eps;
      const double fm = evaluate(false, nullptr);
      entry.value[c] = saved;
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double a = analytic[k][c];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++row.checked;
      if (rel > row.max_rel_error || row.checked == 1) {
        row.max_rel_error = std::max(row.max_rel_error, rel);
        if (rel >= row.max_rel_error) {
          row.worst_index = c;
          row.worst_analytic = a;
          row.worst_numeric = numeric;
        }
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, row.max_rel_error);
    report.per_input.push_back(std::move(row));
  }
  report.pass = report.max_rel_error < opts.tol;
  return report;
}

}  // namespace gruaunet
