// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <gtest/gtest.h>

#include "gruaunet/tensor/gradcheck.hpp"
#include "gruaunet/tensor/ops.hpp"

namespace gruaunet::testing {

/// sum(out * r) with a fixed pseudo-random r, so every output coordinate
/// carries a distinct upstream gradient.
inline Var<double> random_readout(Graph<double>& g, const Var<double>& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  Var<double> r = g.constant(rng.normal_tensor<double>(out.shape(), 1.0));
  return sum(mul(out, r));
}

inline void expect_gradcheck_pass(const GradCheckReport& rep) {
  EXPECT_TRUE(rep.pass) << rep.op << " max rel err " << rep.max_rel_error;
  for (const auto& e : rep.per_input) {
    EXPECT_LT(e.max_rel_error, rep.tolerance)
        << rep.op << " input " << e.input << " idx " << e.worst_index << " analytic " << e.worst_analytic
        << " numeric " << e.worst_numeric;
  }
}

template <std::floating_point T>
void expect_near_tensor(const Tensor<T>& a, const Tensor<T>& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace gruaunet::testing
