// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "gruaunet/metrics/metrics.hpp"
#include "gruaunet/metrics/report.hpp"

namespace gruaunet::metrics {
namespace {

ScoredSample attack(double s, std::string pai = "PH") { return {s, Label::Attack, std::move(pai), "D"}; }
ScoredSample bona(double s) { return {s, Label::Bonafide, "", "D"}; }

std::vector<ScoredSample> random_samples(std::size_t n, std::uint64_t seed) {
  static const char* tags[] = {"PH", "PL", "EF", "GL"};
  Rng rng(seed);
  std::vector<ScoredSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (rng.below(2)) {
      out.push_back(attack(rng.uniform(), tags[rng.below(4)]));
    } else {
      out.push_back(bona(rng.uniform()));
    }
  }
  return out;
}

TEST(Apcer, CountArithmetic) {
  std::vector<ScoredSample> s;
  for (int i = 0; i < 10; ++i) s.push_back(attack(i < 2 ? 0.1 : 0.9));
  EXPECT_DOUBLE_EQ(apcer(s, 0.5).overall, 20.0);
  EXPECT_DOUBLE_EQ(apcer(s, 0.05).overall, 0.0);
  EXPECT_THROW(apcer({bona(0.2)}, 0.5), ValidationError);
}

TEST(Apcer, PerPaiAndPooled) {
  std::vector<ScoredSample> s;
  for (int i = 0; i < 5; ++i) s.push_back(attack(0.9, "PH"));
  for (int i = 0; i < 5; ++i) s.push_back(attack(i == 0 ? 0.2 : 0.9, "PL"));
  s.push_back(bona(0.1));
  auto r = apcer(s, 0.5);
  EXPECT_DOUBLE_EQ(r.per_pai.at("PH"), 0.0);
  EXPECT_DOUBLE_EQ(r.per_pai.at("PL"), 20.0);
  EXPECT_DOUBLE_EQ(r.overall, 10.0);
  EXPECT_EQ(r.per_pai.size(), 2u);
}

TEST(Apcer, CountWeightedPerPaiEqualsPooled) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto s = random_samples(1000, seed);
    for (double t : {0.1, 0.37, 0.5, 0.92}) {
      auto r = apcer(s, t);
      double acc = 0;
      for (const auto& [tag, rate] : r.per_pai) acc += rate * static_cast<double>(r.attacks_per_pai.at(tag));
      EXPECT_NEAR(acc / static_cast<double>(r.attacks), r.overall, 1e-9);
    }
  }
}

TEST(Bpcer, CountArithmetic) {
  std::vector<ScoredSample> s(100, bona(0.1));
  EXPECT_DOUBLE_EQ(bpcer(s, 0.5), 0.0);
  std::vector<ScoredSample> k(1000, bona(0.1));
  k[17].score = 0.7;
  EXPECT_DOUBLE_EQ(bpcer(k, 0.5), 0.1);
  EXPECT_DOUBLE_EQ(bpcer(k, 0.7), 0.1);
  EXPECT_THROW(bpcer({attack(0.2)}, 0.5), ValidationError);
}

TEST(Bpcer, DualOfApcerUnderMirroring) {
  // swap labels and mirror scores; "score >= t" becomes "1-score <= 1-t"
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ScoredSample> s, mirrored;
    for (int i = 0; i < 200; ++i) {
      const double v = static_cast<double>(rng.below(100)) / 100.0;
      if (rng.below(2)) {
        s.push_back(bona(v));
        mirrored.push_back(attack(1.0 - v, "X"));
      } else {
        s.push_back(attack(v, "X"));
        mirrored.push_back(bona(1.0 - v));
      }
    }
    const double t = (0.5 + static_cast<double>(rng.below(99))) / 100.0;
    EXPECT_DOUBLE_EQ(apcer(mirrored, 1.0 - t).overall, bpcer(s, t));
  }
}

TEST(Acer, PublishedRounding) {
  EXPECT_DOUBLE_EQ(acer(1.2, 0.09), 0.645);
  EXPECT_DOUBLE_EQ(round_decimal(acer(1.2, 0.09), 2, Rounding::HalfUp), 0.65);
  EXPECT_DOUBLE_EQ(round_decimal(acer(0.21, 0.09), 2, Rounding::HalfUp), 0.15);
  EXPECT_DOUBLE_EQ(acer(0, 0), 0.0);
  EXPECT_NEAR(acer(0.0, 0.09), 0.045, 1e-15);
}

TEST(Rounding, HalfEvenAndHalfUp) {
  EXPECT_DOUBLE_EQ(round_decimal(0.645, 2), 0.64);
  EXPECT_DOUBLE_EQ(round_decimal(0.655, 2), 0.66);
  EXPECT_DOUBLE_EQ(round_decimal(0.6451, 2), 0.65);
  EXPECT_DOUBLE_EQ(round_decimal(0.045, 2, Rounding::HalfUp), 0.05);
  EXPECT_DOUBLE_EQ(round_decimal(0.045, 2), 0.04);
  EXPECT_DOUBLE_EQ(round_decimal(12.34565, 4), 12.3456);
  EXPECT_DOUBLE_EQ(round_decimal(12.34575, 4), 12.3458);
  EXPECT_DOUBLE_EQ(round_decimal(-1.25, 1), -1.2);
  EXPECT_DOUBLE_EQ(round_decimal(9.99995, 4), 10.0);
  EXPECT_EQ(format_rate(100.0 / 3.0), "33.3333");
  EXPECT_EQ(format_rate(0.0), "0.0000");
}

TEST(DetCurve, MonotoneOnRandomScores) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto s = random_samples(1000, 100 + seed);
    auto c = det_curve(s);
    ASSERT_GT(c.size(), 2u);
    for (std::size_t i = 1; i < c.size(); ++i) {
      EXPECT_GT(c[i].threshold, c[i - 1].threshold);
      EXPECT_GE(c[i].apcer, c[i - 1].apcer);
      EXPECT_LE(c[i].bpcer, c[i - 1].bpcer);
    }
    EXPECT_DOUBLE_EQ(c.front().apcer, 0.0);
    EXPECT_DOUBLE_EQ(c.front().bpcer, 100.0);
    EXPECT_DOUBLE_EQ(c.back().apcer, 100.0);
    EXPECT_DOUBLE_EQ(c.back().bpcer, 0.0);
    for (const auto& p : c) {
      EXPECT_DOUBLE_EQ(p.apcer, apcer(s, p.threshold).overall);
      EXPECT_DOUBLE_EQ(p.bpcer, bpcer(s, p.threshold));
    }
    auto thin = det_curve(s, 50);
    EXPECT_LE(thin.size(), 50u);
    EXPECT_EQ(thin.front().threshold, c.front().threshold);
    EXPECT_EQ(thin.back().threshold, c.back().threshold);
  }
}

TEST(DetCurve, SeparatedAndDegenerate) {
  std::vector<ScoredSample> sep{bona(0.1), bona(0.2), attack(0.8), attack(0.9)};
  bool origin = false;
  for (const auto& p : det_curve(sep)) origin |= (p.apcer == 0.0 && p.bpcer == 0.0);
  EXPECT_TRUE(origin);
  std::vector<ScoredSample> flat{bona(0.4), bona(0.4), attack(0.4)};
  std::set<std::pair<double, double>> pts;
  for (const auto& p : det_curve(flat)) pts.emplace(p.apcer, p.bpcer);
  EXPECT_LE(pts.size(), 2u);
  EXPECT_THROW(det_curve({bona(0.1)}), ValidationError);
}

TEST(EqualErrorRate, SymmetricScores) {
  std::vector<ScoredSample> s;
  for (int i = 0; i < 10; ++i) {
    s.push_back(bona(0.05 * i));
    s.push_back(attack(0.05 * i + 0.3));
  }
  auto e = equal_error_rate(s);
  EXPECT_NEAR(e.eer, 20.0, 1e-12);
  EXPECT_NEAR(equal_error_rate({bona(0.1), attack(0.9)}).eer, 0.0, 1e-12);
}

TEST(ThresholdPolicy, Parse) {
  auto p = ThresholdPolicy::parse("bpcer:0.1");
  EXPECT_EQ(p.kind, ThresholdPolicy::Kind::BpcerTarget);
  EXPECT_DOUBLE_EQ(p.value, 0.1);
  EXPECT_EQ(ThresholdPolicy::parse("fixed:0.5").kind, ThresholdPolicy::Kind::Fixed);
  EXPECT_EQ(ThresholdPolicy::parse("eer").kind, ThresholdPolicy::Kind::Eer);
  for (const char* bad : {"bpcer", "bpcer:x", "fixed:2", "roc:1", "bpcer:-1", "eer:3"}) {
    EXPECT_THROW(ThresholdPolicy::parse(bad), ConfigError) << bad;
  }
  EXPECT_EQ(ThresholdPolicy::parse(p.str()).value, 0.1);
}

TEST(ThresholdPolicy, BpcerTargetIsMetWithLowestApcer) {
  Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto s = random_samples(400, 200 + static_cast<std::uint64_t>(trial));
    for (double target : {0.0, 1.0, 5.0, 20.0}) {
      const double t = choose_threshold(s, ThresholdPolicy{ThresholdPolicy::Kind::BpcerTarget, target});
      EXPECT_LE(bpcer(s, t), target + 1e-12);
      // any lower threshold from the sweep breaks the target or is no better
      for (const auto& p : det_curve(s)) {
        if (p.threshold < t) {
          EXPECT_TRUE(p.bpcer > target + 1e-12 || p.apcer <= apcer(s, t).overall);
        }
      }
    }
  }
  std::vector<ScoredSample> sep{bona(0.1), bona(0.2), attack(0.8), attack(0.9)};
  const double t = choose_threshold(sep, ThresholdPolicy{});
  EXPECT_DOUBLE_EQ(t, 0.5);
  EXPECT_DOUBLE_EQ(choose_threshold(sep, ThresholdPolicy::parse("fixed:0.3")), 0.3);
}

TEST(Report, AcerIdentityAndJsonRoundtrip) {
  auto s = random_samples(500, 7);
  for (double t : {0.2, 0.5, 0.8}) {
    auto r = make_report(s, t);
    EXPECT_EQ(r.acer, (r.apcer_overall + r.bpcer) / 2);
    EXPECT_EQ(r.bonafide + r.attacks, s.size());
    std::set<std::string> tags;
    for (const auto& x : s) {
      if (x.label == Label::Attack) tags.insert(x.pai_type);
    }
    EXPECT_EQ(r.apcer_per_pai.size(), tags.size());
    auto back = report_from_json(nlohmann::json::parse(to_json(r).dump()));
    EXPECT_EQ(back.acer, r.acer);
    EXPECT_EQ(back.apcer_per_pai, r.apcer_per_pai);
    EXPECT_EQ(back.attacks_per_pai, r.attacks_per_pai);
    EXPECT_EQ(back.threshold, r.threshold);
  }
}

TEST(Report, TextIsAligned) {
  std::vector<ScoredSample> s{bona(0.1), bona(0.6), attack(0.8, "PH"), attack(0.3, "PLAYDOH")};
  const std::string txt = to_text(make_report(s, 0.5));
  EXPECT_NE(txt.find("APCER[PLAYDOH]"), std::string::npos);
  EXPECT_NE(txt.find("50.0000"), std::string::npos);
  std::istringstream is(txt);
  std::string line;
  std::vector<std::size_t> cols;
  while (std::getline(is, line)) {
    const auto pos = line.find("0000");
    if (pos != std::string::npos) cols.push_back(pos);
  }
  ASSERT_GE(cols.size(), 4u);
  for (std::size_t c : cols) EXPECT_EQ(c, cols[0]);
}

TEST(Report, RejectsInconsistentSamples) {
  EXPECT_THROW(make_report({bona(0.1), attack(0.9, "")}, 0.5), ValidationError);
  EXPECT_THROW(make_report({{0.1, Label::Bonafide, "PH", ""}, attack(0.9)}, 0.5), ValidationError);
  EXPECT_THROW(make_report({bona(1.5), attack(0.9)}, 0.5), ValidationError);
}

TEST(Report, DetCsv) {
  const std::string csv = det_csv({{0.5, 10, 20}});
  EXPECT_EQ(csv.substr(0, 22), "threshold,apcer,bpcer\n");
  EXPECT_NE(csv.find("0.5,10,20"), std::string::npos);
}

TEST(KFold, BalancedTen) {
  std::vector<int> y{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  auto f = kfold_split(y, 5, 1);
  ASSERT_EQ(f.folds.size(), 5u);
  for (const auto& fold : f.folds) {
    ASSERT_EQ(fold.size(), 2u);
    EXPECT_NE(y[fold[0]], y[fold[1]]);
  }
}

TEST(KFold, PartitionStratificationDeterminism) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int> y;
    const std::size_t n = 20 + rng.below(80);
    for (std::size_t i = 0; i < n; ++i) y.push_back(i < 5 ? 0 : (i < 10 ? 1 : static_cast<int>(rng.below(2))));
    const std::size_t k = 2 + rng.below(4);
    auto f = kfold_split(y, k, static_cast<std::uint64_t>(trial));
    auto g = kfold_split(y, k, static_cast<std::uint64_t>(trial));
    EXPECT_EQ(f.folds, g.folds);
    std::vector<int> seen(n, 0);
    std::size_t mn = n, mx = 0;
    std::size_t pos_total = 0;
    for (int v : y) pos_total += static_cast<std::size_t>(v);
    for (const auto& fold : f.folds) {
      mn = std::min(mn, fold.size());
      mx = std::max(mx, fold.size());
      std::size_t pos = 0;
      for (std::size_t i : fold) {
        ++seen[i];
        pos += static_cast<std::size_t>(y[i]);
      }
      EXPECT_LE(std::abs(static_cast<double>(pos) - static_cast<double>(pos_total) / static_cast<double>(k)), 1.0);
    }
    EXPECT_LE(mx - mn, 1u);
    for (int c : seen) EXPECT_EQ(c, 1);
    auto train = f.train_indices(0);
    EXPECT_EQ(train.size() + f.folds[0].size(), n);
  }
  EXPECT_THROW(kfold_split({0, 0, 1}, 2, 0), ValidationError);
  EXPECT_THROW(kfold_split({0, 1}, 1, 0), ValidationError);
}

}  // namespace
}  // namespace gruaunet::metrics
