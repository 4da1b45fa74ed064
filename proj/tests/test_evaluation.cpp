#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "vralign/evaluation.hpp"
#include "vralign/rng.hpp"

using namespace vralign;

TEST_CASE("precision recall f1 hand cases") {
  // TP=2, FP=1, FN=1: positives scored high twice, one negative leaks in,
  // one positive missed.
  BinaryPredictions p;
  p.scores = {0.9, 0.8, 0.7, 0.2, 0.1};
  p.labels = {1, 1, 0, 1, 0};
  const auto r = precision_recall_f1(p);
  CHECK(r.precision == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(r.recall == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(r.f1 == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_FALSE(r.precision_undefined);
  CHECK_FALSE(r.recall_undefined);

  BinaryPredictions perfect;
  perfect.scores = {0.9, 0.8, 0.1, 0.2};
  perfect.labels = {1, 1, 0, 0};
  const auto pr = precision_recall_f1(perfect);
  CHECK(pr.precision == 1.0);
  CHECK(pr.recall == 1.0);
  CHECK(pr.f1 == 1.0);

  BinaryPredictions silent;
  silent.scores = {0.1, 0.2, 0.3};
  silent.labels = {1, 1, 0};
  const auto sr = precision_recall_f1(silent);
  CHECK(sr.precision == 0.0);
  CHECK(sr.precision_undefined);
  CHECK(sr.recall == 0.0);
  CHECK_FALSE(sr.recall_undefined);
  CHECK(sr.f1 == 0.0);
  CHECK(sr.f1_undefined);
}

TEST_CASE("precision recall f1 matches a confusion-matrix oracle") {
  Rng rng(404);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    BinaryPredictions p;
    for (std::size_t i = 0; i < n; ++i) {
      p.scores.push_back(rng.below(10) / 10.0);  // coarse grid to force ties
      p.labels.push_back(static_cast<int>(rng.below(2)));
    }
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool pred = p.scores[i] > 0.5;
      tp += pred && p.labels[i] == 1;
      fp += pred && p.labels[i] == 0;
      fn += !pred && p.labels[i] == 1;
    }
    const auto r = precision_recall_f1(p);
    const double prec = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    const double rec = tp + fn ? double(tp) / double(tp + fn) : 0.0;
    CHECK(r.precision == prec);
    CHECK(r.recall == rec);
    if (prec + rec > 0)
      CHECK(r.f1 == Catch::Approx(2 * prec * rec / (prec + rec)).margin(1e-15));
    else
      CHECK(r.f1 == 0.0);
  }
}

namespace {

double brute_force_auc(const BinaryPredictions& p) {
  double num = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < p.scores.size(); ++i)
    for (std::size_t j = 0; j < p.scores.size(); ++j) {
      if (p.labels[i] != 1 || p.labels[j] != 0) continue;
      ++pairs;
      if (p.scores[i] > p.scores[j]) num += 1.0;
      else if (p.scores[i] == p.scores[j]) num += 0.5;
    }
  return num / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("auc hand cases") {
  BinaryPredictions perfect{{0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}};
  CHECK(auc(perfect) == 1.0);

  BinaryPredictions tied{{0.5, 0.5}, {1, 0}};
  CHECK(auc(tied) == 0.5);

  BinaryPredictions mixed{{0.8, 0.2, 0.4, 0.6}, {1, 1, 0, 0}};
  CHECK(auc(mixed) == 0.5);

  BinaryPredictions single{{0.5, 0.7}, {1, 1}};
  CHECK_THROWS_AS(auc(single), DomainError);
}

TEST_CASE("auc equals the pairwise brute force") {
  Rng rng(77);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    BinaryPredictions p;
    bool has0 = false, has1 = false;
    for (std::size_t i = 0; i < n; ++i) {
      p.scores.push_back(rng.below(25) / 24.0);
      const int l = static_cast<int>(rng.below(2));
      p.labels.push_back(l);
      (l ? has1 : has0) = true;
    }
    if (!has0 || !has1) {
      p.labels[0] = has1 ? 0 : 1;
    }
    CHECK(std::abs(auc(p) - brute_force_auc(p)) <= 1e-12);
  }
}

TEST_CASE("dice hand cases and symmetry") {
  NdArray a({2, 2}, {1, 1, 0, 0});
  CHECK(dice(a, a).value == 1.0);
  CHECK_FALSE(dice(a, a).undefined);

  NdArray b({2, 2}, {0, 0, 1, 1});
  CHECK(dice(a, b).value == 0.0);

  NdArray c({8}, {1, 1, 1, 1, 0, 0, 0, 0});
  NdArray d({8}, {0, 0, 1, 1, 1, 1, 0, 0});
  CHECK(dice(c, d).value == 0.5);
  CHECK(dice(d, c).value == dice(c, d).value);

  NdArray empty({4});
  const auto r = dice(empty, empty);
  CHECK(r.value == 0.0);
  CHECK(r.undefined);

  NdArray wrong({3});
  CHECK_THROWS_AS(dice(empty, wrong), ShapeError);

  Rng rng(12);
  for (int t = 0; t < 200; ++t) {
    NdArray x({5, 3}), y({5, 3});
    for (auto& v : x.data) v = rng.below(2);
    for (auto& v : y.data) v = rng.below(2);
    const auto xy = dice(x, y), yx = dice(y, x);
    CHECK(xy.value == yx.value);
    CHECK(xy.value >= 0.0);
    CHECK(xy.value <= 1.0);
  }
}

TEST_CASE("explainability scores on the constructed 4x4x4 case") {
  NdArray mask({4, 4, 4}), heat({4, 4, 4});
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 0; w < 4; ++w) {
      mask.at(2, h, w) = 1.0;     // slice 2 fully occupied (16 voxels)
      heat.at(2, h, w) = 0.8;     // heatmap fires on slice 2 only
      if (h < 2) mask.at(1, h, w) = 1.0;  // slice 1 half occupied (8)
    }
  const auto s = explainability_scores(heat, mask);
  CHECK(s.dice2d == 1.0);
  CHECK(s.dice3d == Catch::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("explainability identity and empty-prediction conventions") {
  NdArray mask({2, 2, 2});
  mask.at(0, 0, 0) = 1.0;
  mask.at(1, 1, 1) = 1.0;
  const auto ident = explainability_scores(mask, mask);
  CHECK(ident.dice2d == 1.0);
  CHECK(ident.dice3d == 1.0);

  NdArray zero({2, 2, 2});
  const auto none = explainability_scores(zero, mask);
  CHECK(none.dice2d == 0.0);
  CHECK(none.dice3d == 0.0);

  CHECK_THROWS_WITH(explainability_scores(mask, zero),
                    Catch::Matchers::ContainsSubstring("invalid ground truth"));
}

TEST_CASE("explainability slice tie-break picks the lowest index") {
  NdArray mask({3, 2, 2}), heat({3, 2, 2});
  // Slices 0 and 2 both hold 2 mask voxels; slice 0 must win the tie.
  mask.at(0, 0, 0) = mask.at(0, 0, 1) = 1.0;
  mask.at(2, 1, 0) = mask.at(2, 1, 1) = 1.0;
  heat.at(0, 0, 0) = heat.at(0, 0, 1) = 1.0;  // perfect on slice 0 only
  const auto s = explainability_scores(heat, mask);
  CHECK(s.dice2d == 1.0);

  // Exactly at the threshold counts as fired.
  NdArray edge({3, 2, 2});
  edge.at(0, 0, 0) = 0.01;
  edge.at(0, 0, 1) = 0.009999;
  const auto es = explainability_scores(edge, mask);
  CHECK(es.dice2d == Catch::Approx(2.0 * 1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("explainability is invariant to threshold-preserving rescales") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    NdArray heat({4, 4, 4}), mask({4, 4, 4});
    for (auto& v : heat.data) v = rng.below(2) ? rng.uniform(0.3, 1.0) : 0.0;
    for (auto& v : mask.data) v = rng.below(3) == 0 ? 1.0 : 0.0;
    if (dice(mask, mask).undefined) mask.data[0] = 1.0;

    const auto base = explainability_scores(heat, mask);
    // Affine maps keeping {<tau, >=tau} membership intact: zeros stay below
    // 0.01, everything else stays at or above it.
    const double a = rng.uniform(0.5, 3.0);
    const double b = rng.uniform(0.0, 0.009);
    NdArray scaled = heat;
    for (auto& v : scaled.data) v = a * v + b;
    const auto moved = explainability_scores(scaled, mask);
    CHECK(moved.dice2d == base.dice2d);
    CHECK(moved.dice3d == base.dice3d);
  }
}

TEST_CASE("paired t test hand cases") {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  const std::vector<double> zero(5, 0.0);
  const auto r = paired_t_test(x, zero);
  CHECK(r.t == Catch::Approx(4.242640687119285).margin(1e-12));
  CHECK(r.p == Catch::Approx(0.013235599563682686).margin(1e-9));

  const auto same = paired_t_test(x, x);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);

  const auto flipped = paired_t_test(zero, x);
  CHECK(flipped.t == -r.t);
  CHECK(flipped.p == Catch::Approx(r.p).margin(1e-15));

  CHECK_THROWS_WITH(paired_t_test({1, 2, 3}, {0, 1, 2}),
                    Catch::Matchers::ContainsSubstring("degenerate"));
  CHECK_THROWS_AS(paired_t_test({1.0}, {2.0}), DomainError);
  CHECK_THROWS_AS(paired_t_test({1, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("two-sided p values match the reference table") {
  struct Point {
    double t, df, p;
  };
  // Reference values from an independent high-precision implementation.
  const Point table[12] = {
      {0.0, 1, 1.0},
      {1.0, 1, 0.49999999999999956},
      {2.0, 2, 0.1835034190722739},
      {1.5, 3, 0.23058386524482283},
      {4.242640687119286, 4, 0.013235599563682686},
      {2.5, 5, 0.054490099342376204},
      {3.0, 7, 0.019942126131992522},
      {1.96, 10, 0.07843624024769974},
      {2.086, 20, 0.04999635445744025},
      {2.6, 24, 0.01570442218863841},
      {1.0, 30, 0.32530861542602985},
      {3.5, 99, 0.0006990646483687953},
  };
  for (const auto& pt : table) {
    const double p = tdist::two_sided_t_pvalue(pt.t, pt.df);
    INFO("t=" << pt.t << " df=" << pt.df);
    CHECK(p == Catch::Approx(pt.p).margin(1e-3));
    CHECK(p == Catch::Approx(pt.p).margin(1e-12));  // actual precision
  }

  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const double p = tdist::two_sided_t_pvalue(rng.uniform(-8.0, 8.0),
                                               1.0 + rng.below(100));
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
}

TEST_CASE("experiment aggregation means and stds") {
  VariantResult v;
  v.name = "full";
  for (double a : {0.7, 0.8, 0.9}) v.folds.push_back({a, a, a, a});
  const auto report = evaluate_experiment({v});
  REQUIRE(report.variants.size() == 1);
  CHECK(report.variants[0].auc.mean == Catch::Approx(0.8).epsilon(1e-15));
  CHECK(report.variants[0].auc.stddev ==
        Catch::Approx(std::sqrt(0.02 / 3.0)).epsilon(1e-12));
  CHECK(report.comparisons.empty());

  VariantResult single;
  single.name = "one";
  single.folds.push_back({0.6, 0.5, 0.4, 0.3});
  const auto rs = evaluate_experiment({single});
  CHECK(rs.variants[0].auc.stddev == 0.0);
}

TEST_CASE("experiment comparisons run per metric and flag degenerates") {
  VariantResult a, b;
  a.name = "full";
  b.name = "ablate";
  for (int i = 0; i < 4; ++i) {
    const double base = 0.6 + 0.05 * i;
    a.folds.push_back({base + 0.1, base, base - 0.02 * i, base});
    // AUC column differs by a constant: degenerate paired test.
    b.folds.push_back({base, base - 0.01 * i, base, base + 0.03 * i});
  }
  const auto report = evaluate_experiment({a, b});
  REQUIRE(report.comparisons.size() == 4);
  CHECK(report.comparisons[0].metric == "auc");
  CHECK(report.comparisons[0].degenerate);
  CHECK(report.comparisons[0].p == 1.0);
  for (std::size_t i = 1; i < 4; ++i) {
    CHECK_FALSE(report.comparisons[i].degenerate);
    CHECK(report.comparisons[i].p > 0.0);
    CHECK(report.comparisons[i].p <= 1.0);
  }
  CHECK(report.comparisons[1].a == "full");
  CHECK(report.comparisons[1].b == "ablate");
}

TEST_CASE("metrics report round-trips losslessly") {
  VariantResult a, b;
  a.name = "full";
  b.name = "global-only";
  Rng rng(9);
  for (int i = 0; i < 5; ++i) {
    a.folds.push_back({rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()});
    b.folds.push_back({rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()});
  }
  const auto report = evaluate_experiment({a, b});
  const std::string text = serialize_metrics_report(report);
  const auto parsed = parse_metrics_report(text);
  CHECK(serialize_metrics_report(parsed) == text);
  REQUIRE(parsed.variants.size() == report.variants.size());
  for (std::size_t i = 0; i < parsed.variants.size(); ++i) {
    CHECK(parsed.variants[i].name == report.variants[i].name);
    CHECK(parsed.variants[i].auc.mean == report.variants[i].auc.mean);
    CHECK(parsed.variants[i].auc.stddev == report.variants[i].auc.stddev);
    CHECK(parsed.variants[i].f1.mean == report.variants[i].f1.mean);
  }
  REQUIRE(parsed.comparisons.size() == report.comparisons.size());
  for (std::size_t i = 0; i < parsed.comparisons.size(); ++i) {
    CHECK(parsed.comparisons[i].t == report.comparisons[i].t);
    CHECK(parsed.comparisons[i].p == report.comparisons[i].p);
  }

  const std::string path = "report_rt.txt";
  save_metrics_report(path, report);
  const auto loaded = load_metrics_report(path);
  CHECK(serialize_metrics_report(loaded) == text);
  std::remove(path.c_str());
}

TEST_CASE("metrics csv lists one row per variant") {
  MetricsReport report;
  VariantSummary v;
  v.name = "full";
  v.auc = {0.875, 0.0125};
  v.precision = {0.8, 0.1};
  v.recall = {0.75, 0.05};
  v.f1 = {0.7734, 0.02};
  report.variants.push_back(v);
  const std::string path = "metrics_test.csv";
  write_metrics_csv(path, report);
  const std::string text = io::read_text_file(path);
  CHECK(text ==
        "# vralign-metrics v1\n"
        "variant,auc_mean,auc_std,precision_mean,precision_std,recall_mean,"
        "recall_std,f1_mean,f1_std\n"
        "full,0.875,0.0125,0.8,0.1,0.75,0.05,0.7734,0.02\n");
  std::remove(path.c_str());
}
