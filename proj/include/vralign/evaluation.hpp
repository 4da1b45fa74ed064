#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vralign/io.hpp"
#include "vralign/ndarray.hpp"
#include "vralign/tdist.hpp"

namespace vralign {

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

struct BinaryPredictions {
  std::vector<double> scores;  // probability of the positive class
  std::vector<int> labels;
  double threshold = 0.5;  // scores strictly above it predict positive

  void validate() const {
    if (scores.size() != labels.size())
      throw ShapeError("predictions: scores and labels differ in length");
    if (scores.empty()) throw ShapeError("predictions: empty input");
    for (int l : labels)
      if (l != 0 && l != 1) throw DomainError("predictions: labels must be 0/1");
  }
};

struct PrfResult {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool precision_undefined = false;  // no positive predictions
  bool recall_undefined = false;     // no positive labels
  bool f1_undefined = false;
};

/// Precision/recall/F1 of the positive class at the decision threshold.
/// Zero-denominator cases yield 0 with the matching flag set.
inline PrfResult precision_recall_f1(const BinaryPredictions& p) {
  p.validate();
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.scores.size(); ++i) {
    const bool pred = p.scores[i] > p.threshold;
    if (pred && p.labels[i] == 1) ++tp;
    if (pred && p.labels[i] == 0) ++fp;
    if (!pred && p.labels[i] == 1) ++fn;
  }
  PrfResult r;
  if (tp + fp == 0)
    r.precision_undefined = true;
  else
    r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn == 0)
    r.recall_undefined = true;
  else
    r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (r.precision + r.recall == 0.0)
    r.f1_undefined = true;
  else
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

/// Rank-based AUC: the fraction of (positive, negative) pairs ordered
/// correctly, ties credited one half. Computed through midranks.
inline double auc(const BinaryPredictions& p) {
  p.validate();
  const std::size_t n = p.scores.size();
  std::size_t n_pos = 0;
  for (int l : p.labels) n_pos += static_cast<std::size_t>(l);
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw DomainError("AUC undefined: need both classes present");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return p.scores[a] < p.scores[b]; });

  // Midranks over tie groups, then the Mann-Whitney identity.
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && p.scores[order[j + 1]] == p.scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (p.labels[order[k]] == 1) pos_rank_sum += midrank;
    i = j + 1;
  }
  const double u = pos_rank_sum -
                   static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// Overlap metrics
// ---------------------------------------------------------------------------

struct DiceResult {
  double value = 0.0;
  bool undefined = false;  // both masks empty
};

/// 2|A n B| / (|A| + |B|) over binary arrays; nonzero entries count as set.
inline DiceResult dice(const NdArray& a, const NdArray& b) {
  require_same_shape(a, b, "dice");
  double inter = 0.0, total = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool av = a.data[i] != 0.0, bv = b.data[i] != 0.0;
    inter += (av && bv) ? 1.0 : 0.0;
    total += (av ? 1.0 : 0.0) + (bv ? 1.0 : 0.0);
  }
  DiceResult r;
  if (total == 0.0) {
    r.undefined = true;
    return r;
  }
  r.value = 2.0 * inter / total;
  return r;
}

// ---------------------------------------------------------------------------
// Explainability
// ---------------------------------------------------------------------------

struct HeatmapEvalConfig {
  double binarize_threshold = 0.01;

  void validate() const {
    if (binarize_threshold <= 0.0 || binarize_threshold >= 1.0)
      throw ConfigError("binarize threshold must be inside (0, 1)");
  }
};

struct ExplainScores {
  double dice2d = 0.0;
  double dice3d = 0.0;
};

/// Binarizes the heatmap at the threshold (>= is positive), scores 3D Dice
/// over the volume and 2D Dice on the depth slice holding the largest
/// seg-mask cross-section (lowest index on ties).
inline ExplainScores explainability_scores(const NdArray& heatmap, const NdArray& seg,
                                           const HeatmapEvalConfig& cfg = {}) {
  cfg.validate();
  require_rank(heatmap, 3, "explainability_scores");
  require_same_shape(heatmap, seg, "explainability_scores");
  const std::size_t D = heatmap.shape[0], H = heatmap.shape[1], W = heatmap.shape[2];

  NdArray bin(heatmap.shape);
  for (std::size_t i = 0; i < heatmap.data.size(); ++i)
    bin.data[i] = heatmap.data[i] >= cfg.binarize_threshold ? 1.0 : 0.0;

  std::size_t best_slice = 0, best_area = 0, mask_total = 0;
  for (std::size_t d = 0; d < D; ++d) {
    std::size_t area = 0;
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w)
        if (seg.at(d, h, w) != 0.0) ++area;
    mask_total += area;
    if (area > best_area) {
      best_area = area;
      best_slice = d;
    }
  }
  if (mask_total == 0)
    throw DomainError("invalid ground truth: segmentation mask is empty");

  NdArray bin2d({H, W}), seg2d({H, W});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      bin2d.at(h, w) = bin.at(best_slice, h, w);
      seg2d.at(h, w) = seg.at(best_slice, h, w);
    }

  ExplainScores out;
  out.dice3d = dice(bin, seg).value;  // mask nonempty, so always defined
  out.dice2d = dice(bin2d, seg2d).value;
  return out;
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
};

/// Two-sided paired t-test on differences x - y, df = n - 1, sample std.
inline TTestResult paired_t_test(const std::vector<double>& x,
                                 const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("paired t-test: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) throw DomainError("paired t-test needs at least 2 pairs");

  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i] - y[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - y[i] - mean;
    ss += d * d;
  }
  const double var = ss / static_cast<double>(n - 1);

  TTestResult r;
  if (var == 0.0) {
    if (mean == 0.0) return r;  // identical samples: t=0, p=1
    throw DomainError("degenerate paired t-test: zero variance with nonzero mean");
  }
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  r.p = tdist::two_sided_t_pvalue(r.t, static_cast<double>(n - 1));
  return r;
}

// ---------------------------------------------------------------------------
// Experiment aggregation
// ---------------------------------------------------------------------------

struct FoldMetrics {
  double auc = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline FoldMetrics compute_fold_metrics(const BinaryPredictions& p) {
  FoldMetrics m;
  m.auc = auc(p);
  const PrfResult prf = precision_recall_f1(p);
  m.precision = prf.precision;
  m.recall = prf.recall;
  m.f1 = prf.f1;
  return m;
}

struct VariantResult {
  std::string name;
  std::vector<FoldMetrics> folds;
};

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;  // population convention across folds
};

inline MetricSummary summarize(const std::vector<double>& values) {
  if (values.empty()) throw ShapeError("summarize: empty input");
  MetricSummary s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(ss / static_cast<double>(values.size()));
  return s;
}

struct VariantSummary {
  std::string name;
  MetricSummary auc, precision, recall, f1;
};

struct PairedComparison {
  std::string a, b;
  std::string metric;
  double t = 0.0;
  double p = 1.0;
  bool degenerate = false;  // zero-variance differences with nonzero mean
};

struct MetricsReport {
  std::vector<VariantSummary> variants;
  std::vector<PairedComparison> comparisons;
};

namespace detail {

inline std::vector<double> metric_column(const VariantResult& v,
                                         const std::string& metric) {
  std::vector<double> col;
  col.reserve(v.folds.size());
  for (const auto& f : v.folds) {
    if (metric == "auc") col.push_back(f.auc);
    else if (metric == "precision") col.push_back(f.precision);
    else if (metric == "recall") col.push_back(f.recall);
    else col.push_back(f.f1);
  }
  return col;
}

}  // namespace detail

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"auc", "precision", "recall", "f1"};
  return names;
}

/// Aggregates per-fold metrics into mean +- population std per variant and
/// runs paired t-tests between every variant pair on each metric. Degenerate
/// comparisons (zero-variance, nonzero-mean differences) are flagged rather
/// than raised so one constant column cannot abort a whole report.
inline MetricsReport evaluate_experiment(const std::vector<VariantResult>& variants) {
  if (variants.empty()) throw ConfigError("no experiment variants to evaluate");
  MetricsReport report;
  for (const auto& v : variants) {
    if (v.folds.empty()) throw ConfigError("variant '" + v.name + "' has no folds");
    VariantSummary s;
    s.name = v.name;
    s.auc = summarize(detail::metric_column(v, "auc"));
    s.precision = summarize(detail::metric_column(v, "precision"));
    s.recall = summarize(detail::metric_column(v, "recall"));
    s.f1 = summarize(detail::metric_column(v, "f1"));
    report.variants.push_back(std::move(s));
  }

  for (std::size_t i = 0; i < variants.size(); ++i)
    for (std::size_t j = i + 1; j < variants.size(); ++j) {
      if (variants[i].folds.size() != variants[j].folds.size()) continue;
      if (variants[i].folds.size() < 2) continue;
      for (const auto& metric : metric_names()) {
        PairedComparison c;
        c.a = variants[i].name;
        c.b = variants[j].name;
        c.metric = metric;
        try {
          const TTestResult r = paired_t_test(detail::metric_column(variants[i], metric),
                                              detail::metric_column(variants[j], metric));
          c.t = r.t;
          c.p = r.p;
        } catch (const DomainError&) {
          c.degenerate = true;
          c.t = 0.0;
          c.p = 1.0;
        }
        report.comparisons.push_back(std::move(c));
      }
    }
  return report;
}

// ---------------------------------------------------------------------------
// Report serialization: flat key=value tree plus a CSV table.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw IoError("malformed number for " + what + ": '" + s + "'");
  return v;
}

}  // namespace detail

inline std::string serialize_metrics_report(const MetricsReport& report) {
  std::ostringstream os;
  os << "# vralign-report v1\n";
  for (std::size_t i = 0; i < report.variants.size(); ++i) {
    const auto& v = report.variants[i];
    const std::string p = "variant." + std::to_string(i) + ".";
    os << p << "name=" << v.name << "\n";
    const std::pair<std::string, const MetricSummary*> cols[4] = {
        {"auc", &v.auc}, {"precision", &v.precision}, {"recall", &v.recall},
        {"f1", &v.f1}};
    for (const auto& [metric, s] : cols) {
      os << p << metric << ".mean=" << detail::fmt_double(s->mean) << "\n";
      os << p << metric << ".std=" << detail::fmt_double(s->stddev) << "\n";
    }
  }
  for (std::size_t i = 0; i < report.comparisons.size(); ++i) {
    const auto& c = report.comparisons[i];
    const std::string p = "comparison." + std::to_string(i) + ".";
    os << p << "a=" << c.a << "\n";
    os << p << "b=" << c.b << "\n";
    os << p << "metric=" << c.metric << "\n";
    os << p << "t=" << detail::fmt_double(c.t) << "\n";
    os << p << "p=" << detail::fmt_double(c.p) << "\n";
    os << p << "degenerate=" << (c.degenerate ? 1 : 0) << "\n";
  }
  return os.str();
}

inline MetricsReport parse_metrics_report(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed report line: '" + line + "'");
    kv.emplace(line.substr(0, eq), line.substr(eq + 1));
  }

  MetricsReport report;
  for (std::size_t i = 0;; ++i) {
    const std::string p = "variant." + std::to_string(i) + ".";
    const auto it = kv.find(p + "name");
    if (it == kv.end()) break;
    VariantSummary v;
    v.name = it->second;
    const std::pair<std::string, MetricSummary*> cols[4] = {
        {"auc", &v.auc}, {"precision", &v.precision}, {"recall", &v.recall},
        {"f1", &v.f1}};
    for (const auto& [metric, s] : cols) {
      s->mean = detail::parse_double(kv.at(p + metric + ".mean"), p + metric);
      s->stddev = detail::parse_double(kv.at(p + metric + ".std"), p + metric);
    }
    report.variants.push_back(std::move(v));
  }
  for (std::size_t i = 0;; ++i) {
    const std::string p = "comparison." + std::to_string(i) + ".";
    const auto it = kv.find(p + "a");
    if (it == kv.end()) break;
    PairedComparison c;
    c.a = it->second;
    c.b = kv.at(p + "b");
    c.metric = kv.at(p + "metric");
    c.t = detail::parse_double(kv.at(p + "t"), p + "t");
    c.p = detail::parse_double(kv.at(p + "p"), p + "p");
    c.degenerate = kv.at(p + "degenerate") == "1";
    report.comparisons.push_back(std::move(c));
  }
  return report;
}

inline void save_metrics_report(const std::string& path, const MetricsReport& report) {
  io::write_text_file(path, serialize_metrics_report(report));
}

inline MetricsReport load_metrics_report(const std::string& path) {
  return parse_metrics_report(io::read_text_file(path));
}

/// One CSV row per variant, mean and std per metric.
inline void write_metrics_csv(const std::string& path, const MetricsReport& report) {
  std::ostringstream os;
  os << "# vralign-metrics v1\n";
  os << "variant,auc_mean,auc_std,precision_mean,precision_std,recall_mean,"
        "recall_std,f1_mean,f1_std\n";
  for (const auto& v : report.variants) {
    os << v.name;
    for (const auto* s : {&v.auc, &v.precision, &v.recall, &v.f1})
      os << ',' << detail::fmt_double(s->mean) << ',' << detail::fmt_double(s->stddev);
    os << '\n';
  }
  io::write_text_file(path, os.str());
}

}  // namespace vralign
