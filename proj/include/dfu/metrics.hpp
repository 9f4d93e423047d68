#pragma once

// Evaluation primitives: confusion-matrix rates, Matthews correlation,
// ROC construction with tie grouping, trapezoidal AUC with the
// Hanley-McNeil standard error and a clamped 95% confidence interval,
// macro-averaged multiclass reports, and the CSV/JSON/SVG writers.

#include <dfu/image.hpp>  // IoError

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dfu {

struct ConfusionCounts {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::size_t total() const { return tp + tn + fp + fn; }
};

// Rates with zero denominators are reported as absent, never coerced to 0.
struct BinaryReport {
  std::optional<double> sensitivity, specificity, precision, accuracy, f_measure;
};

inline BinaryReport binary_report(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("metrics: all-zero confusion counts");
  BinaryReport r;
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  if (c.tp + c.fn > 0) r.sensitivity = tp / (tp + fn);
  if (c.fp + c.tn > 0) r.specificity = tn / (fp + tn);
  if (c.tp + c.fp > 0) r.precision = tp / (tp + fp);
  r.accuracy = (tp + tn) / (tp + tn + fp + fn);
  if (2 * c.tp + c.fp + c.fn > 0) r.f_measure = 2 * tp / (2 * tp + fp + fn);
  return r;
}

// Binary Matthews correlation; a zero denominator yields 0 by convention.
inline double mcc(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("mcc: all-zero confusion counts");
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  const double denom = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
  if (denom == 0.0) return 0.0;
  return (tp * tn - fp * fn) / denom;
}

// K x K count matrix; rows index the true class, columns the predicted one.
struct MulticlassCounts {
  std::size_t k = 0;
  std::vector<std::size_t> counts;  // k*k, row-major

  std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * k + pred]; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * k + pred]; }
  std::size_t total() const {
    std::size_t t = 0;
    for (std::size_t v : counts) t += v;
    return t;
  }
};

inline MulticlassCounts make_multiclass_counts(std::size_t k) {
  if (k < 2) throw std::invalid_argument("metrics: need at least two classes");
  return MulticlassCounts{k, std::vector<std::size_t>(k * k, 0)};
}

// Multiclass correlation form of MCC.
inline double mcc(const MulticlassCounts& m) {
  const double s = static_cast<double>(m.total());
  if (s == 0.0) throw std::invalid_argument("mcc: empty count matrix");
  double trace = 0.0;
  std::vector<double> truth(m.k, 0.0), pred(m.k, 0.0);
  for (std::size_t i = 0; i < m.k; ++i) {
    trace += static_cast<double>(m.at(i, i));
    for (std::size_t j = 0; j < m.k; ++j) {
      truth[i] += static_cast<double>(m.at(i, j));
      pred[j] += static_cast<double>(m.at(i, j));
    }
  }
  double tp_sum = 0.0, t2 = 0.0, p2 = 0.0;
  for (std::size_t i = 0; i < m.k; ++i) {
    tp_sum += truth[i] * pred[i];
    t2 += truth[i] * truth[i];
    p2 += pred[i] * pred[i];
  }
  const double denom = std::sqrt((s * s - p2) * (s * s - t2));
  if (denom == 0.0) return 0.0;
  return (trace * s - tp_sum) / denom;
}

struct MacroReport {
  std::optional<double> sensitivity, specificity, precision, f_measure;
  double accuracy = 0.0;
  double mcc = 0.0;
};

// One-vs-rest binary counts per class, metrics macro-averaged over the
// classes where they are defined; accuracy is trace/total.
inline MacroReport multiclass_report(const MulticlassCounts& m) {
  const std::size_t total = m.total();
  if (total == 0) throw std::invalid_argument("metrics: empty count matrix");
  MacroReport out;
  double trace = 0.0;
  std::vector<double> sens, spec, prec, f1;
  for (std::size_t cls = 0; cls < m.k; ++cls) {
    ConfusionCounts c;
    c.tp = m.at(cls, cls);
    trace += static_cast<double>(c.tp);
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < m.k; ++j) {
      row += m.at(cls, j);
      col += m.at(j, cls);
    }
    c.fn = row - c.tp;
    c.fp = col - c.tp;
    c.tn = total - c.tp - c.fn - c.fp;
    BinaryReport r = binary_report(c);
    if (r.sensitivity) sens.push_back(*r.sensitivity);
    if (r.specificity) spec.push_back(*r.specificity);
    if (r.precision) prec.push_back(*r.precision);
    if (r.f_measure) f1.push_back(*r.f_measure);
  }
  auto mean_of = [](const std::vector<double>& v) -> std::optional<double> {
    if (v.empty()) return std::nullopt;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  out.sensitivity = mean_of(sens);
  out.specificity = mean_of(spec);
  out.precision = mean_of(prec);
  out.f_measure = mean_of(f1);
  out.accuracy = trace / static_cast<double>(total);
  out.mcc = mcc(m);
  return out;
}

// ---------------------------------------------------------------------------
// ROC and AUC

struct ScoredSample {
  std::string id;
  int label = 0;  // 1 = positive class
  double score = 0.0;
};

struct RocPoint {
  double threshold = 0.0;  // classify positive when score >= threshold
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (inf,0,0) to (min score,1,1)
  std::size_t num_positive = 0;
  std::size_t num_negative = 0;
};

// Thresholds sweep the distinct scores in descending order; tied scores share
// one curve vertex.
inline RocCurve roc_curve(std::vector<ScoredSample> samples) {
  RocCurve curve;
  for (const ScoredSample& s : samples) {
    if (!std::isfinite(s.score)) throw std::invalid_argument("roc: non-finite score");
    if (s.label == 1)
      ++curve.num_positive;
    else
      ++curve.num_negative;
  }
  if (curve.num_positive == 0 || curve.num_negative == 0)
    throw std::invalid_argument("roc: both classes must be present");
  std::sort(samples.begin(), samples.end(),
            [](const ScoredSample& a, const ScoredSample& b) { return a.score > b.score; });
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  const double np = static_cast<double>(curve.num_positive);
  const double nn = static_cast<double>(curve.num_negative);
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < samples.size()) {
    const double s = samples[i].score;
    while (i < samples.size() && samples[i].score == s) {
      if (samples[i].label == 1)
        ++tp;
      else
        ++fp;
      ++i;
    }
    curve.points.push_back({s, static_cast<double>(fp) / nn, static_cast<double>(tp) / np});
  }
  return curve;
}

struct AucReport {
  double auc = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

// Trapezoidal area under the curve (the tie-corrected Mann-Whitney statistic)
// with the Hanley-McNeil standard error; the 95% interval is
// auc +- 1.96 se clamped to [0,1].
inline AucReport auc_report(const RocCurve& curve) {
  AucReport r;
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < curve.points.size(); ++i) {
    const RocPoint& a = curve.points[i];
    const RocPoint& b = curve.points[i + 1];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
  }
  r.auc = area;
  const double a = area;
  const double q1 = a / (2.0 - a);
  const double q2 = 2.0 * a * a / (1.0 + a);
  const double np = static_cast<double>(curve.num_positive);
  const double nn = static_cast<double>(curve.num_negative);
  r.se = std::sqrt((a * (1.0 - a) + (np - 1.0) * (q1 - a * a) + (nn - 1.0) * (q2 - a * a)) /
                   (np * nn));
  r.ci_low = std::clamp(a - 1.96 * r.se, 0.0, 1.0);
  r.ci_high = std::clamp(a + 1.96 * r.se, 0.0, 1.0);
  return r;
}

inline AucReport auc_report(const std::vector<ScoredSample>& samples) {
  return auc_report(roc_curve(samples));
}

// 95% interval reconstruction from a reported (auc, se) pair.
inline std::pair<double, double> ci95(double auc, double se) {
  return {std::clamp(auc - 1.96 * se, 0.0, 1.0), std::clamp(auc + 1.96 * se, 0.0, 1.0)};
}

// ---------------------------------------------------------------------------
// Writers

// Fixed-key metrics JSON; absent values serialize as null.
inline nlohmann::json metrics_to_json(const BinaryReport& r, double mcc_value,
                                      const std::optional<AucReport>& auc = std::nullopt) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json j = {{"sensitivity", opt(r.sensitivity)}, {"specificity", opt(r.specificity)},
                      {"precision", opt(r.precision)},     {"accuracy", opt(r.accuracy)},
                      {"f_measure", opt(r.f_measure)},     {"mcc", mcc_value},
                      {"auc", nullptr},                    {"auc_se", nullptr},
                      {"auc_ci_low", nullptr},             {"auc_ci_high", nullptr}};
  if (auc) {
    j["auc"] = auc->auc;
    j["auc_se"] = auc->se;
    j["auc_ci_low"] = auc->ci_low;
    j["auc_ci_high"] = auc->ci_high;
  }
  return j;
}

inline void write_roc_csv(const std::string& path, const RocCurve& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "threshold,fpr,tpr\n";
  out.precision(17);
  for (const RocPoint& p : curve.points) {
    if (std::isinf(p.threshold))
      out << "inf";
    else
      out << p.threshold;
    out << ',' << p.fpr << ',' << p.tpr << '\n';
  }
}

// Scores CSV: header "id,label,score", one row per scored sample.
inline void write_scores_csv(const std::string& path, const std::vector<ScoredSample>& samples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "id,label,score\n";
  out.precision(17);
  for (const ScoredSample& s : samples) out << s.id << ',' << s.label << ',' << s.score << '\n';
}

inline std::vector<ScoredSample> read_scores_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scores file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "id,label,score")
    throw IoError("scores file must start with the header id,label,score");
  std::vector<ScoredSample> samples;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 == std::string::npos ? 0 : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw IoError("scores row lacks three columns: " + line);
    ScoredSample s;
    s.id = line.substr(0, c1);
    try {
      s.label = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
      s.score = std::stod(line.substr(c2 + 1));
    } catch (...) {
      throw IoError("malformed scores row: " + line);
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

// Multi-model ROC plot: unit box with axis labels, one polyline per model.
inline void write_roc_svg(const std::string& path,
                          const std::vector<std::pair<std::string, RocCurve>>& curves) {
  static const std::vector<std::string> palette = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                                   "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  constexpr double kSize = 480.0, kMargin = 60.0;
  auto px = [&](double fpr) { return kMargin + fpr * kSize; };
  auto py = [&](double tpr) { return kMargin + (1.0 - tpr) * kSize; };

  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize + 2 * kMargin
      << "\" height=\"" << kSize + 2 * kMargin << "\">\n";
  out << "  <rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kSize
      << "\" height=\"" << kSize << "\" fill=\"white\" stroke=\"black\"/>\n";
  out << "  <line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\""
      << py(1) << "\" stroke=\"#bbbbbb\" stroke-dasharray=\"6,4\"/>\n";
  for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    out << "  <text x=\"" << px(t) << "\" y=\"" << kMargin + kSize + 24
        << "\" font-size=\"12\" text-anchor=\"middle\">" << t << "</text>\n";
    out << "  <text x=\"" << kMargin - 10 << "\" y=\"" << py(t) + 4
        << "\" font-size=\"12\" text-anchor=\"end\">" << t << "</text>\n";
  }
  out << "  <text x=\"" << kMargin + kSize / 2 << "\" y=\"" << kMargin + kSize + 46
      << "\" font-size=\"14\" text-anchor=\"middle\">False positive rate</text>\n";
  out << "  <text x=\"18\" y=\"" << kMargin + kSize / 2
      << "\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << kMargin + kSize / 2 << ")\">True positive rate</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const std::string& color = palette[i % palette.size()];
    out << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const RocPoint& p : curves[i].second.points)
      out << px(p.fpr) << ',' << py(p.tpr) << ' ';
    out << "\"/>\n";
    out << "  <text x=\"" << kMargin + kSize - 8 << "\" y=\""
        << kMargin + kSize - 12 - 18.0 * static_cast<double>(i)
        << "\" font-size=\"12\" text-anchor=\"end\" fill=\"" << color << "\">"
        << curves[i].first << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace dfu
