#pragma once

// Binary soft-margin SVM trained with sequential minimal optimization:
// analytic two-alpha updates, second choice by max |E1-E2| over non-bound
// multipliers with deterministic fallback sweeps, and an error cache over a
// precomputed Gram matrix. Features are z-scored before training; the scaler
// rides along in the model.

#include <dfu/image.hpp>  // IoError
#include <dfu/tensor.hpp>

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfu {

enum class KernelKind { kLinear, kRbf };

struct KernelSpec {
  KernelKind kind = KernelKind::kLinear;
  double gamma = 1.0;  // rbf only

  void validate() const {
    if (kind == KernelKind::kRbf && gamma <= 0.0)
      throw std::invalid_argument("kernel: rbf gamma must be positive");
  }
};

struct FeatureScaler {
  std::vector<double> means, stds;
  double epsilon = 1e-12;

  std::vector<double> transform(const std::vector<double>& row) const {
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i)
      out[i] = (row[i] - means[i]) / (stds[i] + epsilon);
    return out;
  }
};

struct SvmModel {
  KernelSpec kernel;
  double c = 1.0;
  double bias = 0.0;
  std::vector<std::vector<double>> support_vectors;  // standardized rows
  std::vector<double> coefficients;                  // alpha_i * y_i per stored row
  FeatureScaler scaler;
  std::size_t iterations = 0;     // successful two-alpha updates
  double kkt_violation = 0.0;     // residual violation at exit
};

namespace detail {

inline double kernel_eval(const KernelSpec& k, const std::vector<double>& a,
                          const std::vector<double>& b) {
  double dot = 0.0, dist2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    const double d = a[i] - b[i];
    dist2 += d * d;
  }
  return k.kind == KernelKind::kLinear ? dot : std::exp(-k.gamma * dist2);
}

}  // namespace detail

struct SmoOptions {
  double tol = 1e-3;
  std::size_t max_passes = 100;  // full sweeps over all multipliers
  bool standardize = true;
};

inline SvmModel smo_train(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                          double c, const KernelSpec& kernel, const SmoOptions& options = {}) {
  kernel.validate();
  if (c <= 0.0) throw std::invalid_argument("smo: C must be positive");
  const std::size_t n = x.size();
  if (n == 0 || y.size() != n) throw std::invalid_argument("smo: one label per row required");
  const std::size_t dim = x[0].size();
  bool has_pos = false, has_neg = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i].size() != dim) throw std::invalid_argument("smo: ragged feature rows");
    for (double v : x[i])
      if (!std::isfinite(v)) throw std::invalid_argument("smo: non-finite feature value");
    if (y[i] == 1)
      has_pos = true;
    else if (y[i] == -1)
      has_neg = true;
    else
      throw std::invalid_argument("smo: labels must be +1 or -1");
  }
  if (!has_pos || !has_neg)
    throw std::invalid_argument("smo: need at least one example of each class");

  SvmModel model;
  model.kernel = kernel;
  model.c = c;
  model.scaler.means.assign(dim, 0.0);
  model.scaler.stds.assign(dim, 0.0);
  std::vector<std::vector<double>> z = x;
  if (options.standardize) {
    for (std::size_t j = 0; j < dim; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += x[i][j];
      m /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) var += (x[i][j] - m) * (x[i][j] - m);
      model.scaler.means[j] = m;
      model.scaler.stds[j] = std::sqrt(var / static_cast<double>(n));
    }
    for (std::size_t i = 0; i < n; ++i) z[i] = model.scaler.transform(x[i]);
  } else {
    model.scaler.stds.assign(dim, 1.0);
    model.scaler.epsilon = 0.0;
  }

  // Gram matrix
  std::vector<double> gram(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j)
      gram[i * n + j] = gram[j * n + i] = detail::kernel_eval(kernel, z[i], z[j]);
  auto k_at = [&](std::size_t i, std::size_t j) { return gram[i * n + j]; };

  std::vector<double> alpha(n, 0.0), errors(n);
  double b = 0.0;
  for (std::size_t i = 0; i < n; ++i) errors[i] = -static_cast<double>(y[i]);  // f = 0 initially

  const double tol = options.tol;
  constexpr double kEps = 1e-12;
  std::size_t updates = 0;

  auto take_step = [&](std::size_t i1, std::size_t i2) -> bool {
    if (i1 == i2) return false;
    const double a1_old = alpha[i1], a2_old = alpha[i2];
    const double y1 = y[i1], y2 = y[i2];
    const double e1 = errors[i1], e2 = errors[i2];
    const double s = y1 * y2;
    double lo, hi;
    if (y1 != y2) {
      lo = std::max(0.0, a2_old - a1_old);
      hi = std::min(c, c + a2_old - a1_old);
    } else {
      lo = std::max(0.0, a1_old + a2_old - c);
      hi = std::min(c, a1_old + a2_old);
    }
    if (lo >= hi) return false;
    const double k11 = k_at(i1, i1), k22 = k_at(i2, i2), k12 = k_at(i1, i2);
    const double eta = k11 + k22 - 2.0 * k12;
    double a2;
    if (eta > 0.0) {
      a2 = a2_old + y2 * (e1 - e2) / eta;
      a2 = std::clamp(a2, lo, hi);
    } else {
      // evaluate the restricted dual at both clip bounds
      const double f1 = y1 * (e1 + b) - a1_old * k11 - s * a2_old * k12;
      const double f2 = y2 * (e2 + b) - s * a1_old * k12 - a2_old * k22;
      const double l1 = a1_old + s * (a2_old - lo);
      const double h1 = a1_old + s * (a2_old - hi);
      const double obj_lo = l1 * f1 + lo * f2 + 0.5 * l1 * l1 * k11 + 0.5 * lo * lo * k22 +
                            s * lo * l1 * k12;
      const double obj_hi = h1 * f1 + hi * f2 + 0.5 * h1 * h1 * k11 + 0.5 * hi * hi * k22 +
                            s * hi * h1 * k12;
      if (obj_lo < obj_hi - kEps)
        a2 = lo;
      else if (obj_hi < obj_lo - kEps)
        a2 = hi;
      else
        return false;
    }
    if (std::abs(a2 - a2_old) < kEps * (a2 + a2_old + kEps)) return false;
    const double a1 = a1_old + s * (a2_old - a2);

    const double b1 = b - e1 - y1 * (a1 - a1_old) * k11 - y2 * (a2 - a2_old) * k12;
    const double b2 = b - e2 - y1 * (a1 - a1_old) * k12 - y2 * (a2 - a2_old) * k22;
    double b_new;
    if (a1 > 0.0 && a1 < c)
      b_new = b1;
    else if (a2 > 0.0 && a2 < c)
      b_new = b2;
    else
      b_new = (b1 + b2) / 2.0;

    for (std::size_t j = 0; j < n; ++j)
      errors[j] += y1 * (a1 - a1_old) * k_at(i1, j) + y2 * (a2 - a2_old) * k_at(i2, j) +
                   (b_new - b);
    alpha[i1] = a1;
    alpha[i2] = a2;
    b = b_new;
    ++updates;
    return true;
  };

  auto violates_kkt = [&](std::size_t i) {
    const double r = errors[i] * static_cast<double>(y[i]);
    return (r < -tol && alpha[i] < c) || (r > tol && alpha[i] > 0.0);
  };

  auto examine = [&](std::size_t i1) -> bool {
    if (!violates_kkt(i1)) return false;
    // second choice: largest |E1 - E2| among non-bound multipliers
    std::size_t best = n;
    double best_gap = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i1 || alpha[j] <= 0.0 || alpha[j] >= c) continue;
      const double gap = std::abs(errors[i1] - errors[j]);
      if (gap > best_gap) {
        best_gap = gap;
        best = j;
      }
    }
    if (best < n && take_step(i1, best)) return true;
    for (std::size_t j = 0; j < n; ++j)  // fallback: non-bound sweep
      if (j != i1 && alpha[j] > 0.0 && alpha[j] < c && take_step(i1, j)) return true;
    for (std::size_t j = 0; j < n; ++j)  // fallback: full sweep
      if (j != i1 && take_step(i1, j)) return true;
    return false;
  };

  bool examine_all = true;
  std::size_t full_sweeps = 0;
  std::size_t changed = 0;
  while (full_sweeps < options.max_passes) {
    changed = 0;
    if (examine_all) {
      ++full_sweeps;
      for (std::size_t i = 0; i < n; ++i) changed += examine(i);
      if (changed == 0) break;  // a full pass found no violation
      examine_all = false;
    } else {
      for (std::size_t i = 0; i < n; ++i)
        if (alpha[i] > 0.0 && alpha[i] < c) changed += examine(i);
      if (changed == 0) examine_all = true;
    }
  }

  // Canonical bias from the margin conditions of the final multipliers: the
  // average residual over free support vectors, or the midpoint of the
  // feasible interval when every multiplier sits at a bound. This makes the
  // bias a function of the solution rather than of the update trajectory.
  std::vector<double> margin(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      margin[i] += alpha[j] * static_cast<double>(y[j]) * k_at(j, i);
  const double band = 1e-7 * c;
  double bias_sum = 0.0;
  std::size_t free_count = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (alpha[i] > band && alpha[i] < c - band) {
      bias_sum += static_cast<double>(y[i]) - margin[i];
      ++free_count;
    }
  if (free_count > 0) {
    b = bias_sum / static_cast<double>(free_count);
  } else {
    double blo = -1e18, bhi = 1e18;
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i] == 1) {
        if (alpha[i] <= band) blo = std::max(blo, 1.0 - margin[i]);
        else bhi = std::min(bhi, 1.0 - margin[i]);
      } else {
        if (alpha[i] <= band) bhi = std::min(bhi, -1.0 - margin[i]);
        else blo = std::max(blo, -1.0 - margin[i]);
      }
    }
    b = (blo + bhi) / 2.0;
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = (margin[i] + b - static_cast<double>(y[i])) * static_cast<double>(y[i]);
    if (alpha[i] < c) worst = std::max(worst, -r);
    if (alpha[i] > 0.0) worst = std::max(worst, r);
  }
  model.kkt_violation = std::max(0.0, worst);
  model.iterations = updates;
  model.bias = b;
  for (std::size_t i = 0; i < n; ++i)
    if (alpha[i] > 0.0) {
      model.support_vectors.push_back(z[i]);
      model.coefficients.push_back(alpha[i] * static_cast<double>(y[i]));
    }
  return model;
}

// f(x) = sum_i alpha_i y_i K(s_i, x) + b on the standardized input.
inline double svm_decision(const SvmModel& model, const std::vector<double>& x) {
  if (x.size() != model.scaler.means.size())
    throw std::invalid_argument("svm: input dimension does not match the trained model");
  const std::vector<double> z = model.scaler.transform(x);
  double f = model.bias;
  for (std::size_t i = 0; i < model.support_vectors.size(); ++i)
    f += model.coefficients[i] * detail::kernel_eval(model.kernel, model.support_vectors[i], z);
  return f;
}

inline int svm_predict(const SvmModel& model, const std::vector<double>& x) {
  return svm_decision(model, x) >= 0.0 ? 1 : -1;  // ties go positive
}

// Dual objective of the stored solution: sum alpha - 1/2 sum coeff_i coeff_j K_ij.
inline double svm_dual_objective(const SvmModel& model) {
  double sum_alpha = 0.0;
  for (double coeff : model.coefficients) sum_alpha += std::abs(coeff);
  double quad = 0.0;
  for (std::size_t i = 0; i < model.support_vectors.size(); ++i)
    for (std::size_t j = 0; j < model.support_vectors.size(); ++j)
      quad += model.coefficients[i] * model.coefficients[j] *
              detail::kernel_eval(model.kernel, model.support_vectors[i],
                                  model.support_vectors[j]);
  return sum_alpha - 0.5 * quad;
}

// ---------------------------------------------------------------------------
// Model file: JSON with kernel, C, scaler, bias, and (alpha*y, support row)
// arrays; "extra" is free-form caller metadata.

inline nlohmann::json svm_model_to_json(const SvmModel& model,
                                        nlohmann::json extra = nlohmann::json::object()) {
  return {{"kernel",
           {{"kind", model.kernel.kind == KernelKind::kLinear ? "linear" : "rbf"},
            {"gamma", model.kernel.gamma}}},
          {"C", model.c},
          {"bias", model.bias},
          {"scaler",
           {{"means", model.scaler.means},
            {"stds", model.scaler.stds},
            {"epsilon", model.scaler.epsilon}}},
          {"coefficients", model.coefficients},
          {"support_vectors", model.support_vectors},
          {"meta",
           {{"iterations", model.iterations}, {"kkt_violation", model.kkt_violation}}},
          {"extra", std::move(extra)}};
}

inline SvmModel svm_model_from_json(const nlohmann::json& j) {
  SvmModel m;
  const std::string kind = j.at("kernel").at("kind").get<std::string>();
  if (kind == "linear")
    m.kernel.kind = KernelKind::kLinear;
  else if (kind == "rbf")
    m.kernel.kind = KernelKind::kRbf;
  else
    throw IoError("svm model: unknown kernel kind " + kind);
  m.kernel.gamma = j.at("kernel").at("gamma").get<double>();
  m.c = j.at("C").get<double>();
  m.bias = j.at("bias").get<double>();
  m.scaler.means = j.at("scaler").at("means").get<std::vector<double>>();
  m.scaler.stds = j.at("scaler").at("stds").get<std::vector<double>>();
  m.scaler.epsilon = j.at("scaler").at("epsilon").get<double>();
  m.coefficients = j.at("coefficients").get<std::vector<double>>();
  m.support_vectors = j.at("support_vectors").get<std::vector<std::vector<double>>>();
  m.iterations = j.at("meta").at("iterations").get<std::size_t>();
  m.kkt_violation = j.at("meta").at("kkt_violation").get<double>();
  if (m.support_vectors.size() != m.coefficients.size())
    throw IoError("svm model: coefficient and support-vector counts differ");
  return m;
}

inline void save_svm_model(const std::string& path, const SvmModel& model,
                           nlohmann::json extra = nlohmann::json::object()) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << svm_model_to_json(model, std::move(extra)).dump(2) << '\n';
}

inline SvmModel load_svm_model(const std::string& path, nlohmann::json* extra = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open svm model: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("svm model is not valid JSON: ") + e.what());
  }
  if (extra) *extra = j.value("extra", nlohmann::json::object());
  return svm_model_from_json(j);
}

}  // namespace dfu
