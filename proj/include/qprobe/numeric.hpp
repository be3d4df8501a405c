#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace qprobe {

// Logistic function, evaluated without overflow for either sign of x.
inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)).
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// log(sigmoid(x)) = -softplus(-x).
inline double log_sigmoid(double x) { return -softplus(-x); }

/// log(sum_i exp(v_i)) using max subtraction. Returns -inf for an empty span.
inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) {
    return -std::numeric_limits<double>::infinity();
  }
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) {
    return m;
  }
  double sum = 0.0;
  for (double x : v) {
    sum += std::exp(x - m);
  }
  return m + std::log(sum);
}

/// Numerically stable softmax of `logits` written into `out`.
inline void softmax(std::span<const double> logits, std::span<double> out) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& p : out) {
    p /= sum;
  }
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (!logits.empty()) {
    softmax(logits, std::span<double>(out));
  }
  return out;
}

/// Total variation distance: half the L1 distance.
inline double total_variation(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    s += std::abs(p[i] - q[i]);
  }
  return 0.5 * s;
}

}  // namespace qprobe
