#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dplab/error.hpp"

namespace dplab {

/// RDP of the (unsubsampled) Gaussian mechanism at order alpha: alpha/(2 sigma^2).
inline double rdp_gaussian(double sigma, double alpha) {
  if (sigma <= 0.0) throw ValueError(msg("sigma must be > 0, got ", sigma));
  if (alpha <= 1.0) throw ValueError(msg("alpha must be > 1, got ", alpha));
  return alpha / (2.0 * sigma * sigma);
}

/// RDP of the Poisson-subsampled Gaussian mechanism at integer order
/// alpha >= 2:
///   (1/(alpha-1)) * log( sum_k C(alpha,k) (1-q)^(alpha-k) q^k
///                         * exp(k(k-1)/(2 sigma^2)) )
/// evaluated in log space.
inline double rdp_subsampled_gaussian(double q, double sigma, long alpha) {
  if (q < 0.0 || q > 1.0) throw ValueError(msg("q must be in [0,1], got ", q));
  if (sigma <= 0.0) throw ValueError(msg("sigma must be > 0, got ", sigma));
  if (alpha < 2) throw ValueError(msg("integer order must be >= 2, got ", alpha));
  if (q == 0.0) return 0.0;
  if (q == 1.0) return rdp_gaussian(sigma, static_cast<double>(alpha));

  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  const double a = static_cast<double>(alpha);
  std::vector<double> log_terms;
  log_terms.reserve(alpha + 1);
  for (long k = 0; k <= alpha; ++k) {
    const double kd = static_cast<double>(k);
    const double log_binom = std::lgamma(a + 1.0) - std::lgamma(kd + 1.0) -
                             std::lgamma(a - kd + 1.0);
    log_terms.push_back(log_binom + (a - kd) * log_1mq + kd * log_q +
                        kd * (kd - 1.0) / (2.0 * sigma * sigma));
  }
  const double mx = *std::max_element(log_terms.begin(), log_terms.end());
  double sum = 0.0;
  for (double t : log_terms) sum += std::exp(t - mx);
  return (mx + std::log(sum)) / (a - 1.0);
}

/// RDP at an arbitrary order > 1. Non-integer orders are upper-bounded by
/// the next integer order (RDP is non-decreasing in alpha); orders below 2
/// use the order-2 value. Bracketing applies at q = 1 as well, keeping the
/// bound monotone in q across the boundary.
inline double rdp_subsampled_gaussian_any(double q, double sigma,
                                          double alpha) {
  if (alpha <= 1.0) throw ValueError(msg("alpha must be > 1, got ", alpha));
  const double r = std::round(alpha);
  const bool integral = std::abs(alpha - r) < 1e-9 && r >= 2.0;
  const long a = integral ? static_cast<long>(r)
                          : std::max(2L, static_cast<long>(std::ceil(alpha)));
  return rdp_subsampled_gaussian(q, sigma, a);
}

/// One accounting phase: `steps` releases of the subsampled Gaussian
/// mechanism at sampling rate q and noise multiplier sigma.
struct PrivacyPhase {
  double q = 0.0;
  double sigma = 0.0;
  long steps = 0;
};

inline std::vector<double> default_rdp_orders() {
  std::vector<double> orders{1.25, 1.5, 1.75, 2.5};
  for (int a = 2; a <= 64; ++a) orders.push_back(static_cast<double>(a));
  std::sort(orders.begin(), orders.end());
  return orders;
}

/// Ordered record of accounting phases; the source of truth for epsilon.
struct PrivacyLedger {
  std::vector<PrivacyPhase> phases;
  double delta = 1e-5;
  std::vector<double> orders = default_rdp_orders();

  /// Appends steps, merging into the last phase when (q, sigma) match.
  void add_steps(double q, double sigma, long steps) {
    if (steps < 0) throw ValueError("step count must be >= 0");
    if (steps == 0) return;
    if (!phases.empty() && phases.back().q == q &&
        phases.back().sigma == sigma) {
      phases.back().steps += steps;
    } else {
      phases.push_back({q, sigma, steps});
    }
  }

  long total_steps() const {
    long t = 0;
    for (const auto& p : phases) t += p.steps;
    return t;
  }
};

struct RdpCurve {
  std::vector<double> orders;
  std::vector<double> values;
};

/// Total RDP curve of the ledger: additive over phases and steps.
inline RdpCurve compose(const PrivacyLedger& ledger) {
  RdpCurve curve;
  curve.orders = ledger.orders;
  curve.values.assign(curve.orders.size(), 0.0);
  for (const auto& phase : ledger.phases) {
    if (phase.steps == 0 || phase.q == 0.0) continue;
    for (std::size_t i = 0; i < curve.orders.size(); ++i) {
      if (phase.sigma <= 0.0) {
        curve.values[i] = std::numeric_limits<double>::infinity();
      } else {
        curve.values[i] += static_cast<double>(phase.steps) *
                           rdp_subsampled_gaussian_any(phase.q, phase.sigma,
                                                       curve.orders[i]);
      }
    }
  }
  return curve;
}

/// Classic RDP -> (epsilon, delta) conversion:
///   eps = min_alpha [ RDP(alpha) + log(1/delta)/(alpha-1) ]
/// Returns the epsilon and the minimizing order.
inline std::pair<double, double> to_epsilon(const RdpCurve& curve,
                                            double delta) {
  if (delta <= 0.0 || delta >= 1.0) {
    throw ValueError(msg("delta must be in (0,1), got ", delta));
  }
  if (curve.orders.empty()) throw ValueError("empty RDP curve");
  double best = std::numeric_limits<double>::infinity();
  double best_alpha = curve.orders.front();
  const double log_inv_delta = std::log(1.0 / delta);
  for (std::size_t i = 0; i < curve.orders.size(); ++i) {
    const double eps = curve.values[i] + log_inv_delta / (curve.orders[i] - 1.0);
    if (eps < best) {
      best = eps;
      best_alpha = curve.orders[i];
    }
  }
  return {best, best_alpha};
}

/// Epsilon of the whole ledger at its delta.
inline std::pair<double, double> ledger_epsilon(const PrivacyLedger& ledger) {
  return to_epsilon(compose(ledger), ledger.delta);
}

inline void save_ledger_csv(const PrivacyLedger& ledger,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(msg("cannot open ", path, " for writing"));
  out << "q,sigma,steps\n";
  char buf[96];
  for (const auto& p : ledger.phases) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%ld\n", p.q, p.sigma, p.steps);
    out << buf;
  }
}

inline PrivacyLedger load_ledger_csv(const std::string& path, double delta) {
  std::ifstream in(path);
  if (!in) throw FormatError(msg("cannot open ", path));
  PrivacyLedger ledger;
  ledger.delta = delta;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(msg(path, ": empty file"));
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    PrivacyPhase p;
    if (std::sscanf(line.c_str(), "%lf,%lf,%ld", &p.q, &p.sigma, &p.steps) !=
        3) {
      throw FormatError(msg(path, ":", lineno, ": expected q,sigma,steps"));
    }
    ledger.phases.push_back(p);
  }
  return ledger;
}

}  // namespace dplab
