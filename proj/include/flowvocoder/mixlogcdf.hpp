#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <vector>

#include "flowvocoder/errors.hpp"

namespace flowvocoder {

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// log(1 + e^x), safe for the whole double range.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

// Soft clamp c*tanh(x/c): identity near 0, saturates at +-c.
inline double soft_clamp(double x, double cap) { return cap * std::tanh(x / cap); }

// Clamp limits for the coupling's log scale and the mixture log scales.
constexpr double kLogScaleCap = 5.0;   // |a| <= 5
constexpr double kMixScaleCap = 7.0;   // |s_m| <= 7

// CDF values are kept inside [eps, 1-eps] before the logit is applied so the
// transform stays a bijection at float limits.
constexpr double kCdfEps = 1e-12;

// Parameters of one mixture-of-logistic-CDF coupling element.
// pi are probabilities (already normalized), mu locations, s log scales so the
// logistic argument is (x - mu) * e^{-s}; (a, b) is the affine post-transform
// on the logit, z = logit(cdf(x)) * e^a + b.
struct MixtureParams {
  std::vector<double> pi;
  std::vector<double> mu;
  std::vector<double> s;
  double a = 0.0;
  double b = 0.0;

  int n_components() const { return static_cast<int>(pi.size()); }
};

namespace detail {

inline void check_input(double x, const char* op) {
  if (!std::isfinite(x)) throw InputError(std::string(op) + ": non-finite input");
}

// log sum_m pi_m * sigmoid(u_m)   (log of the mixture CDF), and
// log sum_m pi_m * sigmoid(-u_m)  (log of its complement), both as stable
// log-sum-exps. Neither underflows to -inf for finite inputs.
inline double log_mix_sigmoid(double x, const MixtureParams& p, bool complement) {
  const int m = p.n_components();
  double best = -std::numeric_limits<double>::infinity();
  double terms[64];
  std::vector<double> heap;
  double* t = terms;
  if (m > 64) {
    heap.resize(static_cast<size_t>(m));
    t = heap.data();
  }
  for (int i = 0; i < m; ++i) {
    double u = (x - p.mu[i]) * std::exp(-p.s[i]);
    if (complement) u = -u;
    // log sigmoid(u) = -softplus(-u)
    t[i] = std::log(p.pi[i]) - softplus(-u);
    best = std::max(best, t[i]);
  }
  double acc = 0.0;
  for (int i = 0; i < m; ++i) acc += std::exp(t[i] - best);
  return best + std::log(acc);
}

inline std::atomic<bool>& cdf_clamp_logged() {
  static std::atomic<bool> logged{false};
  return logged;
}

}  // namespace detail

// Mixture-of-logistics CDF: sum_m pi_m * sigmoid((x - mu_m) e^{-s_m}).
// Strictly increasing in x, limits 0 and 1 at -inf/+inf.
inline double mix_log_cdf(double x, const MixtureParams& p) {
  detail::check_input(x, "mix_log_cdf");
  double acc = 0.0;
  for (int i = 0; i < p.n_components(); ++i)
    acc += p.pi[i] * sigmoid((x - p.mu[i]) * std::exp(-p.s[i]));
  return acc;
}

// Log density of the logistic mixture:
// log sum_m pi_m e^{-s_m} sigmoid(u_m) sigmoid(-u_m), u_m = (x - mu_m) e^{-s_m},
// computed as a log-sum-exp of log pi_m - s_m + u_m - 2*softplus(u_m).
inline double mix_log_pdf(double x, const MixtureParams& p) {
  detail::check_input(x, "mix_log_pdf");
  const int m = p.n_components();
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> t(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    double u = (x - p.mu[i]) * std::exp(-p.s[i]);
    t[static_cast<size_t>(i)] = std::log(p.pi[i]) - p.s[i] + u - 2.0 * softplus(u);
    best = std::max(best, t[static_cast<size_t>(i)]);
  }
  double acc = 0.0;
  for (int i = 0; i < m; ++i) acc += std::exp(t[static_cast<size_t>(i)] - best);
  return best + std::log(acc);
}

struct CouplingResult {
  double z;
  double logdet;
};

// Forward coupling z = logit(cdf(x)) e^a + b with its exact log |dz/dx| =
// a + log pdf(x) - log cdf(x) - log(1 - cdf(x)). The CDF and its complement
// are evaluated in log space, so nothing cancels in the tails; if the CDF
// still lands outside [kCdfEps, 1-kCdfEps] it is clamped there (logged once).
inline CouplingResult coupling_forward(double x, const MixtureParams& p) {
  detail::check_input(x, "coupling_forward");
  double log_tau = detail::log_mix_sigmoid(x, p, /*complement=*/false);
  double log_1m_tau = detail::log_mix_sigmoid(x, p, /*complement=*/true);
  const double log_eps = std::log(kCdfEps);
  if (log_tau < log_eps || log_1m_tau < log_eps) {
    if (!detail::cdf_clamp_logged().exchange(true))
      std::fprintf(stderr, "flowvocoder: coupling CDF clamped to [%g, 1-%g]\n", kCdfEps, kCdfEps);
    if (log_tau < log_eps) {
      log_tau = log_eps;
      log_1m_tau = std::log1p(-kCdfEps);
    } else {
      log_1m_tau = log_eps;
      log_tau = std::log1p(-kCdfEps);
    }
  }
  double ea = std::exp(p.a);
  CouplingResult r;
  r.z = (log_tau - log_1m_tau) * ea + p.b;
  r.logdet = p.a + mix_log_pdf(x, p) - log_tau - log_1m_tau;
  return r;
}

// Inverse of coupling_forward by bracketed bisection on the monotone CDF,
// polished with a few Newton steps. Never Newton alone: the bracket guarantees
// convergence. Returns x with |mix_log_cdf(x) - u| <= tol for
// u = sigmoid((z - b) e^{-a}).
inline double coupling_inverse(double z, const MixtureParams& p, double tol) {
  detail::check_input(z, "coupling_inverse");
  if (!(tol > 0.0)) throw ConfigError("coupling_inverse: tol must be positive");
  // Mirror the forward's CDF clamp: a z beyond the representable logit range
  // maps to the same boundary point, keeping the map a bijection at float
  // limits (a float CDF sum may never reach 1.0 exactly, so u = 1.0 would
  // otherwise be unbracketable).
  const double u = std::clamp(sigmoid((z - p.b) * std::exp(-p.a)), kCdfEps, 1.0 - kCdfEps);

  double mu_lo = p.mu[0], mu_hi = p.mu[0], scale = 0.0;
  for (int i = 0; i < p.n_components(); ++i) {
    mu_lo = std::min(mu_lo, p.mu[i]);
    mu_hi = std::max(mu_hi, p.mu[i]);
    scale = std::max(scale, std::exp(p.s[i]));
  }
  double lo = mu_lo - 40.0 * scale;
  double hi = mu_hi + 40.0 * scale;

  // Expand geometrically until [cdf(lo), cdf(hi)] brackets u.
  double f_lo = mix_log_cdf(lo, p);
  double f_hi = mix_log_cdf(hi, p);
  while (f_lo > u || f_hi < u) {
    double width = hi - lo;
    if (width > 1e6)
      throw NumericError("coupling_inverse",
                         "bracket expansion exceeded 1e6 width at u=" + std::to_string(u));
    if (f_lo > u) {
      lo -= width;
      f_lo = mix_log_cdf(lo, p);
    }
    if (f_hi < u) {
      hi += width;
      f_hi = mix_log_cdf(hi, p);
    }
  }

  // Bisect to x-space resolution, not just CDF residual: in flat tail regions
  // a tiny CDF residual still allows a large x error, and the round-trip
  // contract is on x.
  double x = 0.5 * (lo + hi);
  double f = mix_log_cdf(x, p);
  for (int it = 0; it < 200; ++it) {
    if (f == u) break;
    if (f < u)
      lo = x;
    else
      hi = x;
    double next = 0.5 * (lo + hi);
    if (next == x || hi - lo <= 4e-15 * std::max(1.0, std::abs(x))) break;
    x = next;
    f = mix_log_cdf(x, p);
  }

  // Newton polish on the same bracket.
  for (int it = 0; it < 5 && std::abs(f - u) > 0.1 * tol; ++it) {
    double step = (f - u) / std::exp(mix_log_pdf(x, p));
    double next = x - step;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    x = next;
    f = mix_log_cdf(x, p);
    if (f < u)
      lo = std::max(lo, x);
    else
      hi = std::min(hi, x);
  }

  if (std::abs(f - u) > tol) {
    char msg[80];
    std::snprintf(msg, sizeof(msg), "tolerance not reached, residual=%.3e", std::abs(f - u));
    throw NumericError("coupling_inverse", msg);
  }
  return x;
}

}  // namespace flowvocoder
