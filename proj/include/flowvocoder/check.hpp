#pragma once

#include <Eigen/Dense>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "flowvocoder/flow.hpp"
#include "flowvocoder/mixlogcdf.hpp"
#include "flowvocoder/training.hpp"

namespace flowvocoder {

// Self-verification suite behind the `check` subcommand: round-trip, dense
// Jacobian oracle, full finite-difference gradient check, causality probe,
// identity at init, and inversion accuracy. Each property prints one
// pass/fail line. Fault injection exists so the suite itself can be tested:
// "logdet-sign" flips the sign of the flow's total logdet inside the Jacobian
// property, which a sound check must catch.

enum class CheckFault { kNone, kLogdetSign };

inline CheckFault parse_fault(const std::string& name) {
  if (name.empty() || name == "none") return CheckFault::kNone;
  if (name == "logdet-sign") return CheckFault::kLogdetSign;
  throw ConfigError("check: unknown fault '" + name + "'");
}

namespace detail_check {

inline FlowConfig tiny() {
  FlowConfig c;
  c.n_flows = 2;
  c.squeeze_h = 4;
  c.n_mix = 2;
  c.channels = 4;
  c.n_layers = 2;
  c.emb_dim = 4;
  c.cond_channels = 4;
  return c;
}

inline void scatter_head(FlowModel& m, uint64_t seed, double scale) {
  Rng rng(seed);
  for (auto& [name, t] : m.params)
    if (name.rfind("est.head.", 0) == 0)
      for (size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
}

inline std::vector<double> noise(int n, uint64_t seed, double scale) {
  Rng rng(seed);
  std::vector<double> x(static_cast<size_t>(n));
  for (auto& v : x) v = scale * rng.normal();
  return x;
}

inline Tensor noise_cond(const FlowConfig& cfg, int w, uint64_t seed) {
  Rng rng(seed);
  Tensor c({cfg.cond_channels, cfg.squeeze_h, w});
  for (size_t i = 0; i < c.numel(); ++i) c[i] = 0.1 * rng.normal();
  return c;
}

// log|det| of the dense central-difference Jacobian of flow_reverse.
inline double fd_jacobian_logdet(const FlowModel& m, const std::vector<double>& x0,
                                 const Tensor& cond) {
  const int n = static_cast<int>(x0.size());
  Eigen::MatrixXd jac(n, n);
  for (int j = 0; j < n; ++j) {
    std::vector<double> xp = x0, xm = x0;
    xp[static_cast<size_t>(j)] += 1e-6;
    xm[static_cast<size_t>(j)] -= 1e-6;
    const std::vector<double> fp = unsqueeze(flow_reverse(xp, cond, m).z);
    const std::vector<double> fm = unsqueeze(flow_reverse(xm, cond, m).z);
    for (int i = 0; i < n; ++i)
      jac(i, j) = (fp[static_cast<size_t>(i)] - fm[static_cast<size_t>(i)]) / 2e-6;
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
  double ld = 0.0;
  for (int i = 0; i < n; ++i) ld += std::log(std::abs(lu.matrixLU()(i, i)));
  return ld;
}

}  // namespace detail_check

inline bool run_self_check(std::ostream& os, CheckFault fault = CheckFault::kNone,
                           int threads = 1) {
  using detail_check::noise;
  using detail_check::noise_cond;
  using detail_check::scatter_head;
  bool all_ok = true;
  auto report = [&](const char* name, bool ok, const std::string& detail) {
    os << (ok ? "[PASS] " : "[FAIL] ") << name;
    if (!detail.empty()) os << "  (" << detail << ")";
    os << "\n";
    os.flush();
    all_ok = all_ok && ok;
  };
  char buf[160];

  {  // round trip on a mid-size model
    FlowConfig cfg;
    cfg.n_flows = 4;
    cfg.squeeze_h = 8;
    cfg.n_mix = 4;
    cfg.channels = 8;
    cfg.n_layers = 2;
    cfg.emb_dim = 8;
    cfg.cond_channels = 8;
    FlowModel m = FlowModel::init(cfg, 101);
    scatter_head(m, 102, 0.1);
    double err = 0.0;
    for (uint64_t s = 0; s < 2; ++s) {
      const std::vector<double> x = noise(2000, 103 + s, 0.3);
      const Tensor cond = noise_cond(cfg, 250, 105 + s);
      const FlowReverseResult r = flow_reverse(x, cond, m);
      const std::vector<double> back = flow_forward(r.z, cond, m, 1e-10, nullptr, threads);
      for (size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(back[i] - x[i]));
    }
    std::snprintf(buf, sizeof(buf), "max abs err %.3e, tolerance 1e-6", err);
    report("round-trip", err <= 1e-6, buf);
  }

  {  // exact logdet vs dense finite-difference Jacobian
    const FlowConfig cfg = detail_check::tiny();
    double worst = 0.0;
    for (uint64_t s = 0; s < 2; ++s) {
      FlowModel m = FlowModel::init(cfg, 111 + s);
      scatter_head(m, 113 + s, 0.3);
      const std::vector<double> x = noise(24, 115 + s, 0.3);
      const Tensor cond = noise_cond(cfg, 6, 117 + s);
      double got = flow_reverse(x, cond, m).total_logdet;
      if (fault == CheckFault::kLogdetSign) got = -got;
      const double want = detail_check::fd_jacobian_logdet(m, x, cond);
      worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
    }
    std::snprintf(buf, sizeof(buf), "rel err %.3e, tolerance 1e-4", worst);
    report("jacobian-oracle", worst <= 1e-4, buf);
  }

  {  // every parameter's gradient vs central differences
    Config cfg;
    cfg.sample_rate = 8000;
    cfg.n_flows = 2;
    cfg.squeeze_h = 4;
    cfg.n_mix = 2;
    cfg.channels = 4;
    cfg.n_layers = 2;
    cfg.emb_dim = 4;
    cfg.cond_channels = 4;
    cfg.chunk_len = 24;
    FlowModel m = FlowModel::init(cfg.flow(), 121);
    scatter_head(m, 122, 0.2);
    std::vector<BatchItem> batch(1);
    batch[0].chunk = noise(24, 123, 0.3);
    batch[0].n_valid = 24;
    const BatchGrads bg = nll_loss(m, batch, cfg.mel(), threads);
    double worst = 0.0;
    long n_checked = 0;
    for (const auto& [name, g] : bg.grads) {
      Tensor& p = m.params.at(name);
      for (size_t i = 0; i < p.numel(); ++i) {
        const double save = p[i];
        p[i] = save + 1e-5;
        const double up = nll_loss(m, batch, cfg.mel(), threads).loss;
        p[i] = save - 1e-5;
        const double dn = nll_loss(m, batch, cfg.mel(), threads).loss;
        p[i] = save;
        const double fd = (up - dn) / 2e-5;
        worst = std::max(worst, std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
        ++n_checked;
      }
    }
    std::snprintf(buf, sizeof(buf), "%ld parameters, worst rel err %.3e, tolerance 1e-4",
                  n_checked, worst);
    report("gradient-check", worst <= 1e-4, buf);
  }

  {  // causality: perturbing row i leaves rows <= i untouched, and the
     // sequential row pass equals the batch pass
    FlowConfig cfg = detail_check::tiny();
    cfg.squeeze_h = 8;
    FlowModel m = FlowModel::init(cfg, 131);
    scatter_head(m, 132, 0.2);
    const Tensor cond = noise_cond(cfg, 8, 133);
    const Tensor x = squeeze(noise(64, 134, 0.3), 8);
    const GridParams base = estimator_forward(m, x, cond, 1);
    bool causal = true;
    for (int i = 0; i < 8 && causal; ++i) {
      Tensor x2 = x;
      for (int j = 0; j < 8; ++j) x2(0, i, j) += 0.7;
      const GridParams got = estimator_forward(m, x2, cond, 1);
      for (int r = 0; r <= i && causal; ++r)
        for (int j = 0; j < 8; ++j)
          if (got.a(0, r, j) != base.a(0, r, j) || got.mu(0, r, j) != base.mu(0, r, j) ||
              got.b(0, r, j) != base.b(0, r, j)) {
            causal = false;
            break;
          }
    }
    double seq_err = 0.0;
    for (int i = 0; i < 8; ++i) {
      const RowParams seq = detail_flow::estimator_row(m, x, cond, 1, i);
      const RowParams bat = base.row(i);
      for (int j = 0; j < 8; ++j) {
        seq_err = std::max(seq_err, std::abs(seq.a[static_cast<size_t>(j)] -
                                             bat.a[static_cast<size_t>(j)]));
        for (int c = 0; c < cfg.n_mix; ++c)
          seq_err = std::max(seq_err, std::abs(seq.mu[static_cast<size_t>(c * 8 + j)] -
                                               bat.mu[static_cast<size_t>(c * 8 + j)]));
      }
    }
    std::snprintf(buf, sizeof(buf), "sequential/batch max dev %.3e, tolerance 1e-10", seq_err);
    report("causality-probe", causal && seq_err <= 1e-10, buf);
  }

  {  // identity at init
    const FlowConfig cfg = detail_check::tiny();
    const FlowModel m = FlowModel::init(cfg, 141);
    const std::vector<double> x = noise(240, 142, 0.5);
    const Tensor cond = noise_cond(cfg, 60, 143);
    const FlowReverseResult r = flow_reverse(x, cond, m);
    const Tensor sq = squeeze(x, cfg.squeeze_h);
    double err = 0.0;
    for (size_t i = 0; i < sq.numel(); ++i) err = std::max(err, std::abs(r.z[i] - sq[i]));
    double sum_sq = 0.0;
    for (double v : x) sum_sq += v * v;
    const double nll = -log_likelihood(x, cond, m) / static_cast<double>(x.size());
    const double want_nll = sum_sq / (2.0 * static_cast<double>(x.size())) +
                            0.5 * std::log(2.0 * M_PI);
    const bool ok = err <= 1e-13 && std::abs(r.total_logdet) <= 1e-10 &&
                    std::abs(nll - want_nll) <= 1e-10;
    std::snprintf(buf, sizeof(buf), "|Z-squeeze(x)| %.3e, |logdet| %.3e", err,
                  std::abs(r.total_logdet));
    report("identity-at-init", ok, buf);
  }

  {  // inversion accuracy
    Rng rng(151);
    double worst = 0.0;
    int failures = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      const int mcomp = 1 + static_cast<int>(rng.uniform_int(4));
      MixtureParams p;
      double sum = 0.0;
      for (int i = 0; i < mcomp; ++i) {
        p.pi.push_back(0.05 + rng.uniform());
        sum += p.pi.back();
        p.mu.push_back(rng.uniform(-3.0, 3.0));
        p.s.push_back(rng.uniform(-2.0, 2.0));
      }
      for (auto& w : p.pi) w /= sum;
      p.a = rng.uniform(-1.5, 1.5);
      p.b = rng.uniform(-1.5, 1.5);
      const double u = rng.uniform();
      try {
        // the z whose inverse-sigmoid image is u
        const double x = coupling_inverse(logit(u) * std::exp(p.a) + p.b, p, 1e-12);
        worst = std::max(worst, std::abs(mix_log_cdf(x, p) - u));
      } catch (const NumericError&) {
        ++failures;
      }
    }
    std::snprintf(buf, sizeof(buf), "worst residual %.3e, failures %d, tolerance 1e-10", worst,
                  failures);
    report("inversion-accuracy", worst <= 1e-10 && failures == 0, buf);
  }

  return all_ok;
}

}  // namespace flowvocoder
