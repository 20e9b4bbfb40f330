// Shared fixtures for the test suites.
#pragma once

#include <vector>

#include "flowvocoder/flow.hpp"
#include "flowvocoder/rng.hpp"

namespace helpers {

using namespace flowvocoder;

// Tiny model used by the Jacobian and gradient oracles: K=2, h=4, M=2, C=4.
inline FlowConfig tiny_config() {
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

// The zero head makes the flow the identity; give it life for tests that need
// a non-trivial transform.
inline void randomize_head(FlowModel& m, uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& [name, t] : m.params)
    if (name.rfind("est.head.", 0) == 0)
      for (size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
}

inline std::vector<double> random_chunk(int n, uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  std::vector<double> x(static_cast<size_t>(n));
  for (auto& v : x) v = scale * rng.normal();
  return x;
}

inline Tensor random_cond(const FlowConfig& cfg, int w, uint64_t seed, double scale = 0.1) {
  Rng rng(seed);
  Tensor c({cfg.cond_channels, cfg.squeeze_h, w});
  for (size_t i = 0; i < c.numel(); ++i) c[i] = scale * rng.normal();
  return c;
}

}  // namespace helpers
