#pragma once

#include <chrono>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "flowvocoder/autodiff.hpp"
#include "flowvocoder/mixlogcdf.hpp"
#include "flowvocoder/rng.hpp"
#include "flowvocoder/tensor.hpp"

namespace flowvocoder {

struct FlowConfig {
  int n_flows = 8;        // flow blocks sharing one estimator
  int squeeze_h = 16;     // rows of the squeezed matrix
  int n_mix = 4;          // logistic mixture components per element
  int channels = 32;      // estimator residual channels
  int n_layers = 4;       // residual blocks in the estimator
  int emb_dim = 64;       // flow indication embedding size
  int cond_channels = 32; // conditioner channels after projection
  int n_mels = 80;

  int head_channels() const { return 2 + 3 * n_mix; }
  // Width dilation doubles per layer, wrapping at 8.
  int dilation(int layer) const { return 1 << (layer % 4); }
};

// Upsampler geometry: two transposed convs, each 16x in time, 256x total.
constexpr int kUpsampleKernelT = 32;
constexpr int kUpsampleKernelB = 3;
constexpr int kUpsampleStride = 16;
constexpr int kUpsampleFactor = kUpsampleStride * kUpsampleStride;
constexpr double kUpsampleLeakySlope = 0.4;

// One set of estimator weights shared by all n_flows blocks, per-block
// embeddings, and the conditioning upsampler. Parameters live in a sorted map
// so iteration order (init, checkpointing, gradient packing) is stable.
struct FlowModel {
  FlowConfig cfg;
  std::map<std::string, Tensor> params;

  static FlowModel init(const FlowConfig& cfg, uint64_t seed) {
    FlowModel m;
    m.cfg = cfg;
    const int c = cfg.channels, m2 = 2 * c;
    auto def = [&](const std::string& name, std::vector<int> shape) {
      m.params.emplace(name, Tensor(std::move(shape)));
    };
    def("est.in.w", {c, 1, 1, 1});
    def("est.in.b", {c});
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string p = layer_prefix(l);
      def(p + "pre.w", {c, c, 1, 1});
      def(p + "pre.b", {c});
      def(p + "gate.w", {m2, c, 3, 3});
      def(p + "gate.b", {m2});
      def(p + "mel.w", {m2, cfg.cond_channels, 1, 1});
      def(p + "emb.w", {m2, cfg.emb_dim});
      def(p + "post.w", {c, c, 1, 1});
      def(p + "post.b", {c});
    }
    def("est.head.w", {cfg.head_channels(), c, 1, 1});
    def("est.head.b", {cfg.head_channels()});
    for (int k = 0; k < cfg.n_flows; ++k) def(emb_name(k), {cfg.emb_dim});
    // Plane kernels are [band, time]: 3 taps across bands, 32 across time.
    def("up.c1.w", {kUpsampleKernelB, kUpsampleKernelT});
    def("up.c1.b", {1});
    def("up.c2.w", {kUpsampleKernelB, kUpsampleKernelT});
    def("up.c2.b", {1});
    def("up.proj.w", {cfg.cond_channels, cfg.n_mels, 1, 1});
    def("up.proj.b", {cfg.cond_channels});

    // Scaled-normal init in name order; the output head stays zero so the
    // whole flow is the identity map at initialization.
    Rng rng(seed);
    for (auto& [name, t] : m.params) {
      if (name.rfind("est.head.", 0) == 0) continue;
      if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0) continue;
      double fan_in = 1.0;
      if (t.rank() == 4) fan_in = static_cast<double>(t.extent(1) * t.extent(2) * t.extent(3));
      else if (t.rank() == 2) fan_in = static_cast<double>(t.extent(1));
      else if (t.rank() == 1) fan_in = static_cast<double>(t.extent(0));  // embeddings
      const double sd = 1.0 / std::sqrt(fan_in);
      for (size_t i = 0; i < t.numel(); ++i) t[i] = sd * rng.normal();
    }
    return m;
  }

  static std::string layer_prefix(int l) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "est.l%02d.", l);
    return buf;
  }

  static std::string emb_name(int k) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "emb.k%02d", k);
    return buf;
  }

  const Tensor& p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("model: unknown parameter " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor*>> named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.reserve(params.size());
    for (auto& [name, t] : params) out.emplace_back(name, &t);
    return out;
  }

  size_t n_scalars() const {
    size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }
};

// ---- squeeze --------------------------------------------------------------

// Interleaved squeeze: X(0,i,j) = x[j*H + i], so adjacent samples occupy
// adjacent rows of one column.
inline Tensor squeeze(const std::vector<double>& x, int H) {
  if (H <= 0 || x.size() % static_cast<size_t>(H) != 0)
    throw InputError("squeeze: length not divisible by H");
  const int w = static_cast<int>(x.size()) / H;
  Tensor out({1, H, w});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < w; ++j) out(0, i, j) = x[static_cast<size_t>(j) * H + i];
  return out;
}

inline std::vector<double> unsqueeze(const Tensor& X) {
  if (X.rank() != 3 || X.extent(0) != 1) throw InputError("unsqueeze: expected [1,h,w]");
  const int h = X.extent(1), w = X.extent(2);
  std::vector<double> x(static_cast<size_t>(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) x[static_cast<size_t>(j) * h + i] = X(0, i, j);
  return x;
}

// Same layout applied to a multi-channel per-sample signal [C,1,n] -> [C,H,n/H].
inline Tensor squeeze_channels(const Tensor& c, int H) {
  if (c.rank() != 3 || c.extent(1) != 1) throw InputError("squeeze_channels: expected [C,1,n]");
  const int n = c.extent(2);
  if (n % H != 0) throw InputError("squeeze_channels: length not divisible by H");
  const int w = n / H;
  Tensor out({c.extent(0), H, w});
  for (int ch = 0; ch < c.extent(0); ++ch)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < w; ++j) out(ch, i, j) = c(ch, 0, j * H + i);
  return out;
}

inline Tensor reverse_rows_plain(const Tensor& x) {
  Tensor out(x.shape());
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) out(ch, i, j) = x(ch, h - 1 - i, j);
  return out;
}

// ---- estimator -------------------------------------------------------------

// Tape leaf per model parameter. `trainable` decides whether gradients flow.
struct ParamIds {
  std::map<std::string, ad::Tape::Id> ids;
  ad::Tape::Id at(const std::string& name) const {
    auto it = ids.find(name);
    if (it == ids.end()) throw ConfigError("params: unknown name " + name);
    return it->second;
  }
};

inline ParamIds register_params(ad::Tape& t, const FlowModel& m, bool trainable) {
  ParamIds out;
  for (const auto& [name, tensor] : m.params)
    out.ids.emplace(name, trainable ? t.param(tensor) : t.input(tensor));
  return out;
}

struct GridParamIds {
  ad::Tape::Id a, b, pl, mu, s;
};

// Shared density estimator over a squeezed grid, one pass for all rows.
// Input row i contributes to output rows > i only: the grid is shifted down
// one row, then every conv is height-causal (non-strict), so the composition
// is strictly causal. The mel bias and the projected flow embedding e_k are
// added to every gated pre-activation; the zero-initialized head makes the
// output identity parameters at init.
inline GridParamIds estimator_forward_t(ad::Tape& t, const FlowModel& m, const ParamIds& P,
                                        ad::Tape::Id x_grid, ad::Tape::Id cond_grid, int k) {
  const FlowConfig& cfg = m.cfg;
  const ad::Conv2dSpec one{1, ad::HeightPad::kCausalNonStrict};
  ad::Tape::Id h = t.shift_down_rows(x_grid);
  h = t.conv2d(h, P.at("est.in.w"), P.at("est.in.b"), one);
  const ad::Tape::Id ek = P.at(FlowModel::emb_name(k));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = FlowModel::layer_prefix(l);
    ad::Tape::Id pre = t.conv2d(h, P.at(p + "pre.w"), P.at(p + "pre.b"), one);
    ad::Tape::Id gate = t.conv2d(pre, P.at(p + "gate.w"), P.at(p + "gate.b"),
                                 {cfg.dilation(l), ad::HeightPad::kCausalNonStrict});
    gate = t.add(gate, t.conv2d(cond_grid, P.at(p + "mel.w"), -1, one));
    gate = t.channel_bias(gate, t.matvec(P.at(p + "emb.w"), ek));
    ad::Tape::Id post = t.conv2d(t.gated_activation(gate), P.at(p + "post.w"), P.at(p + "post.b"), one);
    h = t.add(h, post);
  }
  ad::Tape::Id head = t.conv2d(h, P.at("est.head.w"), P.at("est.head.b"), one);
  const int mix = cfg.n_mix;
  GridParamIds out;
  out.a = t.soft_clamp(t.slice_channels(head, 0, 1), kLogScaleCap);
  out.b = t.slice_channels(head, 1, 2);
  out.pl = t.slice_channels(head, 2, 2 + mix);
  out.mu = t.slice_channels(head, 2 + mix, 2 + 2 * mix);
  out.s = t.soft_clamp(t.slice_channels(head, 2 + 2 * mix, 2 + 3 * mix), kMixScaleCap);
  return out;
}

// Mixture parameters of one row, as produced by the estimator for that row.
struct RowParams {
  int n_mix = 0;
  int width = 0;
  std::vector<double> a, b;       // [w]
  std::vector<double> pl, mu, s;  // [n_mix * w], component-major

  MixtureParams at(int j) const {
    MixtureParams p;
    p.a = a[static_cast<size_t>(j)];
    p.b = b[static_cast<size_t>(j)];
    p.pi.resize(static_cast<size_t>(n_mix));
    p.mu.resize(static_cast<size_t>(n_mix));
    p.s.resize(static_cast<size_t>(n_mix));
    double best = pl[static_cast<size_t>(j)];
    for (int i = 1; i < n_mix; ++i)
      best = std::max(best, pl[static_cast<size_t>(i) * width + j]);
    double zsum = 0.0;
    for (int i = 0; i < n_mix; ++i) {
      const double e = std::exp(pl[static_cast<size_t>(i) * width + j] - best);
      p.pi[static_cast<size_t>(i)] = e;
      zsum += e;
      p.mu[static_cast<size_t>(i)] = mu[static_cast<size_t>(i) * width + j];
      p.s[static_cast<size_t>(i)] = s[static_cast<size_t>(i) * width + j];
    }
    for (int i = 0; i < n_mix; ++i) p.pi[static_cast<size_t>(i)] /= zsum;
    return p;
  }
};

// Plain (value-level) estimator parameters for a whole grid.
struct GridParams {
  Tensor a, b;       // [1,h,w]
  Tensor pl, mu, s;  // [M,h,w]

  RowParams row(int i) const {
    RowParams r;
    r.n_mix = pl.extent(0);
    r.width = pl.extent(2);
    const int w = r.width;
    r.a.resize(static_cast<size_t>(w));
    r.b.resize(static_cast<size_t>(w));
    r.pl.resize(static_cast<size_t>(r.n_mix) * w);
    r.mu.resize(static_cast<size_t>(r.n_mix) * w);
    r.s.resize(static_cast<size_t>(r.n_mix) * w);
    for (int j = 0; j < w; ++j) {
      r.a[static_cast<size_t>(j)] = a(0, i, j);
      r.b[static_cast<size_t>(j)] = b(0, i, j);
    }
    for (int mix = 0; mix < r.n_mix; ++mix)
      for (int j = 0; j < w; ++j) {
        r.pl[static_cast<size_t>(mix) * w + j] = pl(mix, i, j);
        r.mu[static_cast<size_t>(mix) * w + j] = mu(mix, i, j);
        r.s[static_cast<size_t>(mix) * w + j] = s(mix, i, j);
      }
    return r;
  }
};

inline GridParams estimator_forward(const FlowModel& m, const Tensor& x_grid, const Tensor& cond,
                                    int k) {
  if (cond.rank() != 3 || cond.extent(0) != m.cfg.cond_channels ||
      cond.extent(1) != x_grid.extent(1) || cond.extent(2) != x_grid.extent(2))
    throw ConfigError("estimator_forward: conditioner shape mismatch");
  ad::Tape t;
  ParamIds P = register_params(t, m, /*trainable=*/false);
  GridParamIds ids = estimator_forward_t(t, m, P, t.input(x_grid), t.input(cond), k);
  GridParams out;
  out.a = t.value(ids.a);
  out.b = t.value(ids.b);
  out.pl = t.value(ids.pl);
  out.mu = t.value(ids.mu);
  out.s = t.value(ids.s);
  return out;
}

// ---- full flow --------------------------------------------------------------

struct FlowReverseIds {
  ad::Tape::Id z;       // [1,h,w] in the final (post-permutation) layout
  ad::Tape::Id ld_map;  // [1,h,w] per-element log|det|, same layout
};

// x -> z (the density-estimation direction): K couplings, each followed by a
// row reversal so every row gets context in some block. K is even in all
// supported configs, so the K reversals compose to the identity and the
// zero-initialized flow maps x to exactly squeeze(x). The per-element logdet
// map is permuted alongside the data so masking stays aligned.
inline FlowReverseIds flow_reverse_t(ad::Tape& t, const FlowModel& m, const ParamIds& P,
                                     ad::Tape::Id x_grid, ad::Tape::Id cond_grid) {
  const Tensor& x = t.value(x_grid);
  ad::Tape::Id ld = t.input(Tensor({1, x.extent(1), x.extent(2)}));
  ad::Tape::Id y = x_grid;
  ad::Tape::Id cond = cond_grid;
  for (int k = 0; k < m.cfg.n_flows; ++k) {
    GridParamIds gp = estimator_forward_t(t, m, P, y, cond, k);
    ad::Tape::Id zc = t.coupling(y, gp.a, gp.b, gp.pl, gp.mu, gp.s);
    y = t.reverse_rows(t.slice_channels(zc, 0, 1));
    ld = t.reverse_rows(t.add(ld, t.slice_channels(zc, 1, 2)));
    cond = t.reverse_rows(cond);
  }
  return {y, ld};
}

struct FlowReverseResult {
  Tensor z;
  Tensor ld_map;
  double total_logdet = 0.0;
};

inline FlowReverseResult flow_reverse(const std::vector<double>& x, const Tensor& cond,
                                      const FlowModel& m) {
  ad::Tape t;
  ParamIds P = register_params(t, m, /*trainable=*/false);
  FlowReverseIds ids =
      flow_reverse_t(t, m, P, t.input(squeeze(x, m.cfg.squeeze_h)), t.input(cond));
  FlowReverseResult r;
  r.z = t.value(ids.z);
  r.ld_map = t.value(ids.ld_map);
  for (size_t i = 0; i < r.ld_map.numel(); ++i) r.total_logdet += r.ld_map[i];
  return r;
}

// Exact total log-likelihood in nats under a standard-normal base.
inline double log_likelihood(const std::vector<double>& x, const Tensor& cond,
                             const FlowModel& m) {
  FlowReverseResult r = flow_reverse(x, cond, m);
  double ll = r.total_logdet;
  for (size_t i = 0; i < r.z.numel(); ++i)
    ll += -0.5 * r.z[i] * r.z[i] - 0.5 * std::log(2.0 * M_PI);
  return ll;
}

namespace detail_flow {

// Estimator output for row `i`, computed from only the already-known rows
// 0..i-1 (rows 0..i are passed; causality makes row i's content irrelevant).
inline RowParams estimator_row(const FlowModel& m, const Tensor& x_partial, const Tensor& cond,
                               int k, int i) {
  const int w = x_partial.extent(2);
  Tensor sub({1, i + 1, w});
  for (int r = 0; r <= i; ++r)
    for (int j = 0; j < w; ++j) sub(0, r, j) = x_partial(0, r, j);
  Tensor csub({cond.extent(0), i + 1, w});
  for (int c = 0; c < cond.extent(0); ++c)
    for (int r = 0; r <= i; ++r)
      for (int j = 0; j < w; ++j) csub(c, r, j) = cond(c, r, j);
  ad::Tape t;
  ParamIds P = register_params(t, m, /*trainable=*/false);
  GridParamIds ids = estimator_forward_t(t, m, P, t.input(sub), t.input(csub), k);
  GridParams gp;
  gp.a = t.value(ids.a);
  gp.b = t.value(ids.b);
  gp.pl = t.value(ids.pl);
  gp.mu = t.value(ids.mu);
  gp.s = t.value(ids.s);
  return gp.row(i);
}

}  // namespace detail_flow

struct FlowForwardTiming {
  double estimator_ms = 0.0;
  double inversion_ms = 0.0;
};

namespace detail_flow {

inline double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Static split of [0, n) over worker threads; each span writes disjoint slots,
// so results are identical for any thread count. Worker exceptions are
// captured and rethrown on the caller.
inline void parallel_spans(int n, int threads, const std::function<void(int, int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    fn(0, n);
    return;
  }
  std::vector<std::exception_ptr> errs(static_cast<size_t>(threads));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  const int per = (n + threads - 1) / threads;
  for (int tix = 0; tix < threads; ++tix) {
    const int lo = tix * per, hi = std::min(n, lo + per);
    pool.emplace_back([&, tix, lo, hi] {
      try {
        if (lo < hi) fn(lo, hi);
      } catch (...) {
        errs[static_cast<size_t>(tix)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail_flow

// z -> x direction: blocks are undone in reverse order; within a block rows
// are generated sequentially, each element recovered by numerically inverting
// the mixture CDF. Elements within a row are independent given the row's
// parameters. Inversion failures are rethrown with (k, i, j) coordinates.
inline std::vector<double> flow_forward(const Tensor& z, const Tensor& cond, const FlowModel& m,
                                        double tol, FlowForwardTiming* timing = nullptr,
                                        int threads = 1) {
  if (z.rank() != 3 || z.extent(0) != 1) throw ConfigError("flow_forward: expected [1,h,w]");
  const int h = z.extent(1), w = z.extent(2);
  const int K = m.cfg.n_flows;
  Tensor cur = z;
  Tensor cond_rev = reverse_rows_plain(cond);
  for (int k = K - 1; k >= 0; --k) {
    cur = reverse_rows_plain(cur);  // undo the permutation that followed block k
    const Tensor& cond_k = (k % 2 == 1) ? cond_rev : cond;
    Tensor x({1, h, w});
    for (int i = 0; i < h; ++i) {
      const double t0 = detail_flow::now_ms();
      RowParams rp = detail_flow::estimator_row(m, x, cond_k, k, i);
      const double t1 = detail_flow::now_ms();
      if (timing) timing->estimator_ms += t1 - t0;
      auto invert_span = [&](int j0, int j1) {
        for (int j = j0; j < j1; ++j) {
          try {
            x(0, i, j) = coupling_inverse(cur(0, i, j), rp.at(j), tol);
          } catch (const NumericError& e) {
            throw NumericError("flow_forward",
                               "inversion failed at (k=" + std::to_string(k) +
                                   ", i=" + std::to_string(i) + ", j=" + std::to_string(j) +
                                   "): " + e.what());
          }
        }
      };
      detail_flow::parallel_spans(w, threads, invert_span);
      if (timing) timing->inversion_ms += detail_flow::now_ms() - t1;
    }
    cur = std::move(x);
  }
  return unsqueeze(cur);
}

}  // namespace flowvocoder
