#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "flowvocoder/errors.hpp"
#include "flowvocoder/mixlogcdf.hpp"
#include "flowvocoder/tensor.hpp"

namespace flowvocoder {
namespace ad {

// Reverse-mode tape over tensor primitives. Every op runs eagerly, keeps its
// output, and knows its vector-Jacobian product; backward() replays the tape
// in reverse and accumulates gradients into every leaf that influenced the
// loss (leaves that did not influence it get exactly zero).
//
// The tape is single-writer: one training step owns one tape. Reading values
// and gradients afterwards is safe from any thread.

enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kMul,
  kScale,
  kAddConst,
  kConv2d,
  kConvT2dPlane,
  kMatVec,
  kChannelBias,
  kGated,
  kSliceCh,
  kSoftClamp,
  kLeakyRelu,
  kShiftDownRows,
  kReverseRows,
  kCoupling,
  kSum,
  kReshape,
  kCropW,
  kSqueezeRows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddConst: return "add_const";
    case Op::kConv2d: return "conv2d";
    case Op::kConvT2dPlane: return "conv_transpose2d";
    case Op::kMatVec: return "matvec";
    case Op::kChannelBias: return "channel_bias";
    case Op::kGated: return "gated_activation";
    case Op::kSliceCh: return "slice_channels";
    case Op::kSoftClamp: return "soft_clamp";
    case Op::kLeakyRelu: return "leaky_relu";
    case Op::kShiftDownRows: return "shift_down_rows";
    case Op::kReverseRows: return "reverse_rows";
    case Op::kCoupling: return "mixlogcdf_coupling";
    case Op::kSum: return "sum";
    case Op::kReshape: return "reshape";
    case Op::kCropW: return "crop_w";
    case Op::kSqueezeRows: return "squeeze_rows";
  }
  return "?";
}

// Height padding of conv2d. Both pad with zeros above row 0 only; width
// padding is always symmetric (non-causal).
//   kCausalStrict:    output row i sees input rows [i-kh, i-1]
//   kCausalNonStrict: output row i sees input rows [i-kh+1, i]
enum class HeightPad : uint8_t { kCausalStrict, kCausalNonStrict };

struct Conv2dSpec {
  int dilation_w = 1;
  HeightPad pad = HeightPad::kCausalNonStrict;
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using CMapRowMat = Eigen::Map<const RowMat>;

class Tape {
 public:
  using Id = int;

  // Constant leaf: gradients do not flow into it.
  Id input(Tensor v) { return push_leaf(std::move(v), /*requires_grad=*/false); }

  // Differentiable leaf (a model parameter).
  Id param(Tensor v) { return push_leaf(std::move(v), /*requires_grad=*/true); }

  const Tensor& value(Id id) const { return nodes_[check(id)].val; }

  // Gradient of the last backward() w.r.t. node `id`. Zeros if untouched.
  const Tensor& grad(Id id) const {
    const Node& n = nodes_[check(id)];
    if (n.grad.numel() == 0) {
      static thread_local Tensor zero;
      zero = Tensor(n.val.shape());
      return zero;
    }
    return n.grad;
  }

  double scalar(Id id) const {
    const Tensor& t = value(id);
    if (t.numel() != 1) throw ConfigError("scalar: node is not a scalar");
    return t[0];
  }

  size_t size() const { return nodes_.size(); }

  // ---- primitives -------------------------------------------------------

  Id add(Id a, Id b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (!x.same_shape(y)) throw ConfigError("add: shape mismatch");
    Tensor out(x.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + y[i];
    return push(Op::kAdd, {a, b}, std::move(out));
  }

  Id mul(Id a, Id b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (!x.same_shape(y)) throw ConfigError("mul: shape mismatch");
    Tensor out(x.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
    return push(Op::kMul, {a, b}, std::move(out));
  }

  Id scale(Id a, double c) {
    const Tensor& x = value(a);
    Tensor out(x.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = c * x[i];
    Id id = push(Op::kScale, {a}, std::move(out));
    nodes_[id].d0 = c;
    return id;
  }

  Id add_const(Id a, double c) {
    const Tensor& x = value(a);
    Tensor out(x.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + c;
    Id id = push(Op::kAddConst, {a}, std::move(out));
    nodes_[id].d0 = c;
    return id;
  }

  // x [Cin,h,w] * kernel [Cout,Cin,kh,kw] -> [Cout,h,w], optional bias [Cout].
  // Width uses symmetric zero padding (kw odd); height pads zeros above row 0
  // only, per `spec.pad`. im2col + GEMM inside.
  Id conv2d(Id x_id, Id w_id, Id b_id, Conv2dSpec spec) {
    const Tensor& x = value(x_id);
    const Tensor& w = value(w_id);
    if (x.rank() != 3 || w.rank() != 4) throw ConfigError("conv2d: expected rank-3 input, rank-4 kernel");
    if (w.extent(1) != x.extent(0)) throw ConfigError("conv2d: channel mismatch");
    if (w.extent(3) % 2 == 0) throw ConfigError("conv2d: width kernel must be odd");
    const int c_out = w.extent(0), h = x.extent(1), ww = x.extent(2);
    Tensor cols = im2col(x, w.extent(2), w.extent(3), spec);
    const int k = w.extent(1) * w.extent(2) * w.extent(3);
    Tensor out({c_out, h, ww});
    {
      CMapRowMat wm(w.data(), c_out, k);
      CMapRowMat xm(cols.data(), k, h * ww);
      MapRowMat om(out.data(), c_out, h * ww);
      om.noalias() = wm * xm;
    }
    if (b_id >= 0) {
      const Tensor& b = value(b_id);
      if (b.rank() != 1 || b.extent(0) != c_out) throw ConfigError("conv2d: bias shape mismatch");
      for (int c = 0; c < c_out; ++c) {
        double bc = b[static_cast<size_t>(c)];
        double* o = out.data() + static_cast<size_t>(c) * h * ww;
        for (int i = 0; i < h * ww; ++i) o[i] += bc;
      }
    }
    Id id = push(Op::kConv2d, b_id >= 0 ? std::vector<Id>{x_id, w_id, b_id}
                                        : std::vector<Id>{x_id, w_id},
                 std::move(out));
    Node& n = nodes_[id];
    n.i0 = spec.dilation_w;
    n.i1 = spec.pad == HeightPad::kCausalStrict ? 1 : 0;
    return id;
  }

  // Single-plane 2D transposed convolution: x [1,H,W] * kernel [kh,kw] with
  // stride (sh,sw) and zero padding (ph,pw) -> [1, (H-1)sh-2ph+kh, (W-1)sw-2pw+kw].
  Id conv_transpose2d_plane(Id x_id, Id w_id, Id b_id, int sh, int sw, int ph, int pw) {
    const Tensor& x = value(x_id);
    const Tensor& w = value(w_id);
    if (x.rank() != 3 || x.extent(0) != 1 || w.rank() != 2)
      throw ConfigError("conv_transpose2d: expected [1,H,W] input and rank-2 kernel");
    const int h = x.extent(1), wd = x.extent(2);
    const int kh = w.extent(0), kw = w.extent(1);
    const int ho = (h - 1) * sh - 2 * ph + kh;
    const int wo = (wd - 1) * sw - 2 * pw + kw;
    if (ho <= 0 || wo <= 0) throw ConfigError("conv_transpose2d: output would be empty");
    Tensor out({1, ho, wo});
    for (int ih = 0; ih < h; ++ih)
      for (int iw = 0; iw < wd; ++iw) {
        double v = x(0, ih, iw);
        for (int r = 0; r < kh; ++r) {
          int oh = ih * sh - ph + r;
          if (oh < 0 || oh >= ho) continue;
          for (int c = 0; c < kw; ++c) {
            int ow = iw * sw - pw + c;
            if (ow < 0 || ow >= wo) continue;
            out(0, oh, ow) += v * w(r, c);
          }
        }
      }
    if (b_id >= 0) {
      double bv = value(b_id)[0];
      for (size_t i = 0; i < out.numel(); ++i) out[i] += bv;
    }
    Id id = push(Op::kConvT2dPlane,
                 b_id >= 0 ? std::vector<Id>{x_id, w_id, b_id} : std::vector<Id>{x_id, w_id},
                 std::move(out));
    Node& n = nodes_[id];
    n.i0 = sh;
    n.i1 = sw;
    n.i2 = ph;
    n.i3 = pw;
    return id;
  }

  Id matvec(Id w_id, Id v_id) {
    const Tensor& w = value(w_id);
    const Tensor& v = value(v_id);
    if (w.rank() != 2 || v.rank() != 1 || w.extent(1) != v.extent(0))
      throw ConfigError("matvec: shape mismatch");
    const int m = w.extent(0), n = w.extent(1);
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += w(i, j) * v[static_cast<size_t>(j)];
      out[static_cast<size_t>(i)] = acc;
    }
    return push(Op::kMatVec, {w_id, v_id}, std::move(out));
  }

  Id channel_bias(Id x_id, Id v_id) {
    const Tensor& x = value(x_id);
    const Tensor& v = value(v_id);
    if (x.rank() != 3 || v.rank() != 1 || v.extent(0) != x.extent(0))
      throw ConfigError("channel_bias: shape mismatch");
    Tensor out(x.shape());
    const int hw = x.extent(1) * x.extent(2);
    for (int c = 0; c < x.extent(0); ++c) {
      double bc = v[static_cast<size_t>(c)];
      const double* xi = x.data() + static_cast<size_t>(c) * hw;
      double* o = out.data() + static_cast<size_t>(c) * hw;
      for (int i = 0; i < hw; ++i) o[i] = xi[i] + bc;
    }
    return push(Op::kChannelBias, {x_id, v_id}, std::move(out));
  }

  // tanh(first half) * sigmoid(second half), [2C,h,w] -> [C,h,w].
  Id gated_activation(Id x_id) {
    const Tensor& x = value(x_id);
    if (x.rank() != 3 || x.extent(0) % 2 != 0)
      throw ConfigError("gated_activation: channel count must be even");
    const int c = x.extent(0) / 2, hw = x.extent(1) * x.extent(2);
    Tensor out({c, x.extent(1), x.extent(2)});
    for (int ch = 0; ch < c; ++ch) {
      const double* t = x.data() + static_cast<size_t>(ch) * hw;
      const double* g = x.data() + static_cast<size_t>(ch + c) * hw;
      double* o = out.data() + static_cast<size_t>(ch) * hw;
      for (int i = 0; i < hw; ++i) o[i] = std::tanh(t[i]) * sigmoid(g[i]);
    }
    return push(Op::kGated, {x_id}, std::move(out));
  }

  Id slice_channels(Id x_id, int c0, int c1) {
    const Tensor& x = value(x_id);
    if (x.rank() != 3 || c0 < 0 || c1 > x.extent(0) || c0 >= c1)
      throw ConfigError("slice_channels: bad range");
    const int hw = x.extent(1) * x.extent(2);
    Tensor out({c1 - c0, x.extent(1), x.extent(2)});
    std::copy(x.data() + static_cast<size_t>(c0) * hw, x.data() + static_cast<size_t>(c1) * hw,
              out.data());
    Id id = push(Op::kSliceCh, {x_id}, std::move(out));
    nodes_[id].i0 = c0;
    return id;
  }

  Id soft_clamp(Id x_id, double cap) {
    const Tensor& x = value(x_id);
    Tensor out(x.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = cap * std::tanh(x[i] / cap);
    Id id = push(Op::kSoftClamp, {x_id}, std::move(out));
    nodes_[id].d0 = cap;
    return id;
  }

  Id leaky_relu(Id x_id, double slope) {
    const Tensor& x = value(x_id);
    Tensor out(x.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : slope * x[i];
    Id id = push(Op::kLeakyRelu, {x_id}, std::move(out));
    nodes_[id].d0 = slope;
    return id;
  }

  // out[.,0,.] = 0, out[.,i,.] = x[.,i-1,.].
  Id shift_down_rows(Id x_id) {
    const Tensor& x = value(x_id);
    if (x.rank() != 3) throw ConfigError("shift_down_rows: expected rank 3");
    const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
    Tensor out(x.shape());
    for (int ch = 0; ch < c; ++ch)
      for (int i = 1; i < h; ++i)
        for (int j = 0; j < w; ++j) out(ch, i, j) = x(ch, i - 1, j);
    return push(Op::kShiftDownRows, {x_id}, std::move(out));
  }

  Id reverse_rows(Id x_id) {
    const Tensor& x = value(x_id);
    if (x.rank() != 3) throw ConfigError("reverse_rows: expected rank 3");
    const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
    Tensor out(x.shape());
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) out(ch, i, j) = x(ch, h - 1 - i, j);
    return push(Op::kReverseRows, {x_id}, std::move(out));
  }

  // Fused mixture-of-logistic-CDF coupling over a grid.
  // Inputs: x,a,b [1,h,w]; pi logits, mu, s [M,h,w]. Output [2,h,w] holding
  // z in channel 0 and the per-element log|dz/dx| in channel 1. Same math and
  // clamp policy as the scalar coupling_forward.
  Id coupling(Id x_id, Id a_id, Id b_id, Id pl_id, Id mu_id, Id s_id) {
    const Tensor& x = value(x_id);
    const Tensor& pl = value(pl_id);
    if (x.rank() != 3 || x.extent(0) != 1) throw ConfigError("coupling: x must be [1,h,w]");
    const int m = pl.extent(0), h = x.extent(1), w = x.extent(2);
    auto want = [&](Id id, int ch) {
      const Tensor& t = value(id);
      if (t.rank() != 3 || t.extent(0) != ch || t.extent(1) != h || t.extent(2) != w)
        throw ConfigError("coupling: parameter grid shape mismatch");
    };
    want(a_id, 1);
    want(b_id, 1);
    want(mu_id, m);
    want(s_id, m);
    const Tensor& a = value(a_id);
    const Tensor& b = value(b_id);
    const Tensor& mu = value(mu_id);
    const Tensor& s = value(s_id);

    Tensor out({2, h, w});
    const int hw = h * w;
    CouplingScratch sc(m);
    for (int e = 0; e < hw; ++e) {
      coupling_point(x[static_cast<size_t>(e)], a[static_cast<size_t>(e)],
                     b[static_cast<size_t>(e)], pl.data(), mu.data(), s.data(), e, hw, m, sc);
      out[static_cast<size_t>(e)] = sc.z;
      out[static_cast<size_t>(hw + e)] = sc.logdet;
    }
    return push(Op::kCoupling, {x_id, a_id, b_id, pl_id, mu_id, s_id}, std::move(out));
  }

  Id sum(Id x_id) {
    const Tensor& x = value(x_id);
    double acc = 0.0;
    for (size_t i = 0; i < x.numel(); ++i) acc += x[i];
    return push(Op::kSum, {x_id}, Tensor::scalar(acc));
  }

  // Same data, new shape (no element movement).
  Id reshape(Id x_id, std::vector<int> shape) {
    const Tensor& x = value(x_id);
    if (Tensor::numel_of(shape) != x.numel()) throw ConfigError("reshape: element count mismatch");
    Tensor out(std::move(shape), std::vector<double>(x.data(), x.data() + x.numel()));
    return push(Op::kReshape, {x_id}, std::move(out));
  }

  // Keep the first n columns of the last axis: [C,h,W] -> [C,h,n].
  Id crop_w(Id x_id, int n) {
    const Tensor& x = value(x_id);
    if (x.rank() != 3 || n <= 0 || n > x.extent(2)) throw ConfigError("crop_w: bad width");
    const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
    Tensor out({c, h, n});
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < n; ++j) out(ch, i, j) = x(ch, i, j);
    (void)w;
    return push(Op::kCropW, {x_id}, std::move(out));
  }

  // Interleaved squeeze of a per-sample signal: [C,1,n] -> [C,H,n/H] with
  // out(c,i,j) = x(c,0,j*H+i).
  Id squeeze_rows(Id x_id, int H) {
    const Tensor& x = value(x_id);
    if (x.rank() != 3 || x.extent(1) != 1) throw ConfigError("squeeze_rows: expected [C,1,n]");
    const int n = x.extent(2);
    if (H <= 0 || n % H != 0) throw InputError("squeeze_rows: length not divisible by H");
    const int c = x.extent(0), w = n / H;
    Tensor out({c, H, w});
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < w; ++j) out(ch, i, j) = x(ch, 0, j * H + i);
    Id id = push(Op::kSqueezeRows, {x_id}, std::move(out));
    nodes_[id].i0 = H;
    return id;
  }

  // ---- reverse pass ------------------------------------------------------

  // Accumulates d(loss)/d(node) for every node that influenced `loss_id`.
  // The loss must be a finite scalar.
  void backward(Id loss_id) {
    const Node& loss = nodes_[check(loss_id)];
    if (loss.val.numel() != 1) throw ConfigError("backward: loss is not a scalar");
    if (!std::isfinite(loss.val[0])) throw NumericError("backward", "loss is not finite");

    for (Node& n : nodes_) n.grad = Tensor();
    nodes_[loss_id].grad = Tensor::scalar(1.0);

    for (int id = loss_id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.numel() == 0 || n.op == Op::kLeaf) continue;
      if (!n.grad.all_finite())
        throw NumericError(op_name(n.op), "non-finite gradient in backward");
      dispatch_backward(n);
    }

    // Leaves that never received anything report exact zeros.
    for (Node& n : nodes_)
      if (n.op == Op::kLeaf && n.requires_grad && n.grad.numel() == 0)
        n.grad = Tensor(n.val.shape());
  }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<Id> in;
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0;
    double d0 = 0.0;
  };

  // deque: references returned by value()/grad() stay valid as ops are added
  std::deque<Node> nodes_;

  Id check(Id id) const {
    if (id < 0 || id >= static_cast<Id>(nodes_.size())) throw ConfigError("tape: bad node id");
    return id;
  }

  Id push_leaf(Tensor v, bool requires_grad) {
    if (!v.all_finite()) throw NumericError("leaf", "non-finite value");
    Node n;
    n.op = Op::kLeaf;
    n.val = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  Id push(Op op, std::vector<Id> in, Tensor val) {
    if (!val.all_finite()) throw NumericError(op_name(op), "non-finite output");
    Node n;
    n.op = op;
    n.requires_grad = false;
    for (Id i : in) n.requires_grad = n.requires_grad || nodes_[check(i)].requires_grad;
    n.in = std::move(in);
    n.val = std::move(val);
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  Tensor& grad_buffer(Id id) {
    Node& n = nodes_[id];
    if (n.grad.numel() == 0) n.grad = Tensor(n.val.shape());
    return n.grad;
  }

  bool wants_grad(Id id) const { return nodes_[id].requires_grad; }

  // im2col with causal height padding; column-major over output positions.
  Tensor im2col(const Tensor& x, int kh, int kw, Conv2dSpec spec) const {
    const int c_in = x.extent(0), h = x.extent(1), w = x.extent(2);
    const int half_w = (kw - 1) / 2;
    const int shift = spec.pad == HeightPad::kCausalStrict ? kh : kh - 1;
    Tensor cols({c_in * kh * kw, h * w});
    for (int ci = 0; ci < c_in; ++ci)
      for (int r = 0; r < kh; ++r)
        for (int c = 0; c < kw; ++c) {
          double* dst = cols.data() +
                        static_cast<size_t>((ci * kh + r) * kw + c) * (h * w);
          const int dj = spec.dilation_w * (c - half_w);
          for (int i = 0; i < h; ++i) {
            const int si = i - shift + r;
            if (si < 0 || si >= h) {
              std::fill(dst + static_cast<size_t>(i) * w, dst + static_cast<size_t>(i + 1) * w, 0.0);
              continue;
            }
            const double* src = x.data() + (static_cast<size_t>(ci) * h + si) * w;
            for (int j = 0; j < w; ++j) {
              const int sj = j + dj;
              dst[static_cast<size_t>(i) * w + j] = (sj >= 0 && sj < w) ? src[sj] : 0.0;
            }
          }
        }
    return cols;
  }

  struct CouplingScratch {
    explicit CouplingScratch(int m)
        : lw(m), u(m), ta(m), tb(m), tc(m), sm(m) {}
    std::vector<double> lw, u, ta, tb, tc, sm;
    double z = 0, logdet = 0;
    double log_tau = 0, log_1m_tau = 0, log_pdf = 0, l_val = 0, ea = 0;
    bool clamped = false;
  };

  static double lse(const std::vector<double>& t, int m) {
    double best = t[0];
    for (int i = 1; i < m; ++i) best = std::max(best, t[static_cast<size_t>(i)]);
    double acc = 0.0;
    for (int i = 0; i < m; ++i) acc += std::exp(t[static_cast<size_t>(i)] - best);
    return best + std::log(acc);
  }

  // Per-element coupling forward. pl/mu/s are [M,h,w] planes indexed at
  // element e with plane stride hw.
  static void coupling_point(double x, double a, double b, const double* pl, const double* mu,
                             const double* s, int e, int hw, int m, CouplingScratch& sc) {
    double plmax = pl[static_cast<size_t>(e)];
    for (int i = 1; i < m; ++i)
      plmax = std::max(plmax, pl[static_cast<size_t>(i) * hw + e]);
    double zsum = 0.0;
    for (int i = 0; i < m; ++i) zsum += std::exp(pl[static_cast<size_t>(i) * hw + e] - plmax);
    const double log_z = plmax + std::log(zsum);
    for (int i = 0; i < m; ++i) {
      const double pli = pl[static_cast<size_t>(i) * hw + e];
      const double si = s[static_cast<size_t>(i) * hw + e];
      const double ui = (x - mu[static_cast<size_t>(i) * hw + e]) * std::exp(-si);
      sc.lw[static_cast<size_t>(i)] = pli - log_z;
      sc.sm[static_cast<size_t>(i)] = std::exp(pli - log_z);
      sc.u[static_cast<size_t>(i)] = ui;
      sc.ta[static_cast<size_t>(i)] = sc.lw[static_cast<size_t>(i)] - softplus(-ui);
      sc.tb[static_cast<size_t>(i)] = sc.lw[static_cast<size_t>(i)] - softplus(ui);
      sc.tc[static_cast<size_t>(i)] = sc.lw[static_cast<size_t>(i)] - si + ui - 2.0 * softplus(ui);
    }
    sc.log_tau = lse(sc.ta, m);
    sc.log_1m_tau = lse(sc.tb, m);
    sc.log_pdf = lse(sc.tc, m);
    const double log_eps = std::log(kCdfEps);
    sc.clamped = sc.log_tau < log_eps || sc.log_1m_tau < log_eps;
    if (sc.clamped) {
      if (!detail::cdf_clamp_logged().exchange(true))
        std::fprintf(stderr, "flowvocoder: coupling CDF clamped to [%g, 1-%g]\n", kCdfEps, kCdfEps);
      if (sc.log_tau < log_eps) {
        sc.log_tau = log_eps;
        sc.log_1m_tau = std::log1p(-kCdfEps);
      } else {
        sc.log_1m_tau = log_eps;
        sc.log_tau = std::log1p(-kCdfEps);
      }
    }
    sc.ea = std::exp(a);
    sc.l_val = sc.log_tau - sc.log_1m_tau;
    sc.z = sc.l_val * sc.ea + b;
    sc.logdet = a + sc.log_pdf - sc.log_tau - sc.log_1m_tau;
  }

  void dispatch_backward(Node& n) {
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        for (int k = 0; k < 2; ++k)
          if (wants_grad(n.in[static_cast<size_t>(k)])) {
            Tensor& gi = grad_buffer(n.in[static_cast<size_t>(k)]);
            for (size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
          }
        break;
      }
      case Op::kMul: {
        const Tensor& xa = nodes_[n.in[0]].val;
        const Tensor& xb = nodes_[n.in[1]].val;
        if (wants_grad(n.in[0])) {
          Tensor& gi = grad_buffer(n.in[0]);
          for (size_t i = 0; i < g.numel(); ++i) gi[i] += g[i] * xb[i];
        }
        if (wants_grad(n.in[1])) {
          Tensor& gi = grad_buffer(n.in[1]);
          for (size_t i = 0; i < g.numel(); ++i) gi[i] += g[i] * xa[i];
        }
        break;
      }
      case Op::kScale: {
        if (wants_grad(n.in[0])) {
          Tensor& gi = grad_buffer(n.in[0]);
          for (size_t i = 0; i < g.numel(); ++i) gi[i] += n.d0 * g[i];
        }
        break;
      }
      case Op::kAddConst: {
        if (wants_grad(n.in[0])) {
          Tensor& gi = grad_buffer(n.in[0]);
          for (size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
        }
        break;
      }
      case Op::kConv2d:
        conv2d_backward(n);
        break;
      case Op::kConvT2dPlane:
        convt2d_backward(n);
        break;
      case Op::kMatVec: {
        const Tensor& w = nodes_[n.in[0]].val;
        const Tensor& v = nodes_[n.in[1]].val;
        const int m = w.extent(0), nn = w.extent(1);
        if (wants_grad(n.in[0])) {
          Tensor& gw = grad_buffer(n.in[0]);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < nn; ++j)
              gw(i, j) += g[static_cast<size_t>(i)] * v[static_cast<size_t>(j)];
        }
        if (wants_grad(n.in[1])) {
          Tensor& gv = grad_buffer(n.in[1]);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < nn; ++j)
              gv[static_cast<size_t>(j)] += g[static_cast<size_t>(i)] * w(i, j);
        }
        break;
      }
      case Op::kChannelBias: {
        const Tensor& x = nodes_[n.in[0]].val;
        const int hw = x.extent(1) * x.extent(2);
        if (wants_grad(n.in[0])) {
          Tensor& gi = grad_buffer(n.in[0]);
          for (size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
        }
        if (wants_grad(n.in[1])) {
          Tensor& gv = grad_buffer(n.in[1]);
          for (int c = 0; c < x.extent(0); ++c) {
            double acc = 0.0;
            const double* gc = g.data() + static_cast<size_t>(c) * hw;
            for (int i = 0; i < hw; ++i) acc += gc[i];
            gv[static_cast<size_t>(c)] += acc;
          }
        }
        break;
      }
      case Op::kGated: {
        if (!wants_grad(n.in[0])) break;
        const Tensor& x = nodes_[n.in[0]].val;
        Tensor& gi = grad_buffer(n.in[0]);
        const int c = x.extent(0) / 2, hw = x.extent(1) * x.extent(2);
        for (int ch = 0; ch < c; ++ch) {
          const double* t = x.data() + static_cast<size_t>(ch) * hw;
          const double* gg = x.data() + static_cast<size_t>(ch + c) * hw;
          const double* go = g.data() + static_cast<size_t>(ch) * hw;
          double* gt = gi.data() + static_cast<size_t>(ch) * hw;
          double* gs = gi.data() + static_cast<size_t>(ch + c) * hw;
          for (int i = 0; i < hw; ++i) {
            const double th = std::tanh(t[i]);
            const double sg = sigmoid(gg[i]);
            gt[i] += go[i] * (1.0 - th * th) * sg;
            gs[i] += go[i] * th * sg * (1.0 - sg);
          }
        }
        break;
      }
      case Op::kSliceCh: {
        if (!wants_grad(n.in[0])) break;
        Tensor& gi = grad_buffer(n.in[0]);
        const int hw = gi.extent(1) * gi.extent(2);
        double* dst = gi.data() + static_cast<size_t>(n.i0) * hw;
        for (size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
        break;
      }
      case Op::kSoftClamp: {
        if (!wants_grad(n.in[0])) break;
        const Tensor& x = nodes_[n.in[0]].val;
        Tensor& gi = grad_buffer(n.in[0]);
        for (size_t i = 0; i < g.numel(); ++i) {
          const double th = std::tanh(x[i] / n.d0);
          gi[i] += g[i] * (1.0 - th * th);
        }
        break;
      }
      case Op::kLeakyRelu: {
        if (!wants_grad(n.in[0])) break;
        const Tensor& x = nodes_[n.in[0]].val;
        Tensor& gi = grad_buffer(n.in[0]);
        for (size_t i = 0; i < g.numel(); ++i) gi[i] += g[i] * (x[i] > 0.0 ? 1.0 : n.d0);
        break;
      }
      case Op::kShiftDownRows: {
        if (!wants_grad(n.in[0])) break;
        Tensor& gi = grad_buffer(n.in[0]);
        const int c = gi.extent(0), h = gi.extent(1), w = gi.extent(2);
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i + 1 < h; ++i)
            for (int j = 0; j < w; ++j) gi(ch, i, j) += g(ch, i + 1, j);
        break;
      }
      case Op::kReverseRows: {
        if (!wants_grad(n.in[0])) break;
        Tensor& gi = grad_buffer(n.in[0]);
        const int c = gi.extent(0), h = gi.extent(1), w = gi.extent(2);
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) gi(ch, i, j) += g(ch, h - 1 - i, j);
        break;
      }
      case Op::kCoupling:
        coupling_backward(n);
        break;
      case Op::kSum: {
        if (!wants_grad(n.in[0])) break;
        Tensor& gi = grad_buffer(n.in[0]);
        const double gv = g[0];
        for (size_t i = 0; i < gi.numel(); ++i) gi[i] += gv;
        break;
      }
      case Op::kReshape: {
        if (!wants_grad(n.in[0])) break;
        Tensor& gi = grad_buffer(n.in[0]);
        for (size_t i = 0; i < g.numel(); ++i) gi[i] += g[i];
        break;
      }
      case Op::kCropW: {
        if (!wants_grad(n.in[0])) break;
        Tensor& gi = grad_buffer(n.in[0]);
        const int c = g.extent(0), h = g.extent(1), nn = g.extent(2);
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < nn; ++j) gi(ch, i, j) += g(ch, i, j);
        break;
      }
      case Op::kSqueezeRows: {
        if (!wants_grad(n.in[0])) break;
        Tensor& gi = grad_buffer(n.in[0]);
        const int c = g.extent(0), hh = g.extent(1), w = g.extent(2);
        for (int ch = 0; ch < c; ++ch)
          for (int i = 0; i < hh; ++i)
            for (int j = 0; j < w; ++j) gi(ch, 0, j * hh + i) += g(ch, i, j);
        break;
      }
    }
  }

  void conv2d_backward(Node& n) {
    const Tensor& x = nodes_[n.in[0]].val;
    const Tensor& w = nodes_[n.in[1]].val;
    const Tensor& g = n.grad;
    const int c_out = w.extent(0), c_in = w.extent(1), kh = w.extent(2), kw = w.extent(3);
    const int h = x.extent(1), ww = x.extent(2), hw = h * ww;
    const int k = c_in * kh * kw;
    Conv2dSpec spec{n.i0, n.i1 ? HeightPad::kCausalStrict : HeightPad::kCausalNonStrict};

    if (wants_grad(n.in[1])) {
      Tensor cols = im2col(x, kh, kw, spec);
      Tensor& gw = grad_buffer(n.in[1]);
      CMapRowMat gm(g.data(), c_out, hw);
      CMapRowMat xm(cols.data(), k, hw);
      MapRowMat gwm(gw.data(), c_out, k);
      gwm.noalias() += gm * xm.transpose();
    }
    if (wants_grad(n.in[0])) {
      Tensor gcols({k, hw});
      {
        CMapRowMat wm(w.data(), c_out, k);
        CMapRowMat gm(g.data(), c_out, hw);
        MapRowMat gc(gcols.data(), k, hw);
        gc.noalias() = wm.transpose() * gm;
      }
      // col2im scatter-add, mirroring im2col's index map.
      Tensor& gx = grad_buffer(n.in[0]);
      const int half_w = (kw - 1) / 2;
      const int shift = spec.pad == HeightPad::kCausalStrict ? kh : kh - 1;
      for (int ci = 0; ci < c_in; ++ci)
        for (int r = 0; r < kh; ++r)
          for (int c = 0; c < kw; ++c) {
            const double* src = gcols.data() + static_cast<size_t>((ci * kh + r) * kw + c) * hw;
            const int dj = spec.dilation_w * (c - half_w);
            for (int i = 0; i < h; ++i) {
              const int si = i - shift + r;
              if (si < 0 || si >= h) continue;
              double* dst = gx.data() + (static_cast<size_t>(ci) * h + si) * ww;
              for (int j = 0; j < ww; ++j) {
                const int sj = j + dj;
                if (sj >= 0 && sj < ww) dst[sj] += src[static_cast<size_t>(i) * ww + j];
              }
            }
          }
    }
    if (n.in.size() == 3 && wants_grad(n.in[2])) {
      Tensor& gb = grad_buffer(n.in[2]);
      for (int c = 0; c < c_out; ++c) {
        double acc = 0.0;
        const double* gc = g.data() + static_cast<size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) acc += gc[i];
        gb[static_cast<size_t>(c)] += acc;
      }
    }
  }

  void convt2d_backward(Node& n) {
    const Tensor& x = nodes_[n.in[0]].val;
    const Tensor& w = nodes_[n.in[1]].val;
    const Tensor& g = n.grad;
    const int h = x.extent(1), wd = x.extent(2);
    const int kh = w.extent(0), kw = w.extent(1);
    const int ho = g.extent(1), wo = g.extent(2);
    const int sh = n.i0, sw = n.i1, ph = n.i2, pw = n.i3;
    const bool gx_wanted = wants_grad(n.in[0]);
    const bool gw_wanted = wants_grad(n.in[1]);
    Tensor* gx = gx_wanted ? &grad_buffer(n.in[0]) : nullptr;
    Tensor* gw = gw_wanted ? &grad_buffer(n.in[1]) : nullptr;
    if (gx_wanted || gw_wanted) {
      for (int ih = 0; ih < h; ++ih)
        for (int iw = 0; iw < wd; ++iw) {
          double acc = 0.0;
          const double xv = x(0, ih, iw);
          for (int r = 0; r < kh; ++r) {
            const int oh = ih * sh - ph + r;
            if (oh < 0 || oh >= ho) continue;
            for (int c = 0; c < kw; ++c) {
              const int ow = iw * sw - pw + c;
              if (ow < 0 || ow >= wo) continue;
              const double gv = g(0, oh, ow);
              acc += gv * w(r, c);
              if (gw_wanted) (*gw)(r, c) += gv * xv;
            }
          }
          if (gx_wanted) (*gx)(0, ih, iw) += acc;
        }
    }
    if (n.in.size() == 3 && wants_grad(n.in[2])) {
      Tensor& gb = grad_buffer(n.in[2]);
      double acc = 0.0;
      for (size_t i = 0; i < g.numel(); ++i) acc += g[i];
      gb[0] += acc;
    }
  }

  void coupling_backward(Node& n) {
    const Tensor& x = nodes_[n.in[0]].val;
    const Tensor& a = nodes_[n.in[1]].val;
    const Tensor& b = nodes_[n.in[2]].val;
    const Tensor& pl = nodes_[n.in[3]].val;
    const Tensor& mu = nodes_[n.in[4]].val;
    const Tensor& s = nodes_[n.in[5]].val;
    const Tensor& g = n.grad;
    const int m = pl.extent(0), h = x.extent(1), w = x.extent(2), hw = h * w;

    const bool want_x = wants_grad(n.in[0]);
    const bool want_a = wants_grad(n.in[1]);
    const bool want_b = wants_grad(n.in[2]);
    const bool want_pl = wants_grad(n.in[3]);
    const bool want_mu = wants_grad(n.in[4]);
    const bool want_s = wants_grad(n.in[5]);
    Tensor* gx = want_x ? &grad_buffer(n.in[0]) : nullptr;
    Tensor* ga = want_a ? &grad_buffer(n.in[1]) : nullptr;
    Tensor* gb = want_b ? &grad_buffer(n.in[2]) : nullptr;
    Tensor* gpl = want_pl ? &grad_buffer(n.in[3]) : nullptr;
    Tensor* gmu = want_mu ? &grad_buffer(n.in[4]) : nullptr;
    Tensor* gs = want_s ? &grad_buffer(n.in[5]) : nullptr;

    CouplingScratch sc(m);
    std::vector<double> glw(static_cast<size_t>(m));
    for (int e = 0; e < hw; ++e) {
      coupling_point(x[static_cast<size_t>(e)], a[static_cast<size_t>(e)],
                     b[static_cast<size_t>(e)], pl.data(), mu.data(), s.data(), e, hw, m, sc);
      const double gz = g[static_cast<size_t>(e)];
      const double gld = g[static_cast<size_t>(hw + e)];
      if (ga) (*ga)[static_cast<size_t>(e)] += gz * sc.l_val * sc.ea + gld;
      if (gb) (*gb)[static_cast<size_t>(e)] += gz;
      // When the CDF was clamped, log tau and log(1-tau) are constants; only
      // the PDF path carries gradient into the mixture parameters.
      const double g_log_tau = sc.clamped ? 0.0 : gz * sc.ea - gld;
      const double g_log_1m = sc.clamped ? 0.0 : -gz * sc.ea - gld;
      const double g_log_pdf = gld;
      double glw_sum = 0.0;
      double gx_acc = 0.0;
      for (int i = 0; i < m; ++i) {
        const size_t ie = static_cast<size_t>(i) * hw + e;
        const double ui = sc.u[static_cast<size_t>(i)];
        const double sig_u = sigmoid(ui);
        const double p_tau = sc.clamped ? 0.0 : std::exp(sc.ta[static_cast<size_t>(i)] - sc.log_tau);
        const double p_1m = sc.clamped ? 0.0 : std::exp(sc.tb[static_cast<size_t>(i)] - sc.log_1m_tau);
        const double p_pdf = std::exp(sc.tc[static_cast<size_t>(i)] - sc.log_pdf);
        const double g_ta = g_log_tau * p_tau;
        const double g_tb = g_log_1m * p_1m;
        const double g_tc = g_log_pdf * p_pdf;
        const double g_lw = g_ta + g_tb + g_tc;
        glw[static_cast<size_t>(i)] = g_lw;
        glw_sum += g_lw;
        const double g_u = g_ta * (1.0 - sig_u) - g_tb * sig_u + g_tc * (1.0 - 2.0 * sig_u);
        const double e_ms = std::exp(-s[ie]);
        if (gmu) (*gmu)[ie] += -g_u * e_ms;
        if (gs) (*gs)[ie] += -g_tc - g_u * ui;
        gx_acc += g_u * e_ms;
      }
      if (gx) (*gx)[static_cast<size_t>(e)] += gx_acc;
      if (gpl)
        for (int i = 0; i < m; ++i) {
          const size_t ie = static_cast<size_t>(i) * hw + e;
          (*gpl)[ie] += glw[static_cast<size_t>(i)] - sc.sm[static_cast<size_t>(i)] * glw_sum;
        }
    }
  }
};

}  // namespace ad
}  // namespace flowvocoder
