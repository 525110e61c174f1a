#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "pfedhr/errors.hpp"
#include "pfedhr/rng.hpp"
#include "pfedhr/tensor.hpp"

namespace pfedhr {

enum class OpType : std::uint8_t { Conv = 0, Fc = 1 };

inline const char* op_name(OpType op) { return op == OpType::Conv ? "CONV" : "FC"; }

enum class BlockKind : std::uint8_t {
  ConvUnit = 0,      // 3x3 conv (SAME) + 2x2 max-pool + batch-norm + ReLU
  FcUnit = 1,        // affine + ReLU + dropout
  Classifier = 2,    // plain affine head producing logits
  DenseStitch = 3,   // ReLU(W^T x + b), possibly stacked
  ChannelStitch = 4  // adaptive average pool + optional 1x1 projection + ReLU
};

enum class ProvenanceKind : std::uint8_t { Client = 0, Stitch = 1, Averaged = 2 };

struct Provenance {
  int client_id = -1;
  int layer_index = -1;
  ProvenanceKind kind = ProvenanceKind::Client;
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.9;  // running = m*running + (1-m)*batch
inline constexpr double kDefaultDropout = 0.2;

// One network block. Parameters are a named map so averaging, SGD, checkpoints
// and parameter counting can iterate uniformly; each kind reads fixed keys.
//   ConvUnit:      weight (co,ci,3,3), bias (co), bn_gamma/bn_beta/bn_mean/bn_var (co)
//   FcUnit:        weight (di,do), bias (do)
//   Classifier:    weight (di,do), bias (do)
//   DenseStitch:   weight/bias, then weight2/bias2, ... for extra depth
//   ChannelStitch: weight (co,ci), bias (co) when a projection is present
template <typename S = float>
struct LayerUnit {
  BlockKind kind = BlockKind::FcUnit;
  Provenance origin;
  std::vector<int> in_spec;   // per-sample dims entering the block
  std::vector<int> out_spec;  // per-sample dims leaving it
  std::map<std::string, Tensor<S>> params;
  std::map<std::string, Tensor<S>> grads;
  std::map<std::string, Tensor<S>> velocity;
  S dropout_p = S(0);

  OpType op() const { return kind == BlockKind::ConvUnit ? OpType::Conv : OpType::Fc; }

  Tensor<S>& param(const std::string& name) { return params.at(name); }
  const Tensor<S>& param(const std::string& name) const { return params.at(name); }

  Tensor<S>& grad(const std::string& name) {
    auto it = grads.find(name);
    if (it == grads.end()) it = grads.emplace(name, Tensor<S>(params.at(name).shape)).first;
    return it->second;
  }
};

// bn_mean / bn_var are running statistics, not learned weights.
inline bool is_trainable_param(const std::string& name) { return name != "bn_mean" && name != "bn_var"; }

template <typename S>
long long parameter_count(const LayerUnit<S>& unit) {
  long long n = 0;
  for (const auto& [name, t] : unit.params)
    if (is_trainable_param(name)) n += t.numel();
  return n;
}

// Values a train-mode forward must retain for the matching backward pass.
template <typename S>
struct BlockCache {
  std::vector<int> input_shape;       // shape as received, before any flatten
  Tensor<S> input;                    // block input (flattened for dense kinds)
  Tensor<S> conv_out;                 // conv output, pre-pool
  std::vector<int> pool_argmax;       // winning conv_out flat index per pooled value
  Tensor<S> pooled;                   // pool output / adaptive-pool output
  std::vector<S> bn_mean, bn_inv_std; // batch statistics used in this pass
  Tensor<S> bn_norm;                  // normalized activations (x_hat)
  std::vector<Tensor<S>> pre_relu;    // pre-activation per affine sub-layer
  std::vector<Tensor<S>> sub_inputs;  // inputs per stitch sub-layer
  std::vector<std::uint8_t> dropout_mask;
};

template <typename S>
using Tape = std::vector<BlockCache<S>>;

namespace detail {

template <typename S>
void check_input_spec(const LayerUnit<S>& unit, const Tensor<S>& x) {
  const std::vector<int> dims = sample_dims(x.shape);
  bool ok = true;
  switch (unit.kind) {
    case BlockKind::ConvUnit:
    case BlockKind::ChannelStitch:
      ok = dims == unit.in_spec;
      break;
    default: {
      // Dense kinds accept anything that flattens to the declared width.
      ok = numel_of(dims) == numel_of(unit.in_spec);
      break;
    }
  }
  if (!ok)
    throw ShapeMismatch("block expects input " + shape_string(unit.in_spec) + ", got " +
                        shape_string(dims));
}

// y = x*W + b with x (n,di), W (di,do).
template <typename S>
Tensor<S> affine_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  const int n = x.dim(0), di = x.dim(1), dout = w.dim(1);
  Tensor<S> y({n, dout});
  for (int i = 0; i < n; ++i) {
    const S* xi = x.data.data() + static_cast<std::size_t>(i) * di;
    S* yi = y.data.data() + static_cast<std::size_t>(i) * dout;
    for (int o = 0; o < dout; ++o) yi[o] = b.data[static_cast<std::size_t>(o)];
    for (int k = 0; k < di; ++k) {
      const S xv = xi[k];
      if (xv == S(0)) continue;
      const S* wr = w.data.data() + static_cast<std::size_t>(k) * dout;
      for (int o = 0; o < dout; ++o) yi[o] += xv * wr[o];
    }
  }
  return y;
}

// Accumulates dW/db and returns dx.
template <typename S>
Tensor<S> affine_backward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& gy, Tensor<S>& dw,
                          Tensor<S>& db, bool want_dx = true) {
  const int n = x.dim(0), di = x.dim(1), dout = w.dim(1);
  for (int i = 0; i < n; ++i) {
    const S* xi = x.data.data() + static_cast<std::size_t>(i) * di;
    const S* gi = gy.data.data() + static_cast<std::size_t>(i) * dout;
    for (int o = 0; o < dout; ++o) db.data[static_cast<std::size_t>(o)] += gi[o];
    for (int k = 0; k < di; ++k) {
      const S xv = xi[k];
      if (xv == S(0)) continue;
      S* dwr = dw.data.data() + static_cast<std::size_t>(k) * dout;
      for (int o = 0; o < dout; ++o) dwr[o] += xv * gi[o];
    }
  }
  Tensor<S> dx;
  if (want_dx) {
    dx = Tensor<S>({n, di});
    for (int i = 0; i < n; ++i) {
      const S* gi = gy.data.data() + static_cast<std::size_t>(i) * dout;
      S* dxi = dx.data.data() + static_cast<std::size_t>(i) * di;
      for (int k = 0; k < di; ++k) {
        const S* wr = w.data.data() + static_cast<std::size_t>(k) * dout;
        S acc = S(0);
        for (int o = 0; o < dout; ++o) acc += wr[o] * gi[o];
        dxi[k] = acc;
      }
    }
  }
  return dx;
}

// 3x3 convolution, stride 1, SAME padding.
template <typename S>
Tensor<S> conv3x3_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0);
  Tensor<S> y({n, co, h, wd});
  for (int in = 0; in < n; ++in)
    for (int o = 0; o < co; ++o)
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < wd; ++c) {
          S acc = b.data[static_cast<std::size_t>(o)];
          for (int i = 0; i < ci; ++i)
            for (int kr = 0; kr < 3; ++kr) {
              const int rr = r + kr - 1;
              if (rr < 0 || rr >= h) continue;
              for (int kc = 0; kc < 3; ++kc) {
                const int cc = c + kc - 1;
                if (cc < 0 || cc >= wd) continue;
                acc += x.at(in, i, rr, cc) * w.data[((static_cast<std::size_t>(o) * ci + i) * 3 + kr) * 3 + kc];
              }
            }
          y.at(in, o, r, c) = acc;
        }
  return y;
}

template <typename S>
Tensor<S> conv3x3_backward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& gy, Tensor<S>& dw,
                           Tensor<S>& db) {
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0);
  Tensor<S> dx(x.shape);
  for (int in = 0; in < n; ++in)
    for (int o = 0; o < co; ++o)
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < wd; ++c) {
          const S g = gy.at(in, o, r, c);
          if (g == S(0)) continue;
          db.data[static_cast<std::size_t>(o)] += g;
          for (int i = 0; i < ci; ++i)
            for (int kr = 0; kr < 3; ++kr) {
              const int rr = r + kr - 1;
              if (rr < 0 || rr >= h) continue;
              for (int kc = 0; kc < 3; ++kc) {
                const int cc = c + kc - 1;
                if (cc < 0 || cc >= wd) continue;
                const std::size_t wi = ((static_cast<std::size_t>(o) * ci + i) * 3 + kr) * 3 + kc;
                dw.data[wi] += g * x.at(in, i, rr, cc);
                dx.at(in, i, rr, cc) += g * w.data[wi];
              }
            }
        }
  return dx;
}

template <typename S>
Tensor<S> maxpool2x2_forward(const Tensor<S>& x, std::vector<int>* argmax) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int h2 = h / 2, w2 = w / 2;
  Tensor<S> y({n, c, h2, w2});
  if (argmax) argmax->assign(static_cast<std::size_t>(y.numel()), 0);
  std::size_t oi = 0;
  for (int in = 0; in < n; ++in)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < h2; ++r)
        for (int cc = 0; cc < w2; ++cc, ++oi) {
          S best = x.at(in, ch, 2 * r, 2 * cc);
          int best_r = 2 * r, best_c = 2 * cc;
          for (int dr = 0; dr < 2; ++dr)
            for (int dc = 0; dc < 2; ++dc) {
              const S v = x.at(in, ch, 2 * r + dr, 2 * cc + dc);
              if (v > best) {
                best = v;
                best_r = 2 * r + dr;
                best_c = 2 * cc + dc;
              }
            }
          y.data[oi] = best;
          if (argmax)
            (*argmax)[oi] = static_cast<int>(((static_cast<std::size_t>(in) * c + ch) * h + best_r) * w + best_c);
        }
  return y;
}

// Adaptive average pooling to an arbitrary target size; handles both
// down- and up-sizing via overlapping bins, like the usual definition.
inline std::pair<int, int> adaptive_bin(int out_index, int in_size, int out_size) {
  const int start = (out_index * in_size) / out_size;
  const int end = ((out_index + 1) * in_size + out_size - 1) / out_size;
  return {start, std::max(end, start + 1)};
}

template <typename S>
Tensor<S> adaptive_avg_pool_forward(const Tensor<S>& x, int th, int tw) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<S> y({n, c, th, tw});
  for (int in = 0; in < n; ++in)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < th; ++r) {
        const auto [r0, r1] = adaptive_bin(r, h, th);
        for (int cc = 0; cc < tw; ++cc) {
          const auto [c0, c1] = adaptive_bin(cc, w, tw);
          S acc = S(0);
          for (int rr = r0; rr < r1; ++rr)
            for (int xx = c0; xx < c1; ++xx) acc += x.at(in, ch, rr, xx);
          y.at(in, ch, r, cc) = acc / static_cast<S>((r1 - r0) * (c1 - c0));
        }
      }
  return y;
}

template <typename S>
Tensor<S> adaptive_avg_pool_backward(const std::vector<int>& in_shape, const Tensor<S>& gy) {
  Tensor<S> dx(in_shape);
  const int h = in_shape[2], w = in_shape[3];
  const int th = gy.dim(2), tw = gy.dim(3);
  for (int in = 0; in < gy.dim(0); ++in)
    for (int ch = 0; ch < gy.dim(1); ++ch)
      for (int r = 0; r < th; ++r) {
        const auto [r0, r1] = adaptive_bin(r, h, th);
        for (int cc = 0; cc < tw; ++cc) {
          const auto [c0, c1] = adaptive_bin(cc, w, tw);
          const S g = gy.at(in, ch, r, cc) / static_cast<S>((r1 - r0) * (c1 - c0));
          for (int rr = r0; rr < r1; ++rr)
            for (int xx = c0; xx < c1; ++xx) dx.at(in, ch, rr, xx) += g;
        }
      }
  return dx;
}

}  // namespace detail

// Forward through one block. In train mode `cache` must be non-null and is
// filled with everything block_backward needs; dropout draws from `rng`.
template <typename S>
Tensor<S> block_forward(LayerUnit<S>& unit, const Tensor<S>& x, bool train, Rng* rng,
                        std::type_identity_t<BlockCache<S>>* cache) {
  detail::check_input_spec(unit, x);
  if (cache) cache->input_shape = x.shape;

  switch (unit.kind) {
    case BlockKind::ConvUnit: {
      const Tensor<S> conv = detail::conv3x3_forward(x, unit.param("weight"), unit.param("bias"));
      std::vector<int> argmax;
      Tensor<S> pooled = detail::maxpool2x2_forward(conv, cache ? &argmax : nullptr);
      const int c = pooled.dim(1);
      const long long plane = pooled.numel() / (pooled.dim(0) * static_cast<long long>(c));
      const long long nplane = pooled.dim(0) * plane;
      Tensor<S>& gamma = unit.param("bn_gamma");
      Tensor<S>& beta = unit.param("bn_beta");
      Tensor<S>& rmean = unit.param("bn_mean");
      Tensor<S>& rvar = unit.param("bn_var");
      std::vector<S> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
      if (train) {
        for (int ch = 0; ch < c; ++ch) {
          double m = 0.0;
          for (int in = 0; in < pooled.dim(0); ++in)
            for (long long i = 0; i < plane; ++i)
              m += pooled.data[(static_cast<std::size_t>(in) * c + ch) * plane + i];
          m /= static_cast<double>(nplane);
          double v = 0.0;
          for (int in = 0; in < pooled.dim(0); ++in)
            for (long long i = 0; i < plane; ++i) {
              const double d = pooled.data[(static_cast<std::size_t>(in) * c + ch) * plane + i] - m;
              v += d * d;
            }
          v /= static_cast<double>(nplane);
          mean[static_cast<std::size_t>(ch)] = static_cast<S>(m);
          inv_std[static_cast<std::size_t>(ch)] = static_cast<S>(1.0 / std::sqrt(v + kBnEps));
          rmean.data[static_cast<std::size_t>(ch)] =
              static_cast<S>(kBnMomentum * rmean.data[static_cast<std::size_t>(ch)] + (1.0 - kBnMomentum) * m);
          rvar.data[static_cast<std::size_t>(ch)] =
              static_cast<S>(kBnMomentum * rvar.data[static_cast<std::size_t>(ch)] + (1.0 - kBnMomentum) * v);
        }
      } else {
        for (int ch = 0; ch < c; ++ch) {
          mean[static_cast<std::size_t>(ch)] = rmean.data[static_cast<std::size_t>(ch)];
          inv_std[static_cast<std::size_t>(ch)] = static_cast<S>(
              1.0 / std::sqrt(static_cast<double>(rvar.data[static_cast<std::size_t>(ch)]) + kBnEps));
        }
      }
      Tensor<S> norm(pooled.shape);
      Tensor<S> out(pooled.shape);
      for (int in = 0; in < pooled.dim(0); ++in)
        for (int ch = 0; ch < c; ++ch)
          for (long long i = 0; i < plane; ++i) {
            const std::size_t idx = (static_cast<std::size_t>(in) * c + ch) * plane + i;
            const S xh = (pooled.data[idx] - mean[static_cast<std::size_t>(ch)]) * inv_std[static_cast<std::size_t>(ch)];
            norm.data[idx] = xh;
            const S pre = gamma.data[static_cast<std::size_t>(ch)] * xh + beta.data[static_cast<std::size_t>(ch)];
            out.data[idx] = pre > S(0) ? pre : S(0);
          }
      if (cache) {
        cache->input = x;
        cache->conv_out = conv;
        cache->pool_argmax = std::move(argmax);
        cache->pooled = pooled;
        cache->bn_mean = std::move(mean);
        cache->bn_inv_std = std::move(inv_std);
        cache->bn_norm = std::move(norm);
        cache->pre_relu.clear();
        Tensor<S> pre(out.shape);
        for (std::size_t i = 0; i < pre.data.size(); ++i)
          pre.data[i] = gamma.data[static_cast<std::size_t>(
                            (i / plane) % static_cast<std::size_t>(c))] * cache->bn_norm.data[i] +
                        beta.data[static_cast<std::size_t>((i / plane) % static_cast<std::size_t>(c))];
        cache->pre_relu.push_back(std::move(pre));
      }
      return out;
    }

    case BlockKind::FcUnit: {
      Tensor<S> flat = x.rank() == 2 ? x : flatten_batch(x);
      Tensor<S> z = detail::affine_forward(flat, unit.param("weight"), unit.param("bias"));
      Tensor<S> out(z.shape);
      std::vector<std::uint8_t> mask;
      const bool drop = train && unit.dropout_p > S(0);
      if (drop) mask.assign(static_cast<std::size_t>(z.numel()), 1);
      const S keep = S(1) - unit.dropout_p;
      for (std::size_t i = 0; i < z.data.size(); ++i) {
        S a = z.data[i] > S(0) ? z.data[i] : S(0);
        if (drop) {
          if (rng->uniform() < static_cast<double>(unit.dropout_p)) {
            mask[i] = 0;
            a = S(0);
          } else {
            a /= keep;
          }
        }
        out.data[i] = a;
      }
      if (cache) {
        cache->input = std::move(flat);
        cache->pre_relu.assign(1, std::move(z));
        cache->dropout_mask = std::move(mask);
      }
      return out;
    }

    case BlockKind::Classifier: {
      Tensor<S> flat = x.rank() == 2 ? x : flatten_batch(x);
      Tensor<S> z = detail::affine_forward(flat, unit.param("weight"), unit.param("bias"));
      if (cache) cache->input = std::move(flat);
      return z;
    }

    case BlockKind::DenseStitch: {
      Tensor<S> cur = x.rank() == 2 ? x : flatten_batch(x);
      if (cache) {
        cache->sub_inputs.clear();
        cache->pre_relu.clear();
      }
      for (int sub = 0;; ++sub) {
        const std::string suffix = sub == 0 ? "" : std::to_string(sub + 1);
        auto it = unit.params.find("weight" + suffix);
        if (it == unit.params.end()) break;
        Tensor<S> z = detail::affine_forward(cur, it->second, unit.param("bias" + suffix));
        Tensor<S> act(z.shape);
        for (std::size_t i = 0; i < z.data.size(); ++i) act.data[i] = z.data[i] > S(0) ? z.data[i] : S(0);
        if (cache) {
          cache->sub_inputs.push_back(std::move(cur));
          cache->pre_relu.push_back(std::move(z));
        }
        cur = std::move(act);
      }
      return cur;
    }

    case BlockKind::ChannelStitch: {
      const int th = unit.out_spec[1], tw = unit.out_spec[2];
      Tensor<S> pooled = (x.dim(2) == th && x.dim(3) == tw)
                             ? x
                             : detail::adaptive_avg_pool_forward(x, th, tw);
      const bool project = unit.params.count("weight") != 0;
      if (cache) {
        cache->input = x;
        cache->pooled = pooled;
        cache->pre_relu.clear();
      }
      if (!project) return pooled;
      const Tensor<S>& w = unit.param("weight");
      const Tensor<S>& b = unit.param("bias");
      const int n = pooled.dim(0), ci = pooled.dim(1), co = w.dim(0);
      Tensor<S> z({n, co, th, tw});
      for (int in = 0; in < n; ++in)
        for (int o = 0; o < co; ++o)
          for (int r = 0; r < th; ++r)
            for (int c = 0; c < tw; ++c) {
              S acc = b.data[static_cast<std::size_t>(o)];
              for (int i = 0; i < ci; ++i)
                acc += w.data[static_cast<std::size_t>(o) * ci + i] * pooled.at(in, i, r, c);
              z.at(in, o, r, c) = acc;
            }
      Tensor<S> out(z.shape);
      for (std::size_t i = 0; i < z.data.size(); ++i) out.data[i] = z.data[i] > S(0) ? z.data[i] : S(0);
      if (cache) cache->pre_relu.push_back(std::move(z));
      return out;
    }
  }
  throw Error("unreachable block kind");
}

// Backward through one block; accumulates parameter gradients and returns the
// gradient with respect to the block input (in the input's original shape).
template <typename S>
Tensor<S> block_backward(LayerUnit<S>& unit, const Tensor<S>& grad_out, const BlockCache<S>& cache) {
  switch (unit.kind) {
    case BlockKind::ConvUnit: {
      const Tensor<S>& gamma = unit.param("bn_gamma");
      const int c = cache.pooled.dim(1);
      const long long plane = cache.pooled.numel() / (cache.pooled.dim(0) * static_cast<long long>(c));
      const long long m = cache.pooled.dim(0) * plane;

      Tensor<S> g(grad_out.shape);
      const Tensor<S>& pre = cache.pre_relu[0];
      for (std::size_t i = 0; i < g.data.size(); ++i)
        g.data[i] = pre.data[i] > S(0) ? grad_out.data[i] : S(0);

      Tensor<S>& dgamma = unit.grad("bn_gamma");
      Tensor<S>& dbeta = unit.grad("bn_beta");
      Tensor<S> d_pool(cache.pooled.shape);
      for (int ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int in = 0; in < cache.pooled.dim(0); ++in)
          for (long long i = 0; i < plane; ++i) {
            const std::size_t idx = (static_cast<std::size_t>(in) * c + ch) * plane + i;
            sum_g += g.data[idx];
            sum_gx += g.data[idx] * cache.bn_norm.data[idx];
          }
        dgamma.data[static_cast<std::size_t>(ch)] += static_cast<S>(sum_gx);
        dbeta.data[static_cast<std::size_t>(ch)] += static_cast<S>(sum_g);
        const double gam = gamma.data[static_cast<std::size_t>(ch)];
        const double istd = cache.bn_inv_std[static_cast<std::size_t>(ch)];
        for (int in = 0; in < cache.pooled.dim(0); ++in)
          for (long long i = 0; i < plane; ++i) {
            const std::size_t idx = (static_cast<std::size_t>(in) * c + ch) * plane + i;
            const double gh = g.data[idx] * gam;
            d_pool.data[idx] = static_cast<S>(
                istd * (gh - gam * sum_g / static_cast<double>(m) -
                        cache.bn_norm.data[idx] * gam * sum_gx / static_cast<double>(m)));
          }
      }

      Tensor<S> d_conv(cache.conv_out.shape);
      for (std::size_t i = 0; i < cache.pool_argmax.size(); ++i)
        d_conv.data[static_cast<std::size_t>(cache.pool_argmax[i])] += d_pool.data[i];

      return detail::conv3x3_backward(cache.input, unit.param("weight"), d_conv, unit.grad("weight"),
                                      unit.grad("bias"));
    }

    case BlockKind::FcUnit: {
      Tensor<S> g = grad_out;
      if (!cache.dropout_mask.empty()) {
        const S keep = S(1) - unit.dropout_p;
        for (std::size_t i = 0; i < g.data.size(); ++i)
          g.data[i] = cache.dropout_mask[i] ? g.data[i] / keep : S(0);
      }
      const Tensor<S>& z = cache.pre_relu[0];
      for (std::size_t i = 0; i < g.data.size(); ++i)
        if (z.data[i] <= S(0)) g.data[i] = S(0);
      Tensor<S> dx = detail::affine_backward(cache.input, unit.param("weight"), g, unit.grad("weight"),
                                             unit.grad("bias"));
      return dx.reshaped(cache.input_shape);
    }

    case BlockKind::Classifier: {
      Tensor<S> dx = detail::affine_backward(cache.input, unit.param("weight"), grad_out,
                                             unit.grad("weight"), unit.grad("bias"));
      return dx.reshaped(cache.input_shape);
    }

    case BlockKind::DenseStitch: {
      Tensor<S> g = grad_out;
      for (int sub = static_cast<int>(cache.pre_relu.size()) - 1; sub >= 0; --sub) {
        const std::string suffix = sub == 0 ? "" : std::to_string(sub + 1);
        const Tensor<S>& z = cache.pre_relu[static_cast<std::size_t>(sub)];
        for (std::size_t i = 0; i < g.data.size(); ++i)
          if (z.data[i] <= S(0)) g.data[i] = S(0);
        g = detail::affine_backward(cache.sub_inputs[static_cast<std::size_t>(sub)],
                                    unit.param("weight" + suffix), g, unit.grad("weight" + suffix),
                                    unit.grad("bias" + suffix));
      }
      return g.reshaped(cache.input_shape);
    }

    case BlockKind::ChannelStitch: {
      const bool project = unit.params.count("weight") != 0;
      Tensor<S> d_pool;
      if (project) {
        const Tensor<S>& w = unit.param("weight");
        const Tensor<S>& z = cache.pre_relu[0];
        Tensor<S> g = grad_out;
        for (std::size_t i = 0; i < g.data.size(); ++i)
          if (z.data[i] <= S(0)) g.data[i] = S(0);
        const int n = cache.pooled.dim(0), ci = cache.pooled.dim(1), co = w.dim(0);
        const int th = cache.pooled.dim(2), tw = cache.pooled.dim(3);
        Tensor<S>& dw = unit.grad("weight");
        Tensor<S>& db = unit.grad("bias");
        d_pool = Tensor<S>(cache.pooled.shape);
        for (int in = 0; in < n; ++in)
          for (int o = 0; o < co; ++o)
            for (int r = 0; r < th; ++r)
              for (int cc = 0; cc < tw; ++cc) {
                const S gv = g.at(in, o, r, cc);
                if (gv == S(0)) continue;
                db.data[static_cast<std::size_t>(o)] += gv;
                for (int i = 0; i < ci; ++i) {
                  dw.data[static_cast<std::size_t>(o) * ci + i] += gv * cache.pooled.at(in, i, r, cc);
                  d_pool.at(in, i, r, cc) += gv * w.data[static_cast<std::size_t>(o) * ci + i];
                }
              }
      } else {
        d_pool = grad_out;
      }
      if (cache.input.dim(2) == cache.pooled.dim(2) && cache.input.dim(3) == cache.pooled.dim(3))
        return d_pool;
      return detail::adaptive_avg_pool_backward(cache.input.shape, d_pool);
    }
  }
  throw Error("unreachable block kind");
}

}  // namespace pfedhr
