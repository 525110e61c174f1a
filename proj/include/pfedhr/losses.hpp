#pragma once

#include <cmath>
#include <vector>

#include "pfedhr/tensor.hpp"

namespace pfedhr {

enum class LossKind : std::uint8_t { CrossEntropy = 0, KlDivergence = 1, NtXentContrastive = 2 };

template <typename S = float>
struct LossValue {
  S value = S(0);
  Tensor<S> grad;  // d(loss)/d(logits of the first argument)
};

template <typename S = float>
struct PairLossValue {
  S value = S(0);
  Tensor<S> grad_a;
  Tensor<S> grad_b;
};

namespace detail {

// log-softmax of one row, numerically stabilized.
template <typename S>
void log_softmax_row(const S* z, int c, double* out) {
  double mx = z[0];
  for (int i = 1; i < c; ++i) mx = std::max(mx, static_cast<double>(z[i]));
  double sum = 0.0;
  for (int i = 0; i < c; ++i) sum += std::exp(static_cast<double>(z[i]) - mx);
  const double lse = mx + std::log(sum);
  for (int i = 0; i < c; ++i) out[i] = static_cast<double>(z[i]) - lse;
}

}  // namespace detail

// Mean softmax cross-entropy against integer labels.
template <typename S>
LossValue<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(labels.size()))
    throw ShapeMismatch("cross_entropy expects (batch,classes) logits and one label per row");
  const int n = logits.dim(0), c = logits.dim(1);
  LossValue<S> out;
  out.grad = Tensor<S>(logits.shape);
  double total = 0.0;
  std::vector<double> lp(static_cast<std::size_t>(c));
  for (int i = 0; i < n; ++i) {
    detail::log_softmax_row(logits.data.data() + static_cast<std::size_t>(i) * c, c, lp.data());
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw ShapeMismatch("label out of range");
    total -= lp[static_cast<std::size_t>(y)];
    for (int k = 0; k < c; ++k) {
      const double p = std::exp(lp[static_cast<std::size_t>(k)]);
      out.grad.at(i, k) = static_cast<S>((p - (k == y ? 1.0 : 0.0)) / n);
    }
  }
  out.value = static_cast<S>(total / n);
  return out;
}

// Mean KL(softmax(logits) || softmax(reference)), temperature 1. The reference
// logits are treated as constant, so the gradient covers the first argument only.
template <typename S>
LossValue<S> kl_divergence(const Tensor<S>& logits, const Tensor<S>& reference) {
  if (logits.shape != reference.shape || logits.rank() != 2)
    throw ShapeMismatch("kl_divergence expects two equal-shape (batch,classes) tensors");
  const int n = logits.dim(0), c = logits.dim(1);
  LossValue<S> out;
  out.grad = Tensor<S>(logits.shape);
  std::vector<double> lp(static_cast<std::size_t>(c)), lq(static_cast<std::size_t>(c));
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    detail::log_softmax_row(logits.data.data() + static_cast<std::size_t>(i) * c, c, lp.data());
    detail::log_softmax_row(reference.data.data() + static_cast<std::size_t>(i) * c, c, lq.data());
    double kl = 0.0;
    for (int k = 0; k < c; ++k)
      kl += std::exp(lp[static_cast<std::size_t>(k)]) * (lp[static_cast<std::size_t>(k)] - lq[static_cast<std::size_t>(k)]);
    total += kl;
    for (int k = 0; k < c; ++k) {
      const double p = std::exp(lp[static_cast<std::size_t>(k)]);
      out.grad.at(i, k) =
          static_cast<S>(p * ((lp[static_cast<std::size_t>(k)] - lq[static_cast<std::size_t>(k)]) - kl) / n);
    }
  }
  out.value = static_cast<S>(total / n);
  return out;
}

// Distillation form of the KL term: KL(softmax(teacher) || softmax(student)),
// differentiated with respect to the student logits. This is the direction
// used by mutual-learning style distillation; the gradient reduces to
// (softmax(student) - softmax(teacher)) / batch.
template <typename S>
LossValue<S> distillation_kl(const Tensor<S>& student_logits, const Tensor<S>& teacher_logits) {
  if (student_logits.shape != teacher_logits.shape || student_logits.rank() != 2)
    throw ShapeMismatch("distillation_kl expects two equal-shape (batch,classes) tensors");
  const int n = student_logits.dim(0), c = student_logits.dim(1);
  LossValue<S> out;
  out.grad = Tensor<S>(student_logits.shape);
  std::vector<double> lp(static_cast<std::size_t>(c)), lq(static_cast<std::size_t>(c));
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    detail::log_softmax_row(student_logits.data.data() + static_cast<std::size_t>(i) * c, c, lp.data());
    detail::log_softmax_row(teacher_logits.data.data() + static_cast<std::size_t>(i) * c, c, lq.data());
    for (int k = 0; k < c; ++k) {
      const double q = std::exp(lq[static_cast<std::size_t>(k)]);
      total += q * (lq[static_cast<std::size_t>(k)] - lp[static_cast<std::size_t>(k)]);
      out.grad.at(i, k) = static_cast<S>((std::exp(lp[static_cast<std::size_t>(k)]) - q) / n);
    }
  }
  out.value = static_cast<S>(total / n);
  return out;
}

// NT-Xent over two views of the same batch: za[i] and zb[i] are positives,
// every other embedding in the 2n pool is a negative. Cosine similarities,
// loss averaged over all 2n anchors.
template <typename S>
PairLossValue<S> nt_xent(const Tensor<S>& za, const Tensor<S>& zb, double temperature) {
  if (za.shape != zb.shape || za.rank() != 2)
    throw ShapeMismatch("nt_xent expects two equal-shape (batch,dim) view embeddings");
  const int n = za.dim(0), d = za.dim(1);
  const int m = 2 * n;

  // Row-normalized pool [za; zb].
  std::vector<double> z(static_cast<std::size_t>(m) * d);
  std::vector<double> norms(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const Tensor<S>& src = i < n ? za : zb;
    const int r = i < n ? i : i - n;
    double nn = 0.0;
    for (int k = 0; k < d; ++k) {
      const double v = src.at(r, k);
      z[static_cast<std::size_t>(i) * d + k] = v;
      nn += v * v;
    }
    norms[static_cast<std::size_t>(i)] = std::max(std::sqrt(nn), 1e-12);
  }
  auto unit = [&](int i, int k) { return z[static_cast<std::size_t>(i) * d + k] / norms[static_cast<std::size_t>(i)]; };

  std::vector<double> sim(static_cast<std::size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += unit(i, k) * unit(j, k);
      sim[static_cast<std::size_t>(i) * m + j] = s;
      sim[static_cast<std::size_t>(j) * m + i] = s;
    }

  auto positive_of = [&](int i) { return i < n ? i + n : i - n; };

  double total = 0.0;
  std::vector<double> dsim(static_cast<std::size_t>(m) * m, 0.0);  // dL/d sim(i,j), row-attributed
  for (int i = 0; i < m; ++i) {
    double mx = -1e30;
    for (int j = 0; j < m; ++j)
      if (j != i) mx = std::max(mx, sim[static_cast<std::size_t>(i) * m + j]);
    double denom = 0.0;
    for (int j = 0; j < m; ++j)
      if (j != i) denom += std::exp((sim[static_cast<std::size_t>(i) * m + j] - mx) / temperature);
    const int pos = positive_of(i);
    const double lse = mx / temperature + std::log(denom);
    total += lse - sim[static_cast<std::size_t>(i) * m + pos] / temperature;
    for (int j = 0; j < m; ++j) {
      if (j == i) continue;
      const double soft = std::exp((sim[static_cast<std::size_t>(i) * m + j] - mx) / temperature) / denom;
      dsim[static_cast<std::size_t>(i) * m + j] += (soft - (j == pos ? 1.0 : 0.0)) / (temperature * m);
    }
  }

  // Chain through cosine: d sim(i,j)/d z_i = (unit_j - sim*unit_i)/|z_i|.
  std::vector<double> dz(static_cast<std::size_t>(m) * d, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      if (j == i) continue;
      const double g = dsim[static_cast<std::size_t>(i) * m + j];
      if (g == 0.0) continue;
      const double s = sim[static_cast<std::size_t>(i) * m + j];
      for (int k = 0; k < d; ++k) {
        dz[static_cast<std::size_t>(i) * d + k] += g * (unit(j, k) - s * unit(i, k)) / norms[static_cast<std::size_t>(i)];
        dz[static_cast<std::size_t>(j) * d + k] += g * (unit(i, k) - s * unit(j, k)) / norms[static_cast<std::size_t>(j)];
      }
    }

  PairLossValue<S> out;
  out.value = static_cast<S>(total / m);
  out.grad_a = Tensor<S>(za.shape);
  out.grad_b = Tensor<S>(zb.shape);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) {
      out.grad_a.at(i, k) = static_cast<S>(dz[static_cast<std::size_t>(i) * d + k]);
      out.grad_b.at(i, k) = static_cast<S>(dz[static_cast<std::size_t>(i + n) * d + k]);
    }
  return out;
}

}  // namespace pfedhr
