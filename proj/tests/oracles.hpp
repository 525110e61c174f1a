#pragma once

// Test-only reference implementations. Everything here is written directly
// from first principles and stays independent of the library code paths it
// checks: brute-force searches, direct formula evaluations, finite differences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <utility>
#include <vector>

#include "pfedhr/reassembly.hpp"

namespace oracles {

// ---------------------------------------------------------------------------
// Finite differences

struct GradCheckStats {
  int probes = 0;
  int failures = 0;
  double worst = 0.0;
};

// Central-difference comparison of an analytic derivative at one coordinate.
// Relative error is guarded with an absolute floor so structurally-zero
// gradients compare as equal.
inline double guarded_rel_error(double analytic, double numeric, double floor_ = 1e-4) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor_});
  return std::fabs(analytic - numeric) / denom;
}

// f: evaluates the scalar objective from scratch (same randomness each call).
inline double central_difference(const std::function<double()>& f, double* slot, double eps) {
  const double keep = *slot;
  *slot = keep + eps;
  const double up = f();
  *slot = keep - eps;
  const double down = f();
  *slot = keep;
  return (up - down) / (2.0 * eps);
}

// ---------------------------------------------------------------------------
// Exhaustive K-medoid search

// Objective of a fixed medoid set: every point joins its nearest medoid
// (a medoid joins itself).
inline double medoid_objective(int n, const std::vector<double>& dist, const std::vector<int>& medoids) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double best = 0.0;
    bool self = false;
    for (int m : medoids)
      if (m == i) {
        best = dist[static_cast<std::size_t>(i) * n + i];
        self = true;
        break;
      }
    if (!self) {
      best = 1e300;
      for (int m : medoids) best = std::min(best, dist[static_cast<std::size_t>(i) * n + m]);
    }
    total += best;
  }
  return total;
}

// Minimum objective over all K-subsets of points (n small).
inline double exhaustive_medoid_optimum(int n, const std::vector<double>& dist, int k,
                                        std::vector<int>* best_medoids = nullptr) {
  std::vector<int> pick(static_cast<std::size_t>(k));
  double best = 1e300;
  std::function<void(int, int)> rec = [&](int start, int depth) {
    if (depth == k) {
      const double obj = medoid_objective(n, dist, pick);
      if (obj < best) {
        best = obj;
        if (best_medoids) *best_medoids = pick;
      }
      return;
    }
    for (int i = start; i < n; ++i) {
      pick[static_cast<std::size_t>(depth)] = i;
      rec(i + 1, depth + 1);
    }
  };
  rec(0, 0);
  return best;
}

// ---------------------------------------------------------------------------
// Candidate-search reference

using SequenceKey = std::vector<std::pair<int, int>>;  // (client_id, layer_index) list

// Independent re-derivation of the seed-and-greedy-scan schema: every layer of
// every group seeds a pass over groups in index order, appending the first
// member that keeps layer indices strictly increasing and never places a CONV
// after an FC; a sequence survives only if it covers the whole operation set
// and every group.
inline std::set<SequenceKey> enumerate_candidates(const pfedhr::LayerClustering& clustering,
                                                  const std::set<pfedhr::OpType>& op_set) {
  const int k = static_cast<int>(clustering.groups.size());
  auto sorted_group = [&](int g) {
    std::vector<pfedhr::LayerRef> members;
    for (int idx : clustering.groups[static_cast<std::size_t>(g)])
      members.push_back(clustering.refs[static_cast<std::size_t>(idx)]);
    std::sort(members.begin(), members.end());
    return members;
  };
  std::vector<std::vector<pfedhr::LayerRef>> groups;
  for (int g = 0; g < k; ++g) groups.push_back(sorted_group(g));

  std::set<SequenceKey> out;
  for (int g = 0; g < k; ++g) {
    for (const pfedhr::LayerRef& seed : groups[static_cast<std::size_t>(g)]) {
      std::vector<pfedhr::LayerRef> seq{seed};
      std::set<pfedhr::OpType> ops{seed.op};
      std::set<int> used{g};
      for (int g2 = 0; g2 < k; ++g2) {
        for (const pfedhr::LayerRef& cand : groups[static_cast<std::size_t>(g2)]) {
          const bool layer_order = cand.layer_index > seq.back().layer_index;
          const bool op_order = !(seq.back().op == pfedhr::OpType::Fc && cand.op == pfedhr::OpType::Conv);
          if (layer_order && op_order) {
            seq.push_back(cand);
            ops.insert(cand.op);
            used.insert(g2);
            break;
          }
        }
      }
      if (ops == op_set && static_cast<int>(used.size()) == k) {
        SequenceKey key;
        for (const auto& r : seq) key.emplace_back(r.client_id, r.layer_index);
        out.insert(std::move(key));
      }
    }
  }
  return out;
}

// Rule verifier: re-derives every property of an emitted candidate from its
// sequence alone plus the clustering's layer-to-group map.
inline bool verify_rules(const pfedhr::CandidateBlueprint& bp, const pfedhr::LayerClustering& clustering,
                         const std::set<pfedhr::OpType>& op_set) {
  if (bp.sequence.empty()) return false;
  std::set<pfedhr::OpType> ops;
  std::set<int> groups;
  for (std::size_t i = 0; i < bp.sequence.size(); ++i) {
    const pfedhr::LayerRef& r = bp.sequence[i];
    if (i > 0) {
      if (r.layer_index <= bp.sequence[i - 1].layer_index) return false;  // layer order
      if (bp.sequence[i - 1].op == pfedhr::OpType::Fc && r.op == pfedhr::OpType::Conv)
        return false;  // operation order
    }
    ops.insert(r.op);
    int found_group = -1;
    for (std::size_t idx = 0; idx < clustering.refs.size(); ++idx)
      if (clustering.refs[idx] == r) {
        found_group = clustering.group_of[idx];
        break;
      }
    if (found_group < 0) return false;
    groups.insert(found_group);
  }
  if (ops != op_set) return false;                                              // complete operation set
  return static_cast<int>(groups.size()) == static_cast<int>(clustering.groups.size());  // all groups
}

// ---------------------------------------------------------------------------
// Direct loss formulas (double precision, written from the definitions)

inline double direct_cross_entropy(const std::vector<std::vector<double>>& logits,
                                   const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double mx = logits[i][0];
    for (double v : logits[i]) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits[i]) sum += std::exp(v - mx);
    total += mx + std::log(sum) - logits[i][static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(logits.size());
}

inline double direct_kl(const std::vector<std::vector<double>>& p_logits,
                        const std::vector<std::vector<double>>& q_logits) {
  auto softmax = [](const std::vector<double>& z) {
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    std::vector<double> p(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) sum += (p[i] = std::exp(z[i] - mx));
    for (auto& v : p) v /= sum;
    return p;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < p_logits.size(); ++i) {
    const auto p = softmax(p_logits[i]);
    const auto q = softmax(q_logits[i]);
    for (std::size_t c = 0; c < p.size(); ++c) total += p[c] * (std::log(p[c]) - std::log(q[c]));
  }
  return total / static_cast<double>(p_logits.size());
}

// NT-Xent straight from the definition over the 2n pooled embeddings.
inline double direct_nt_xent(const std::vector<std::vector<double>>& za,
                             const std::vector<std::vector<double>>& zb, double tau) {
  const int n = static_cast<int>(za.size());
  const int m = 2 * n;
  std::vector<std::vector<double>> z(za.begin(), za.end());
  z.insert(z.end(), zb.begin(), zb.end());
  auto cosine = [&](int i, int j) {
    double dot = 0.0, ni = 0.0, nj = 0.0;
    for (std::size_t k = 0; k < z[static_cast<std::size_t>(i)].size(); ++k) {
      dot += z[static_cast<std::size_t>(i)][k] * z[static_cast<std::size_t>(j)][k];
      ni += z[static_cast<std::size_t>(i)][k] * z[static_cast<std::size_t>(i)][k];
      nj += z[static_cast<std::size_t>(j)][k] * z[static_cast<std::size_t>(j)][k];
    }
    return dot / std::max(std::sqrt(ni) * std::sqrt(nj), 1e-12);
  };
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    const int pos = i < n ? i + n : i - n;
    double denom = 0.0;
    for (int j = 0; j < m; ++j)
      if (j != i) denom += std::exp(cosine(i, j) / tau);
    total += -std::log(std::exp(cosine(i, pos) / tau) / denom);
  }
  return total / m;
}

}  // namespace oracles
