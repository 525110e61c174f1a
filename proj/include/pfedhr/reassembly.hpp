#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pfedhr/model.hpp"
#include "pfedhr/rng.hpp"

namespace pfedhr {

// Identifies one decomposed layer inside the current round's upload set.
struct LayerRef {
  int client_id = -1;
  int layer_index = -1;
  OpType op = OpType::Fc;

  friend bool operator==(const LayerRef& a, const LayerRef& b) {
    return a.client_id == b.client_id && a.layer_index == b.layer_index && a.op == b.op;
  }
  friend bool operator<(const LayerRef& a, const LayerRef& b) {
    if (a.client_id != b.client_id) return a.client_id < b.client_id;
    return a.layer_index < b.layer_index;
  }
};

template <typename S = float>
struct DecomposedLayer {
  LayerRef ref;
  const LayerUnit<S>* unit = nullptr;
  const ModelState<S>* owner = nullptr;  // for activation probing through the prefix
};

// Splits uploaded models into their body layers; classifier heads are not part
// of the reassembly pool. Order is preserved within each model.
template <typename S>
std::vector<DecomposedLayer<S>> decompose(
    const std::vector<std::pair<int, const ModelState<S>*>>& uploads) {
  if (uploads.empty()) throw EmptyUpload("decompose requires at least one uploaded model");
  std::vector<DecomposedLayer<S>> out;
  for (const auto& [client_id, model] : uploads) {
    if (model->layers.empty()) throw EmptyUpload("uploaded model has no body layers");
    for (std::size_t h = 0; h < model->layers.size(); ++h)
      out.push_back(DecomposedLayer<S>{LayerRef{client_id, static_cast<int>(h), model->layers[h].op()},
                                       &model->layers[h], model});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Centered kernel alignment

/// Linear CKA between two activation matrices with a shared sample axis:
/// CKA = HSIC(K,L) / sqrt(HSIC(K,K) * HSIC(L,L)) with K = XX^T, L = YY^T,
/// both double-centered. Feature dimensions may differ. A matrix whose
/// centered Gram is all zero (e.g. a constant output) yields 0.
template <typename S>
double cka(const Tensor<S>& x, const Tensor<S>& y) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0) || x.dim(0) < 2)
    throw ShapeMismatch("cka expects two (n,features) matrices with shared n >= 2");
  const int n = x.dim(0);

  auto centered_gram = [n](const Tensor<S>& m) {
    const int d = m.dim(1);
    std::vector<double> g(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) {
        double acc = 0.0;
        const S* ri = m.data.data() + static_cast<std::size_t>(i) * d;
        const S* rj = m.data.data() + static_cast<std::size_t>(j) * d;
        for (int k = 0; k < d; ++k) acc += static_cast<double>(ri[k]) * static_cast<double>(rj[k]);
        g[static_cast<std::size_t>(i) * n + j] = acc;
        g[static_cast<std::size_t>(j) * n + i] = acc;
      }
    std::vector<double> row_mean(static_cast<std::size_t>(n), 0.0);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) row_mean[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i) * n + j];
      row_mean[static_cast<std::size_t>(i)] /= n;
      total += row_mean[static_cast<std::size_t>(i)];
    }
    total /= n;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        g[static_cast<std::size_t>(i) * n + j] +=
            total - row_mean[static_cast<std::size_t>(i)] - row_mean[static_cast<std::size_t>(j)];
    return g;
  };

  const auto kx = centered_gram(x);
  const auto ky = centered_gram(y);
  double hxy = 0.0, hxx = 0.0, hyy = 0.0;
  for (std::size_t i = 0; i < kx.size(); ++i) {
    hxy += kx[i] * ky[i];
    hxx += kx[i] * kx[i];
    hyy += ky[i] * ky[i];
  }
  if (hxx <= 1e-24 || hyy <= 1e-24) return 0.0;  // degenerate input
  return hxy / std::sqrt(hxx * hyy);
}

// Input/output activations of one layer, reconstructed by running the public
// batch through the owning model's prefix. Both sides flattened to (n, features).
template <typename S>
std::pair<Tensor<S>, Tensor<S>> layer_activations(const ModelState<S>& owner, int layer_index,
                                                  const Tensor<S>& public_batch) {
  if (layer_index < 0 || layer_index >= static_cast<int>(owner.layers.size()))
    throw ShapeMismatch("layer index outside the owning model");
  Tensor<S> cur = public_batch;
  for (int i = 0; i < layer_index; ++i)
    cur = block_forward(const_cast<LayerUnit<S>&>(owner.layers[static_cast<std::size_t>(i)]), cur, false,
                        nullptr, nullptr);
  Tensor<S> in_flat = flatten_batch(cur);
  cur = block_forward(const_cast<LayerUnit<S>&>(owner.layers[static_cast<std::size_t>(layer_index)]), cur,
                      false, nullptr, nullptr);
  return {std::move(in_flat), flatten_batch(cur)};
}

/// Eq-style pairwise layer distance: (CKA of inputs + CKA of outputs)^(-1).
/// Identical layers score 0.5 (both terms 1); a degenerate pair with both
/// terms 0 maps to a large finite distance.
inline double layer_distance_from_cka(double in_cka, double out_cka) {
  const double s = in_cka + out_cka;
  return 1.0 / std::max(s, 1e-9);
}

// Symmetric distance matrix over decomposed layers (row-major n*n). One eval
// pass per model collects every boundary activation; Grams are then reused
// across all pairs.
template <typename S>
std::vector<double> build_distance_matrix(const std::vector<DecomposedLayer<S>>& layers,
                                          const Tensor<S>& public_batch) {
  const int n = static_cast<int>(layers.size());
  std::map<const ModelState<S>*, std::vector<Tensor<S>>> boundary;
  for (const auto& dl : layers)
    if (!boundary.count(dl.owner)) boundary[dl.owner] = collect_boundary_activations(*dl.owner, public_batch);

  std::vector<const Tensor<S>*> ins(static_cast<std::size_t>(n)), outs(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& acts = boundary[layers[static_cast<std::size_t>(i)].owner];
    ins[static_cast<std::size_t>(i)] = &acts[static_cast<std::size_t>(layers[static_cast<std::size_t>(i)].ref.layer_index)];
    outs[static_cast<std::size_t>(i)] = &acts[static_cast<std::size_t>(layers[static_cast<std::size_t>(i)].ref.layer_index) + 1];
  }

  std::vector<double> dist(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      const double d = layer_distance_from_cka(cka(*ins[static_cast<std::size_t>(i)], *ins[static_cast<std::size_t>(j)]),
                                               cka(*outs[static_cast<std::size_t>(i)], *outs[static_cast<std::size_t>(j)]));
      dist[static_cast<std::size_t>(i) * n + j] = d;
      dist[static_cast<std::size_t>(j) * n + i] = d;
    }
  return dist;
}

// ---------------------------------------------------------------------------
// K-medoid grouping (PAM swap descent)

struct PamResult {
  std::vector<int> assignment;          // point -> group id
  std::vector<int> medoids;             // group id -> point index
  double objective = 0.0;               // sum of member-to-medoid distances
  std::vector<double> objective_history;  // after init and after each applied swap
};

namespace detail {

inline double pam_objective(int n, const std::vector<double>& dist, const std::vector<int>& medoids,
                            std::vector<int>* assignment) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    int best_g = -1;
    double best_d = 0.0;
    for (int g = 0; g < static_cast<int>(medoids.size()); ++g) {
      if (medoids[static_cast<std::size_t>(g)] == i) {  // a medoid stays in its own group
        best_g = g;
        best_d = dist[static_cast<std::size_t>(i) * n + i];
        break;
      }
      const double d = dist[static_cast<std::size_t>(i) * n + medoids[static_cast<std::size_t>(g)]];
      if (best_g < 0 || d < best_d) {  // ties keep the lowest group id
        best_d = d;
        best_g = g;
      }
    }
    total += best_d;
    if (assignment) (*assignment)[static_cast<std::size_t>(i)] = best_g;
  }
  return total;
}

}  // namespace detail

namespace detail {

inline PamResult pam_swap_descent(int n, const std::vector<double>& dist, int k,
                                  std::vector<int> medoids, int max_iters) {
  PamResult res;
  res.medoids = std::move(medoids);
  res.assignment.assign(static_cast<std::size_t>(n), 0);
  res.objective = pam_objective(n, dist, res.medoids, &res.assignment);
  res.objective_history.push_back(res.objective);

  std::vector<int> trial = res.medoids;
  for (int iter = 0; iter < max_iters; ++iter) {
    double best_obj = res.objective;
    int best_slot = -1, best_point = -1;
    for (int slot = 0; slot < k; ++slot) {
      for (int p = 0; p < n; ++p) {
        if (std::find(res.medoids.begin(), res.medoids.end(), p) != res.medoids.end()) continue;
        trial = res.medoids;
        trial[static_cast<std::size_t>(slot)] = p;
        const double obj = pam_objective(n, dist, trial, nullptr);
        if (obj < best_obj - 1e-12) {
          best_obj = obj;
          best_slot = slot;
          best_point = p;
        }
      }
    }
    if (best_slot < 0) break;
    res.medoids[static_cast<std::size_t>(best_slot)] = best_point;
    res.objective = pam_objective(n, dist, res.medoids, &res.assignment);
    res.objective_history.push_back(res.objective);
  }
  return res;
}

// Greedy build: start from the 1-medoid optimum, then repeatedly add the
// point that removes the most assignment cost.
inline std::vector<int> pam_build_init(int n, const std::vector<double>& dist, int k) {
  std::vector<int> medoids;
  int central = 0;
  double central_cost = 1e300;
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += dist[static_cast<std::size_t>(j) * n + i];
    if (s < central_cost) {
      central_cost = s;
      central = i;
    }
  }
  medoids.push_back(central);
  std::vector<double> nearest(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) nearest[static_cast<std::size_t>(j)] = dist[static_cast<std::size_t>(j) * n + central];
  while (static_cast<int>(medoids.size()) < k) {
    int best = -1;
    double best_profit = -1.0;
    for (int i = 0; i < n; ++i) {
      if (std::find(medoids.begin(), medoids.end(), i) != medoids.end()) continue;
      double profit = 0.0;
      for (int j = 0; j < n; ++j) {
        const double d = dist[static_cast<std::size_t>(j) * n + i];
        if (d < nearest[static_cast<std::size_t>(j)]) profit += nearest[static_cast<std::size_t>(j)] - d;
      }
      if (profit > best_profit) {
        best_profit = profit;
        best = i;
      }
    }
    medoids.push_back(best);
    for (int j = 0; j < n; ++j)
      nearest[static_cast<std::size_t>(j)] =
          std::min(nearest[static_cast<std::size_t>(j)], dist[static_cast<std::size_t>(j) * n + best]);
  }
  return medoids;
}

}  // namespace detail

// PAM with several deterministic starts, each refined by best-improvement
// swap descent: a greedy build start plus seeded medoid samples. The best
// final objective wins; ties keep the earliest start.
inline PamResult pam_cluster(int n, const std::vector<double>& dist, int k, std::uint64_t seed,
                             int max_iters = 50, int restarts = 8) {
  if (k < 1) throw ConfigInvalid("cluster count must be >= 1");
  if (k > n) throw TooFewLayers("cannot form " + std::to_string(k) + " groups from " + std::to_string(n) + " layers");

  Rng rng(seed);
  PamResult best = detail::pam_swap_descent(n, dist, k, detail::pam_build_init(n, dist, k), max_iters);
  for (int r = 0; r < restarts; ++r) {
    std::vector<int> sampled = rng.sample_without_replacement(n, k);
    std::sort(sampled.begin(), sampled.end());
    PamResult trial = detail::pam_swap_descent(n, dist, k, std::move(sampled), max_iters);
    if (trial.objective < best.objective - 1e-12) best = std::move(trial);
  }
  return best;
}

// K groups of layer references plus the distances they were built from.
struct LayerClustering {
  std::vector<LayerRef> refs;            // matrix order
  std::vector<double> distances;         // n*n row-major
  std::vector<std::vector<int>> groups;  // group -> indices into refs
  std::vector<int> medoids;              // group -> index into refs
  std::vector<int> group_of;             // index into refs -> group
  double objective = 0.0;
  std::vector<double> objective_history;
};

inline LayerClustering group_layers(std::vector<LayerRef> refs, std::vector<double> distances, int k,
                                    std::uint64_t seed) {
  const int n = static_cast<int>(refs.size());
  PamResult pam = pam_cluster(n, distances, k, seed);
  LayerClustering out;
  out.refs = std::move(refs);
  out.distances = std::move(distances);
  out.medoids = pam.medoids;
  out.group_of = pam.assignment;
  out.objective = pam.objective;
  out.objective_history = std::move(pam.objective_history);
  out.groups.assign(static_cast<std::size_t>(k), {});
  for (int i = 0; i < n; ++i) out.groups[static_cast<std::size_t>(pam.assignment[static_cast<std::size_t>(i)])].push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Rule-based reassembly candidate search

// Operation order rule: FC may follow CONV or FC; CONV may only follow CONV.
inline bool op_order_ok(OpType prev, OpType next) {
  return !(prev == OpType::Fc && next == OpType::Conv);
}

struct CandidateBlueprint {
  std::vector<LayerRef> sequence;
  std::vector<int> group_ids;  // group of each sequence entry
};

struct SearchLimits {
  int max_candidates = 32;
};

/// Seed-and-greedy-scan candidate generation. Every layer of every group seeds
/// one scan; the scan walks groups 1..K in order and appends the first member
/// whose source layer index exceeds the last appended one (layer-order rule)
/// and whose operation may follow the previous one (operation-order rule).
/// A finished sequence is kept only if it covers the full operation set and
/// all K groups. Results are deduplicated by sequence, earliest kept, and
/// capped at limits.max_candidates.
inline std::vector<CandidateBlueprint> search_candidates(const LayerClustering& clustering,
                                                         const std::set<OpType>& op_set,
                                                         const SearchLimits& limits = {}) {
  const int k = static_cast<int>(clustering.groups.size());
  std::vector<std::vector<int>> sorted_groups(clustering.groups.size());
  for (int g = 0; g < k; ++g) {
    sorted_groups[static_cast<std::size_t>(g)] = clustering.groups[static_cast<std::size_t>(g)];
    std::sort(sorted_groups[static_cast<std::size_t>(g)].begin(), sorted_groups[static_cast<std::size_t>(g)].end(),
              [&](int a, int b) { return clustering.refs[static_cast<std::size_t>(a)] < clustering.refs[static_cast<std::size_t>(b)]; });
  }

  std::vector<CandidateBlueprint> out;
  std::set<std::vector<std::pair<int, int>>> seen;

  for (int g = 0; g < k && static_cast<int>(out.size()) < limits.max_candidates; ++g) {
    for (int seed_idx : sorted_groups[static_cast<std::size_t>(g)]) {
      CandidateBlueprint cand;
      cand.sequence.push_back(clustering.refs[static_cast<std::size_t>(seed_idx)]);
      cand.group_ids.push_back(g);
      std::set<OpType> ops{cand.sequence.back().op};
      std::set<int> groups_used{g};

      for (int g2 = 0; g2 < k; ++g2) {
        for (int idx : sorted_groups[static_cast<std::size_t>(g2)]) {
          const LayerRef& ref = clustering.refs[static_cast<std::size_t>(idx)];
          if (ref.layer_index <= cand.sequence.back().layer_index) continue;
          if (!op_order_ok(cand.sequence.back().op, ref.op)) continue;
          cand.sequence.push_back(ref);
          cand.group_ids.push_back(g2);
          ops.insert(ref.op);
          groups_used.insert(g2);
          break;
        }
      }

      if (ops != op_set || static_cast<int>(groups_used.size()) != k) continue;
      std::vector<std::pair<int, int>> key;
      for (const auto& r : cand.sequence) key.emplace_back(r.client_id, r.layer_index);
      if (!seen.insert(std::move(key)).second) continue;
      out.push_back(std::move(cand));
      if (static_cast<int>(out.size()) >= limits.max_candidates) break;
    }
  }
  return out;
}

// Human-readable structure dump, one line per layer.
inline std::string dump_blueprint(const CandidateBlueprint& bp) {
  std::ostringstream os;
  for (std::size_t i = 0; i < bp.sequence.size(); ++i) {
    const LayerRef& r = bp.sequence[i];
    os << "client " << r.client_id << "  layer " << r.layer_index << "  " << op_name(r.op) << "  group "
       << bp.group_ids[i] << "\n";
  }
  return os.str();
}

}  // namespace pfedhr
