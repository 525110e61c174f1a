#pragma once

#include <cmath>
#include <vector>

#include "pfedhr/data.hpp"
#include "pfedhr/model.hpp"

namespace pfedhr {

inline constexpr int kSelfMatch = -1;

struct MatchResult {
  int client_id = -1;
  int candidate_index = kSelfMatch;  // kSelfMatch when no candidate exists
  double similarity = 0.0;
  std::vector<double> all_scores;
};

namespace detail {

// Cosine of two logit rows; a zero vector scores 0 (dead networks happen).
template <typename S>
double cosine(const S* a, const S* b, int d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int k = 0; k < d; ++k) {
    dot += static_cast<double>(a[k]) * static_cast<double>(b[k]);
    na += static_cast<double>(a[k]) * static_cast<double>(a[k]);
    nb += static_cast<double>(b[k]) * static_cast<double>(b[k]);
  }
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

// Mean per-sample cosine between the two models' logits over the whole public
// set, evaluated in eval mode.
template <typename S>
double model_similarity(const ModelState<S>& a, const ModelState<S>& b, const PublicDataset<S>& pub,
                        int chunk = 64) {
  if (a.num_classes() != b.num_classes())
    throw ClassCountMismatch("models emit different class counts");
  const int n = pub.size();
  if (n == 0) return 0.0;
  double total = 0.0;
  std::vector<int> rows;
  for (int start = 0; start < n; start += chunk) {
    const int stop = std::min(n, start + chunk);
    rows.clear();
    for (int r = start; r < stop; ++r) rows.push_back(r);
    Tensor<S> x = gather_rows(pub.features, rows);
    Tensor<S> la = forward_eval(a, x);
    Tensor<S> lb = forward_eval(b, x);
    const int c = la.dim(1);
    for (int i = 0; i < stop - start; ++i)
      total += detail::cosine(la.data.data() + static_cast<std::size_t>(i) * c,
                              lb.data.data() + static_cast<std::size_t>(i) * c, c);
  }
  return total / n;
}

// Best match per client: argmax of similarity over candidates, ties broken by
// the lowest candidate index. An empty candidate list yields a SELF match.
template <typename S>
std::vector<MatchResult> match_clients(
    const std::vector<std::pair<int, const ModelState<S>*>>& finetuned_clients,
    const std::vector<const ModelState<S>*>& finetuned_candidates, const PublicDataset<S>& pub) {
  std::vector<MatchResult> out;
  out.reserve(finetuned_clients.size());
  for (const auto& [client_id, model] : finetuned_clients) {
    MatchResult r;
    r.client_id = client_id;
    r.all_scores.reserve(finetuned_candidates.size());
    for (std::size_t m = 0; m < finetuned_candidates.size(); ++m) {
      const double s = model_similarity(*model, *finetuned_candidates[m], pub);
      r.all_scores.push_back(s);
      if (r.candidate_index == kSelfMatch || s > r.similarity) {
        r.candidate_index = static_cast<int>(m);
        r.similarity = s;
      }
    }
    if (finetuned_candidates.empty()) r.similarity = 1.0;  // a model always matches itself
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pfedhr
