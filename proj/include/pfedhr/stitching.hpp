#pragma once

#include <map>
#include <utility>
#include <vector>

#include "pfedhr/archzoo.hpp"
#include "pfedhr/augment.hpp"
#include "pfedhr/data.hpp"
#include "pfedhr/losses.hpp"
#include "pfedhr/model.hpp"
#include "pfedhr/reassembly.hpp"

namespace pfedhr {

template <typename S = float>
struct LayerStore {
  std::map<std::pair<int, int>, const LayerUnit<S>*> units;

  void add(const LayerRef& ref, const LayerUnit<S>* unit) {
    units[{ref.client_id, ref.layer_index}] = unit;
  }
  const LayerUnit<S>& resolve(const LayerRef& ref) const {
    auto it = units.find({ref.client_id, ref.layer_index});
    if (it == units.end())
      throw UnresolvableRef("no uploaded layer for client " + std::to_string(ref.client_id) + " index " +
                            std::to_string(ref.layer_index));
    return *it->second;
  }

  static LayerStore from_decomposition(const std::vector<DecomposedLayer<S>>& layers) {
    LayerStore store;
    for (const auto& dl : layers) store.add(dl.ref, dl.unit);
    return store;
  }
};

template <typename S = float>
struct StitchedModel {
  CandidateBlueprint blueprint;
  ModelState<S> model;
};

struct StitchOptions {
  int depth = 1;                     // linear layers per dense adapter
  std::uint64_t seed = 0;            // adapter/head initialization
  const std::vector<int>* input_spec = nullptr;  // when set, adapt the model input too
};

namespace detail {

// Adapters start as an identity on the leading min(d_in, d_out) coordinates
// plus small symmetry-breaking noise. Donor blocks emit post-ReLU values, so
// the identity passes their activations through unchanged and the stitched
// model keeps the donors' features until finetuning reshapes the map.
template <typename S>
Tensor<S> stitch_init(std::vector<int> shape, int d_in, int d_out, Rng& rng) {
  Tensor<S> t(std::move(shape));
  const double noise = 0.01 * std::sqrt(2.0 / (d_in + d_out));
  for (auto& v : t.data) v = static_cast<S>(noise * rng.normal());
  if (t.shape.size() == 2) {
    for (int i = 0; i < std::min(d_in, d_out); ++i) t.at(i, i) += S(1);
  }
  return t;
}

template <typename S>
LayerUnit<S> make_dense_stitch(int d_in, int d_out, int depth, Rng& rng) {
  LayerUnit<S> u;
  u.kind = BlockKind::DenseStitch;
  u.origin = Provenance{-1, -1, ProvenanceKind::Stitch};
  u.in_spec = {d_in};
  u.out_spec = {d_out};
  int cur = d_in;
  for (int sub = 0; sub < depth; ++sub) {
    const std::string suffix = sub == 0 ? "" : std::to_string(sub + 1);
    const int next = d_out;
    u.params.emplace("weight" + suffix, stitch_init<S>({cur, next}, cur, next, rng));
    u.params.emplace("bias" + suffix, Tensor<S>({next}));
    cur = next;
  }
  return u;
}

template <typename S>
LayerUnit<S> make_channel_stitch(const std::vector<int>& in_dims, const std::vector<int>& out_dims,
                                 Rng& rng) {
  LayerUnit<S> u;
  u.kind = BlockKind::ChannelStitch;
  u.origin = Provenance{-1, -1, ProvenanceKind::Stitch};
  u.in_spec = in_dims;
  u.out_spec = {out_dims[0], out_dims[1], out_dims[2]};
  if (in_dims[0] != out_dims[0]) {
    u.params.emplace("weight", stitch_init<S>({out_dims[0], in_dims[0]}, in_dims[0], out_dims[0], rng));
    u.params.emplace("bias", Tensor<S>({out_dims[0]}));
  }
  return u;
}

// True when `produced` can feed a block expecting `wanted` without an adapter.
inline bool dims_compatible(const std::vector<int>& produced, const std::vector<int>& wanted,
                            bool next_is_spatial) {
  if (next_is_spatial) return produced == wanted;
  return numel_of(produced) == numel_of(wanted);
}

}  // namespace detail

/// Materializes a blueprint into a runnable model: donor layers are deep
/// copies (uploads are never mutated), an adapter is inserted at every
/// consecutive spec mismatch, and a fresh classifier head is appended when the
/// final width differs from the class count. With `input_spec` set, a leading
/// adapter is added if the first donor layer cannot consume the data directly.
template <typename S>
StitchedModel<S> stitch(const CandidateBlueprint& blueprint, const LayerStore<S>& store, int num_classes,
                        const StitchOptions& opts = {}) {
  if (blueprint.sequence.empty()) throw UnresolvableRef("blueprint has no layers");
  Rng rng(opts.seed);
  StitchedModel<S> out;
  out.blueprint = blueprint;
  ModelState<S>& m = out.model;

  std::vector<int> produced;  // dims flowing into the next unit
  bool have_input = false;
  if (opts.input_spec) {
    produced = *opts.input_spec;
    have_input = true;
  }

  for (const LayerRef& ref : blueprint.sequence) {
    const LayerUnit<S>& donor = store.resolve(ref);
    const bool spatial = donor.kind == BlockKind::ConvUnit;
    if (have_input && !detail::dims_compatible(produced, donor.in_spec, spatial)) {
      if (spatial) {
        if (produced.size() != 3)
          throw ShapeMismatch("cannot adapt non-image activations into a CONV block");
        m.layers.push_back(detail::make_channel_stitch<S>(produced, donor.in_spec, rng));
      } else {
        m.layers.push_back(detail::make_dense_stitch<S>(static_cast<int>(numel_of(produced)),
                                                        static_cast<int>(numel_of(donor.in_spec)),
                                                        opts.depth, rng));
      }
    }
    m.layers.push_back(donor);  // deep copy; provenance travels with it
    m.layers.back().grads.clear();
    m.layers.back().velocity.clear();
    produced = donor.out_spec;
    have_input = true;
  }

  const int final_width = static_cast<int>(numel_of(produced));
  m.head = make_classifier<S>(final_width, num_classes, rng);
  m.head.origin = Provenance{-1, -1, ProvenanceKind::Stitch};
  return out;
}

template <typename S>
int adapter_count(const StitchedModel<S>& sm) {
  int n = 0;
  for (const auto& u : sm.model.layers)
    if (u.kind == BlockKind::DenseStitch || u.kind == BlockKind::ChannelStitch) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Public-data finetuning

template <typename S = float>
struct FinetuneConfig {
  int epochs = 3;
  int batch_size = 32;
  SgdConfig<S> sgd{};
  double nt_xent_temperature = 0.5;
  int projection_width = 64;
};

namespace detail {

template <typename S>
void finetune_supervised(ModelState<S>& model, const PublicDataset<S>& pub, const FinetuneConfig<S>& cfg,
                         Rng& rng) {
  const int n = pub.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int stop = std::min(n, start + cfg.batch_size);
      std::vector<int> rows(order.begin() + start, order.begin() + stop);
      Tensor<S> x = gather_rows(pub.features, rows);
      std::vector<int> y;
      y.reserve(rows.size());
      for (int r : rows) y.push_back(pub.labels[static_cast<std::size_t>(r)]);
      Tensor<S> logits = forward(model, x);
      LossValue<S> loss = cross_entropy(logits, y);
      backward_and_step(model, loss.grad, cfg.sgd);
    }
  }
}

// Contrastive finetuning trains the body through a throwaway projection head;
// the classifier head is left untouched.
template <typename S>
void finetune_contrastive(ModelState<S>& model, const PublicDataset<S>& pub, const FinetuneConfig<S>& cfg,
                          Rng& rng) {
  const int n = pub.size();
  const Tensor<S> probe = gather_rows(pub.features, {0});
  const Tensor<S> body_out = forward_body_eval(model, probe);
  const int body_dim = static_cast<int>(body_out.numel());

  Rng proj_rng(rng.next_u64());
  ModelState<S> proj;
  proj.layers.push_back(make_fc_unit<S>(body_dim, cfg.projection_width, proj_rng, 0.0));
  proj.head = make_classifier<S>(cfg.projection_width, cfg.projection_width, proj_rng);
  proj.set_mode(Mode::Train);
  proj.reseed(proj_rng.next_u64());

  model.set_mode(Mode::Train);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  Tape<S> body_tape_a, body_tape_b, proj_tape_a, proj_tape_b;
  for (int e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    for (int start = 0; start + 1 < n; start += cfg.batch_size) {
      const int stop = std::min(n, start + cfg.batch_size);
      if (stop - start < 2) continue;  // a lone sample has no negatives
      std::vector<int> rows(order.begin() + start, order.begin() + stop);
      Tensor<S> x = gather_rows(pub.features, rows);
      Tensor<S> va = contrastive_view(x, rng);
      Tensor<S> vb = contrastive_view(x, rng);

      Tensor<S> ha = forward_train_body(model, va, body_tape_a);
      Tensor<S> hb = forward_train_body(model, vb, body_tape_b);

      proj_tape_a.assign(2, BlockCache<S>{});
      Tensor<S> za = block_forward(proj.layers[0], flatten_batch(ha), true, &proj.rng, &proj_tape_a[0]);
      za = block_forward(proj.head, za, true, &proj.rng, &proj_tape_a[1]);
      proj_tape_b.assign(2, BlockCache<S>{});
      Tensor<S> zb = block_forward(proj.layers[0], flatten_batch(hb), true, &proj.rng, &proj_tape_b[0]);
      zb = block_forward(proj.head, zb, true, &proj.rng, &proj_tape_b[1]);

      PairLossValue<S> loss = nt_xent(za, zb, cfg.nt_xent_temperature);

      Tensor<S> g = block_backward(proj.head, loss.grad_a, proj_tape_a[1]);
      g = block_backward(proj.layers[0], g, proj_tape_a[0]);
      backward_body(model, g.reshaped(ha.shape), body_tape_a);
      g = block_backward(proj.head, loss.grad_b, proj_tape_b[1]);
      g = block_backward(proj.layers[0], g, proj_tape_b[0]);
      backward_body(model, g.reshaped(hb.shape), body_tape_b);

      for (auto& unit : model.layers) detail::sgd_step_unit(unit, cfg.sgd);
      detail::sgd_step_unit(proj.layers[0], cfg.sgd);
      detail::sgd_step_unit(proj.head, cfg.sgd);
    }
  }
}

}  // namespace detail

/// Short public-data finetune: cross-entropy when the public set is labeled,
/// contrastive over augmented view pairs otherwise. epochs == 0 is a no-op.
template <typename S>
void finetune(ModelState<S>& model, const PublicDataset<S>& pub, int epochs, bool labeled,
              const FinetuneConfig<S>& base_cfg, std::uint64_t seed) {
  if (labeled != pub.labeled)
    throw LabelFlagMismatch("labeled flag does not match the public dataset");
  if (epochs < 0) throw ConfigInvalid("finetune epochs must be >= 0");
  if (epochs == 0 || pub.size() == 0) return;

  FinetuneConfig<S> cfg = base_cfg;
  cfg.epochs = epochs;
  Rng rng(seed);
  model.set_mode(Mode::Train);
  model.reseed(rng.next_u64());
  if (labeled)
    detail::finetune_supervised(model, pub, cfg, rng);
  else
    detail::finetune_contrastive(model, pub, cfg, rng);
  model.set_mode(Mode::Eval);
}

}  // namespace pfedhr
