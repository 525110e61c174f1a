#pragma once

#include <utility>
#include <vector>

#include "pfedhr/layers.hpp"

namespace pfedhr {

enum class Mode : std::uint8_t { Train = 0, Eval = 1 };

template <typename S = float>
struct SgdConfig {
  S lr = S(0.01);
  S momentum = S(0.9);
};

// A runnable sequential network: body blocks plus a classifier head.
// Copying a ModelState deep-copies all parameters.
template <typename S = float>
struct ModelState {
  std::vector<LayerUnit<S>> layers;
  LayerUnit<S> head;
  Mode mode = Mode::Eval;
  Rng rng{0x5eedULL};

  Tape<S> tape;  // body caches + head cache, written by train-mode forward
  bool has_tape = false;

  int num_classes() const { return head.out_spec.empty() ? 0 : head.out_spec[0]; }

  void set_mode(Mode m) { mode = m; }
  void reseed(std::uint64_t s) { rng = Rng(s); }
};

// Train-mode forward with an explicit tape (body only). Needed when two
// forward passes must coexist, e.g. the two views of a contrastive pair.
template <typename S>
Tensor<S> forward_train_body(ModelState<S>& model, const Tensor<S>& batch, Tape<S>& tape) {
  tape.assign(model.layers.size(), BlockCache<S>{});
  Tensor<S> cur = batch;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    cur = block_forward(model.layers[i], cur, true, &model.rng, &tape[i]);
  return cur;
}

// Backward through the body with an explicit tape; returns d(input).
template <typename S>
Tensor<S> backward_body(ModelState<S>& model, const Tensor<S>& grad, const Tape<S>& tape) {
  Tensor<S> g = grad;
  for (int i = static_cast<int>(model.layers.size()) - 1; i >= 0; --i)
    g = block_backward(model.layers[static_cast<std::size_t>(i)], g, tape[static_cast<std::size_t>(i)]);
  return g;
}

template <typename S>
Tensor<S> forward(ModelState<S>& model, const Tensor<S>& batch) {
  if (model.mode == Mode::Train) {
    model.tape.assign(model.layers.size() + 1, BlockCache<S>{});
    Tensor<S> cur = batch;
    for (std::size_t i = 0; i < model.layers.size(); ++i)
      cur = block_forward(model.layers[i], cur, true, &model.rng, &model.tape[i]);
    cur = block_forward(model.head, cur, true, &model.rng, &model.tape.back());
    model.has_tape = true;
    return cur;
  }
  Tensor<S> cur = batch;
  for (auto& unit : model.layers) cur = block_forward(unit, cur, false, nullptr, nullptr);
  return block_forward(model.head, cur, false, nullptr, nullptr);
}

// Eval forward that leaves the model untouched (usable on shared teachers).
template <typename S>
Tensor<S> forward_eval(const ModelState<S>& model, const Tensor<S>& batch) {
  Tensor<S> cur = batch;
  for (const auto& unit : model.layers)
    cur = block_forward(const_cast<LayerUnit<S>&>(unit), cur, false, nullptr, nullptr);
  return block_forward(const_cast<LayerUnit<S>&>(model.head), cur, false, nullptr, nullptr);
}

template <typename S>
Tensor<S> forward_body_eval(const ModelState<S>& model, const Tensor<S>& batch) {
  Tensor<S> cur = batch;
  for (const auto& unit : model.layers)
    cur = block_forward(const_cast<LayerUnit<S>&>(unit), cur, false, nullptr, nullptr);
  return cur;
}

template <typename S>
void backward(ModelState<S>& model, const Tensor<S>& logits_grad) {
  if (!model.has_tape) throw NoTape("backward requires a preceding train-mode forward");
  Tensor<S> g = block_backward(model.head, logits_grad, model.tape.back());
  for (int i = static_cast<int>(model.layers.size()) - 1; i >= 0; --i)
    g = block_backward(model.layers[static_cast<std::size_t>(i)], g, model.tape[static_cast<std::size_t>(i)]);
}

template <typename S>
void zero_grads(ModelState<S>& model) {
  for (auto& unit : model.layers) unit.grads.clear();
  model.head.grads.clear();
}

namespace detail {

template <typename S>
void sgd_step_unit(LayerUnit<S>& unit, const SgdConfig<S>& cfg) {
  for (auto& [name, g] : unit.grads) {
    if (!is_trainable_param(name)) continue;
    Tensor<S>& p = unit.params.at(name);
    auto it = unit.velocity.find(name);
    if (it == unit.velocity.end()) it = unit.velocity.emplace(name, Tensor<S>(p.shape)).first;
    Tensor<S>& v = it->second;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      v.data[i] = cfg.momentum * v.data[i] + g.data[i];
      p.data[i] -= cfg.lr * v.data[i];
    }
  }
  unit.grads.clear();
}

}  // namespace detail

// Momentum SGD update over every trainable parameter; clears gradients and tape.
template <typename S>
void sgd_step(ModelState<S>& model, const SgdConfig<S>& cfg) {
  for (auto& unit : model.layers) detail::sgd_step_unit(unit, cfg);
  detail::sgd_step_unit(model.head, cfg);
  model.tape.clear();
  model.has_tape = false;
}

template <typename S>
void backward_and_step(ModelState<S>& model, const Tensor<S>& logits_grad, const SgdConfig<S>& cfg) {
  backward(model, logits_grad);
  sgd_step(model, cfg);
}

template <typename S>
long long parameter_count(const ModelState<S>& model) {
  long long n = parameter_count(model.head);
  for (const auto& unit : model.layers) n += parameter_count(unit);
  return n;
}

// Activations at every body-block boundary (eval mode), flattened to
// (batch, features). Entry 0 is the flattened input; entry i+1 the output of
// block i. One pass serves every layer of the model.
template <typename S>
std::vector<Tensor<S>> collect_boundary_activations(const ModelState<S>& model, const Tensor<S>& batch) {
  std::vector<Tensor<S>> acts;
  acts.reserve(model.layers.size() + 1);
  Tensor<S> cur = batch;
  acts.push_back(flatten_batch(cur));
  for (const auto& unit : model.layers) {
    cur = block_forward(const_cast<LayerUnit<S>&>(unit), cur, false, nullptr, nullptr);
    acts.push_back(flatten_batch(cur));
  }
  return acts;
}

template <typename S>
bool parameters_equal(const ModelState<S>& a, const ModelState<S>& b) {
  auto unit_eq = [](const LayerUnit<S>& x, const LayerUnit<S>& y) {
    if (x.params.size() != y.params.size()) return false;
    for (const auto& [name, t] : x.params) {
      auto it = y.params.find(name);
      if (it == y.params.end() || it->second.shape != t.shape || it->second.data != t.data) return false;
    }
    return true;
  };
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (!unit_eq(a.layers[i], b.layers[i])) return false;
  return unit_eq(a.head, b.head);
}

}  // namespace pfedhr
