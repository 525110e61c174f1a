#pragma once

#include <string>
#include <vector>

#include "pfedhr/model.hpp"

namespace pfedhr {

enum class TemplateId : int { M1 = 0, M2 = 1, M3 = 2, M4 = 3 };

inline const char* template_name(TemplateId id) {
  switch (id) {
    case TemplateId::M1: return "M1";
    case TemplateId::M2: return "M2";
    case TemplateId::M3: return "M3";
    case TemplateId::M4: return "M4";
  }
  return "?";
}

inline TemplateId template_by_name(const std::string& name) {
  if (name == "M1") return TemplateId::M1;
  if (name == "M2") return TemplateId::M2;
  if (name == "M3") return TemplateId::M3;
  if (name == "M4") return TemplateId::M4;
  throw UnknownTemplate("unknown model template: " + name);
}

// Per-sample input dims: {d} for vector data, {c,h,w} for images.
struct InputSpec {
  std::vector<int> dims;
  bool is_image() const { return dims.size() == 3; }
};

struct ArchTemplate {
  struct BlockSpec {
    OpType op;
    int width;  // channels for CONV, output features for FC
  };
  TemplateId id = TemplateId::M1;
  std::vector<BlockSpec> blocks;
  int num_classes = 0;
};

// Four depths in increasing order; M1 is the shallowest, M4 the deepest.
// Width values are deliberately small so full federated runs finish quickly.
inline ArchTemplate make_template(TemplateId id, int num_classes, bool image_mode) {
  using B = ArchTemplate::BlockSpec;
  ArchTemplate t;
  t.id = id;
  t.num_classes = num_classes;
  if (image_mode) {
    switch (id) {
      case TemplateId::M1: t.blocks = {B{OpType::Conv, 8}, B{OpType::Fc, 64}}; break;
      case TemplateId::M2: t.blocks = {B{OpType::Conv, 8}, B{OpType::Conv, 16}, B{OpType::Fc, 64}}; break;
      case TemplateId::M3:
        t.blocks = {B{OpType::Conv, 8}, B{OpType::Conv, 16}, B{OpType::Conv, 32}, B{OpType::Fc, 64}};
        break;
      case TemplateId::M4:
        t.blocks = {B{OpType::Conv, 8}, B{OpType::Conv, 16}, B{OpType::Conv, 32}, B{OpType::Fc, 128},
                    B{OpType::Fc, 64}};
        break;
    }
  } else {
    switch (id) {
      case TemplateId::M1: t.blocks = {B{OpType::Fc, 48}, B{OpType::Fc, 32}, B{OpType::Fc, 16}}; break;
      case TemplateId::M2:
        t.blocks = {B{OpType::Fc, 64}, B{OpType::Fc, 48}, B{OpType::Fc, 32}, B{OpType::Fc, 16}};
        break;
      case TemplateId::M3:
        t.blocks = {B{OpType::Fc, 64}, B{OpType::Fc, 48}, B{OpType::Fc, 32}, B{OpType::Fc, 24},
                    B{OpType::Fc, 16}};
        break;
      case TemplateId::M4:
        t.blocks = {B{OpType::Fc, 80}, B{OpType::Fc, 64}, B{OpType::Fc, 48}, B{OpType::Fc, 32},
                    B{OpType::Fc, 24}, B{OpType::Fc, 16}};
        break;
    }
  }
  return t;
}

namespace detail {

template <typename S>
Tensor<S> he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor<S> t(std::move(shape));
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : t.data) v = static_cast<S>(std * rng.normal());
  return t;
}

}  // namespace detail

template <typename S = float>
LayerUnit<S> make_fc_unit(int d_in, int d_out, Rng& rng, double dropout = kDefaultDropout) {
  LayerUnit<S> u;
  u.kind = BlockKind::FcUnit;
  u.in_spec = {d_in};
  u.out_spec = {d_out};
  u.params.emplace("weight", detail::he_normal<S>({d_in, d_out}, d_in, rng));
  u.params.emplace("bias", Tensor<S>({d_out}));
  u.dropout_p = static_cast<S>(dropout);
  return u;
}

template <typename S = float>
LayerUnit<S> make_conv_unit(int c_in, int c_out, int h_in, int w_in, Rng& rng) {
  LayerUnit<S> u;
  u.kind = BlockKind::ConvUnit;
  u.in_spec = {c_in, h_in, w_in};
  u.out_spec = {c_out, h_in / 2, w_in / 2};
  u.params.emplace("weight", detail::he_normal<S>({c_out, c_in, 3, 3}, c_in * 9, rng));
  u.params.emplace("bias", Tensor<S>({c_out}));
  Tensor<S> gamma({c_out});
  for (auto& v : gamma.data) v = S(1);
  Tensor<S> var({c_out});
  for (auto& v : var.data) v = S(1);
  u.params.emplace("bn_gamma", std::move(gamma));
  u.params.emplace("bn_beta", Tensor<S>({c_out}));
  u.params.emplace("bn_mean", Tensor<S>({c_out}));
  u.params.emplace("bn_var", std::move(var));
  return u;
}

template <typename S = float>
LayerUnit<S> make_classifier(int d_in, int num_classes, Rng& rng) {
  LayerUnit<S> u;
  u.kind = BlockKind::Classifier;
  u.in_spec = {d_in};
  u.out_spec = {num_classes};
  u.params.emplace("weight", detail::he_normal<S>({d_in, num_classes}, d_in, rng));
  u.params.emplace("bias", Tensor<S>({num_classes}));
  return u;
}

// Fresh randomly initialized model; deterministic under (template, seed).
template <typename S = float>
ModelState<S> instantiate(const ArchTemplate& tmpl, std::uint64_t seed, const InputSpec& input,
                          int client_id = -1) {
  if (tmpl.blocks.empty()) throw UnknownTemplate("template has no blocks");
  if (tmpl.blocks.front().op == OpType::Conv && !input.is_image())
    throw ShapeMismatch("convolutional template requires an image input spec");

  Rng rng(seed);
  ModelState<S> model;
  int layer_index = 0;

  if (input.is_image()) {
    int c = input.dims[0], h = input.dims[1], w = input.dims[2];
    bool flattened = false;  // becomes true once an FC block is hit
    int flat = 0;
    for (const auto& blk : tmpl.blocks) {
      if (blk.op == OpType::Conv) {
        if (flattened) throw ShapeMismatch("CONV block after FC block is not supported");
        model.layers.push_back(make_conv_unit<S>(c, blk.width, h, w, rng));
        c = blk.width;
        h /= 2;
        w /= 2;
        if (h < 1 || w < 1) throw ShapeMismatch("input too small for template depth");
      } else {
        if (!flattened) {
          flat = c * h * w;
          flattened = true;
        }
        model.layers.push_back(make_fc_unit<S>(flat, blk.width, rng));
        flat = blk.width;
      }
      model.layers.back().origin = Provenance{client_id, layer_index++, ProvenanceKind::Client};
    }
    model.head = make_classifier<S>(flattened ? flat : c * h * w, tmpl.num_classes, rng);
  } else {
    int d = input.dims[0];
    for (const auto& blk : tmpl.blocks) {
      if (blk.op == OpType::Conv) throw ShapeMismatch("vector input cannot feed a CONV block");
      model.layers.push_back(make_fc_unit<S>(d, blk.width, rng));
      model.layers.back().origin = Provenance{client_id, layer_index++, ProvenanceKind::Client};
      d = blk.width;
    }
    model.head = make_classifier<S>(d, tmpl.num_classes, rng);
  }
  model.head.origin = Provenance{client_id, layer_index, ProvenanceKind::Client};
  return model;
}

// Balanced random assignment: the template list is repeated to cover all
// clients, then shuffled, so counts differ by at most one.
inline std::vector<TemplateId> assign_templates(int num_clients, const std::vector<TemplateId>& templates,
                                                std::uint64_t seed) {
  if (templates.empty()) throw EmptyTemplateList("assign_templates needs at least one template");
  std::vector<TemplateId> out;
  out.reserve(static_cast<std::size_t>(num_clients));
  for (int i = 0; i < num_clients; ++i)
    out.push_back(templates[static_cast<std::size_t>(i) % templates.size()]);
  Rng rng(seed);
  rng.shuffle(out);
  return out;
}

}  // namespace pfedhr
