#include <doctest.h>

#include <vector>

#include "pfedhr/archzoo.hpp"
#include "pfedhr/matching.hpp"

using namespace pfedhr;

namespace {

ModelState<float> head_only(const Tensor<float>& w, const Tensor<float>& b) {
  ModelState<float> m;
  m.head.kind = BlockKind::Classifier;
  m.head.in_spec = {w.dim(0)};
  m.head.out_spec = {w.dim(1)};
  m.head.params.emplace("weight", w);
  m.head.params.emplace("bias", b);
  return m;
}

PublicDataset<float> public_of(Tensor<float> features) {
  PublicDataset<float> pub;
  pub.labels.assign(static_cast<std::size_t>(features.dim(0)), 0);
  pub.features = std::move(features);
  pub.labeled = true;
  pub.num_classes = 2;
  return pub;
}

}  // namespace

TEST_CASE("a model is perfectly similar to itself") {
  Rng rng(1);
  auto m = instantiate<float>(make_template(TemplateId::M2, 4, false), 5, InputSpec{{8}});
  Tensor<float> x({16, 8});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  PublicDataset<float> pub = public_of(std::move(x));
  CHECK(model_similarity(m, m, pub) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("exactly opposite logits score -1") {
  Rng rng(2);
  Tensor<float> w({4, 3});
  Tensor<float> b({3});
  for (auto& v : w.data) v = static_cast<float>(rng.normal());
  for (auto& v : b.data) v = static_cast<float>(rng.normal());
  Tensor<float> wn = w, bn = b;
  for (auto& v : wn.data) v = -v;
  for (auto& v : bn.data) v = -v;
  auto pos = head_only(w, b);
  auto neg = head_only(wn, bn);
  Tensor<float> x({10, 4});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  CHECK(model_similarity(pos, neg, public_of(std::move(x))) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("similarity averages the per-sample cosines") {
  // identity model vs a hand-built one: cosines 0.6 and 1.0 -> mean 0.8
  Tensor<float> wi({2, 2}, {1, 0, 0, 1});
  Tensor<float> zero({2});
  auto ident = head_only(wi, zero);
  Tensor<float> wb({2, 2}, {0.6f, 0.8f, 0.0f, 2.0f});
  auto other = head_only(wb, zero);
  Tensor<float> x({2, 2}, {1, 0, 0, 1});
  CHECK(model_similarity(ident, other, public_of(std::move(x))) == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("class count mismatch is rejected") {
  Rng rng(3);
  auto a = instantiate<float>(make_template(TemplateId::M1, 4, false), 1, InputSpec{{8}});
  auto b = instantiate<float>(make_template(TemplateId::M1, 5, false), 1, InputSpec{{8}});
  Tensor<float> x({4, 8});
  CHECK_THROWS_AS(model_similarity(a, b, public_of(std::move(x))), ClassCountMismatch);
}

TEST_CASE("single candidate matches every client to index zero") {
  Rng rng(4);
  std::vector<ModelState<float>> clients;
  for (int i = 0; i < 3; ++i)
    clients.push_back(instantiate<float>(make_template(TemplateId::M1, 4, false),
                                         static_cast<std::uint64_t>(i + 10), InputSpec{{8}}));
  auto candidate = instantiate<float>(make_template(TemplateId::M3, 4, false), 77, InputSpec{{8}});
  Tensor<float> x({12, 8});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  PublicDataset<float> pub = public_of(std::move(x));

  std::vector<std::pair<int, const ModelState<float>*>> cu;
  for (std::size_t i = 0; i < clients.size(); ++i) cu.emplace_back(static_cast<int>(i), &clients[i]);
  auto results = match_clients<float>(cu, {&candidate}, pub);
  for (const auto& r : results) {
    CHECK(r.candidate_index == 0);
    CHECK(r.all_scores.size() == 1);
  }
}

TEST_CASE("a planted copy of the client wins the match with similarity 1") {
  Rng rng(5);
  auto client = instantiate<float>(make_template(TemplateId::M2, 4, false), 21, InputSpec{{8}});
  auto planted = client;  // bitwise copy
  auto decoy = instantiate<float>(make_template(TemplateId::M2, 4, false), 22, InputSpec{{8}});
  Tensor<float> x({20, 8});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  PublicDataset<float> pub = public_of(std::move(x));

  std::vector<std::pair<int, const ModelState<float>*>> cu{{0, &client}};
  auto results = match_clients<float>(cu, {&decoy, &planted}, pub);
  REQUIRE(results.size() == 1);
  CHECK(results[0].candidate_index == 1);
  CHECK(results[0].similarity == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("empty candidate lists fall back to SELF") {
  Rng rng(6);
  auto client = instantiate<float>(make_template(TemplateId::M1, 4, false), 31, InputSpec{{8}});
  Tensor<float> x({6, 8});
  PublicDataset<float> pub = public_of(std::move(x));
  std::vector<std::pair<int, const ModelState<float>*>> cu{{3, &client}};
  auto results = match_clients<float>(cu, {}, pub);
  REQUIRE(results.size() == 1);
  CHECK(results[0].candidate_index == kSelfMatch);
  CHECK(results[0].all_scores.empty());
}

TEST_CASE("argmax is invariant under positive rescaling of all logits") {
  Rng rng(7);
  auto client = instantiate<float>(make_template(TemplateId::M2, 4, false), 41, InputSpec{{8}});
  std::vector<ModelState<float>> candidates;
  for (int i = 0; i < 4; ++i)
    candidates.push_back(instantiate<float>(make_template(TemplateId::M3, 4, false),
                                            static_cast<std::uint64_t>(50 + i), InputSpec{{8}}));
  Tensor<float> x({24, 8});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  PublicDataset<float> pub = public_of(std::move(x));

  std::vector<std::pair<int, const ModelState<float>*>> cu{{0, &client}};
  std::vector<const ModelState<float>*> ptrs;
  for (auto& c : candidates) ptrs.push_back(&c);
  const auto before = match_clients<float>(cu, ptrs, pub);

  for (auto& c : candidates) {
    for (auto& v : c.head.param("weight").data) v *= 2.5f;
    for (auto& v : c.head.param("bias").data) v *= 2.5f;
  }
  const auto after = match_clients<float>(cu, ptrs, pub);
  CHECK(before[0].candidate_index == after[0].candidate_index);
  for (double s : after[0].all_scores) {
    CHECK(s >= -1.0 - 1e-6);
    CHECK(s <= 1.0 + 1e-6);
  }
}

TEST_CASE("matching is deterministic") {
  Rng rng(8);
  auto client = instantiate<float>(make_template(TemplateId::M1, 4, false), 61, InputSpec{{8}});
  auto cand = instantiate<float>(make_template(TemplateId::M4, 4, false), 62, InputSpec{{8}});
  Tensor<float> x({16, 8});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  PublicDataset<float> pub = public_of(std::move(x));
  std::vector<std::pair<int, const ModelState<float>*>> cu{{0, &client}};
  auto a = match_clients<float>(cu, {&cand}, pub);
  auto b = match_clients<float>(cu, {&cand}, pub);
  CHECK(a[0].similarity == b[0].similarity);
}
