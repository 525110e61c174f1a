#include <doctest.h>

#include <map>

#include "pfedhr/archzoo.hpp"

using namespace pfedhr;

TEST_CASE("image-mode M1 is conv(8) + fc(64) plus a head") {
  auto m = instantiate<float>(make_template(TemplateId::M1, 10, true), 1, InputSpec{{1, 28, 28}});
  REQUIRE(m.layers.size() == 2);
  CHECK(m.layers[0].kind == BlockKind::ConvUnit);
  CHECK(m.layers[0].out_spec == std::vector<int>{8, 14, 14});
  CHECK(m.layers[1].kind == BlockKind::FcUnit);
  CHECK(m.layers[1].out_spec == std::vector<int>{64});
  CHECK(m.head.out_spec == std::vector<int>{10});
}

TEST_CASE("image-mode M4 is conv(8,16,32) + fc(128,64) plus a head") {
  auto m = instantiate<float>(make_template(TemplateId::M4, 10, true), 1, InputSpec{{1, 28, 28}});
  REQUIRE(m.layers.size() == 5);
  CHECK(m.layers[0].out_spec[0] == 8);
  CHECK(m.layers[1].out_spec[0] == 16);
  CHECK(m.layers[2].out_spec[0] == 32);
  CHECK(m.layers[3].out_spec == std::vector<int>{128});
  CHECK(m.layers[4].out_spec == std::vector<int>{64});
}

TEST_CASE("template depths increase from M1 to M4 in both modes") {
  for (bool image : {false, true}) {
    std::size_t prev = 0;
    for (TemplateId id : {TemplateId::M1, TemplateId::M2, TemplateId::M3, TemplateId::M4}) {
      const auto t = make_template(id, 4, image);
      CHECK(t.blocks.size() > prev);
      prev = t.blocks.size();
    }
  }
}

TEST_CASE("instantiation is pure in template, seed and input spec") {
  const auto t = make_template(TemplateId::M3, 4, false);
  auto a = instantiate<float>(t, 99, InputSpec{{16}});
  auto b = instantiate<float>(t, 99, InputSpec{{16}});
  CHECK(parameters_equal(a, b));
  auto c = instantiate<float>(t, 100, InputSpec{{16}});
  CHECK(!parameters_equal(a, c));
}

TEST_CASE("every template produces (batch, classes) logits") {
  for (bool image : {false, true}) {
    const InputSpec spec = image ? InputSpec{{1, 16, 16}} : InputSpec{{16}};
    for (TemplateId id : {TemplateId::M1, TemplateId::M2, TemplateId::M3, TemplateId::M4}) {
      auto m = instantiate<float>(make_template(id, 5, image), 7, spec);
      Tensor<float> x(image ? std::vector<int>{3, 1, 16, 16} : std::vector<int>{3, 16});
      Rng rng(2);
      for (auto& v : x.data) v = static_cast<float>(rng.uniform());
      Tensor<float> logits = forward_eval(m, x);
      CHECK(logits.shape == std::vector<int>{3, 5});
      CHECK(logits.all_finite());
    }
  }
}

TEST_CASE("template assignment balances counts") {
  const std::vector<TemplateId> all{TemplateId::M1, TemplateId::M2, TemplateId::M3, TemplateId::M4};

  auto count = [](const std::vector<TemplateId>& assign) {
    std::map<TemplateId, int> c;
    for (TemplateId t : assign) ++c[t];
    return c;
  };

  auto twelve = count(assign_templates(12, all, 3));
  for (const auto& [t, n] : twelve) CHECK(n == 3);

  auto four = count(assign_templates(4, all, 3));
  CHECK(four.size() == 4);
  for (const auto& [t, n] : four) CHECK(n == 1);

  auto hundred = count(assign_templates(100, all, 3));
  for (const auto& [t, n] : hundred) CHECK(n == 25);
}

TEST_CASE("assignment requires a non-empty template list") {
  CHECK_THROWS_AS(assign_templates(4, {}, 1), EmptyTemplateList);
}

TEST_CASE("unknown template names are rejected") {
  CHECK_THROWS_AS(template_by_name("M9"), UnknownTemplate);
  CHECK(template_by_name("M2") == TemplateId::M2);
}
