#include <doctest.h>

#include <set>
#include <vector>

#include "oracles.hpp"
#include "pfedhr/orchestrator.hpp"
#include "pfedhr/report.hpp"

using namespace pfedhr;

namespace {

FedConfig tiny_config(RunMode mode, std::uint64_t seed = 5) {
  FedConfig cfg;
  cfg.num_clients = 6;
  cfg.active_per_round = 2;
  cfg.rounds = 2;
  cfg.local_epochs = 2;
  cfg.finetune_epochs = 1;
  cfg.mode = mode;
  cfg.seed = seed;
  return cfg;
}

LabeledDataset<float> tiny_data(std::uint64_t seed = 3) { return make_synthetic<float>(4, 480, 12, seed); }

}  // namespace

TEST_CASE("config validation catches bad field combinations") {
  FedConfig cfg;
  cfg.active_per_round = cfg.num_clients + 1;
  CHECK_THROWS_AS(validate(cfg), ConfigInvalid);
  cfg = FedConfig{};
  cfg.kd_lambda = -0.5;
  CHECK_THROWS_AS(validate(cfg), ConfigInvalid);
  cfg = FedConfig{};
  cfg.public_fraction = 0.9;
  CHECK_THROWS_AS(validate(cfg), ConfigInvalid);
  CHECK_NOTHROW(validate(FedConfig{}));
}

TEST_CASE("defaults follow the experimental protocol") {
  FedConfig cfg;
  CHECK(cfg.num_clients == 12);
  CHECK(cfg.active_per_round == 4);
  CHECK(cfg.clusters == 4);
  CHECK(cfg.local_epochs == 10);
  CHECK(cfg.finetune_epochs == 3);
  CHECK(cfg.public_fraction == doctest::Approx(0.10));
}

TEST_CASE("kl term vanishes when the teacher equals the local model") {
  // dropout-free twin so train-mode logits equal the frozen teacher's.
  Rng rng(4);
  ModelState<float> local;
  local.layers.push_back(make_fc_unit<float>(6, 8, rng, 0.0));
  local.head = make_classifier<float>(8, 3, rng);
  ModelState<float> teacher = local;

  Tensor<float> x({5, 6});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  local.set_mode(Mode::Train);
  Tensor<float> logits = forward(local, x);
  Tensor<float> teacher_logits = forward_eval(teacher, x);
  LossValue<float> kd = kl_divergence(logits, teacher_logits);
  CHECK(kd.value == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("combined objective equals ce plus lambda times kl by direct formula") {
  Rng rng(9);
  Tensor<float> logits({4, 2});
  Tensor<float> ref({4, 2});
  for (auto& v : logits.data) v = static_cast<float>(rng.normal());
  for (auto& v : ref.data) v = static_cast<float>(rng.normal());
  const std::vector<int> labels{0, 1, 1, 0};

  const double lambda = 1.0;
  const double combined = cross_entropy(logits, labels).value + lambda * kl_divergence(logits, ref).value;

  std::vector<std::vector<double>> lp(4, std::vector<double>(2)), lq(4, std::vector<double>(2));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 2; ++j) {
      lp[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = logits.at(i, j);
      lq[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = ref.at(i, j);
    }
  const double expected = oracles::direct_cross_entropy(lp, labels) + lambda * oracles::direct_kl(lp, lq);
  CHECK(combined == doctest::Approx(expected).epsilon(1e-5));

  // the client update distills with the teacher-first direction
  const double kd = distillation_kl(logits, ref).value;
  CHECK(kd == doctest::Approx(oracles::direct_kl(lq, lp)).epsilon(1e-5));
  CHECK(kd >= 0.0);
}

TEST_CASE("distillation gradient is the softmax gap") {
  Tensor<float> student({1, 3}, {0.2f, -0.4f, 1.0f});
  Tensor<float> teacher({1, 3}, {1.5f, 0.0f, -0.5f});
  LossValue<float> kd = distillation_kl(student, teacher);
  // analytic: softmax(student) - softmax(teacher)
  auto softmax = [](const Tensor<float>& z) {
    std::vector<double> p(3);
    double mx = std::max({z.at(0, 0), z.at(0, 1), z.at(0, 2)});
    double sum = 0;
    for (int k = 0; k < 3; ++k) sum += (p[static_cast<std::size_t>(k)] = std::exp(z.at(0, k) - mx));
    for (auto& v : p) v /= sum;
    return p;
  };
  const auto ps = softmax(student), pt = softmax(teacher);
  for (int k = 0; k < 3; ++k)
    CHECK(kd.grad.at(0, k) == doctest::Approx(ps[static_cast<std::size_t>(k)] - pt[static_cast<std::size_t>(k)]).epsilon(1e-5));
}

TEST_CASE("lambda zero reduces the client update to plain local training") {
  auto data = tiny_data();
  FedConfig cfg = tiny_config(RunMode::Pfedhr);
  cfg.kd_lambda = 0.0;

  auto plan = partition(data, 2, PartitionScheme::Iid, 0.1, 3);
  auto teacher = instantiate<float>(make_template(TemplateId::M3, 4, false), 99, InputSpec{{12}});

  ClientState<float> a;
  a.id = 0;
  a.tmpl = TemplateId::M1;
  a.model = instantiate<float>(make_template(TemplateId::M1, 4, false), 7, InputSpec{{12}}, 0);
  a.train_idx = plan.client_train[0];
  ClientState<float> b = a;

  client_update(a, &teacher, data, cfg, 1);
  client_update(b, static_cast<const ModelState<float>*>(nullptr), data, cfg, 1);
  CHECK(parameters_equal(a.model, b.model));
}

TEST_CASE("teacher with a different class count is rejected") {
  auto data = tiny_data();
  FedConfig cfg = tiny_config(RunMode::Pfedhr);
  auto plan = partition(data, 2, PartitionScheme::Iid, 0.1, 3);
  ClientState<float> c;
  c.id = 0;
  c.model = instantiate<float>(make_template(TemplateId::M1, 4, false), 7, InputSpec{{12}}, 0);
  c.train_idx = plan.client_train[0];
  auto teacher = instantiate<float>(make_template(TemplateId::M1, 5, false), 8, InputSpec{{12}});
  CHECK_THROWS_AS(client_update(c, &teacher, data, cfg, 1), ClassCountMismatch);
}

TEST_CASE("pre-averaging is idempotent, takes means and reduces per template") {
  auto m1 = instantiate<float>(make_template(TemplateId::M1, 4, false), 1, InputSpec{{12}});
  auto m2 = m1;
  std::vector<std::pair<TemplateId, const ModelState<float>*>> same{{TemplateId::M1, &m1},
                                                                    {TemplateId::M1, &m2}};
  auto avg = preaverage_same_structure(same);
  REQUIRE(avg.size() == 1);
  CHECK(parameters_equal(avg[0].second, m1));

  auto a = m1, b = m1;
  a.head.param("bias").data[0] = 1.0f;
  b.head.param("bias").data[0] = 3.0f;
  std::vector<std::pair<TemplateId, const ModelState<float>*>> two{{TemplateId::M1, &a},
                                                                   {TemplateId::M1, &b}};
  CHECK(preaverage_same_structure(two)[0].second.head.param("bias").data[0] == doctest::Approx(2.0f));

  std::vector<ModelState<float>> fleet;
  std::vector<std::pair<TemplateId, const ModelState<float>*>> ten;
  const TemplateId kinds[4] = {TemplateId::M1, TemplateId::M2, TemplateId::M3, TemplateId::M4};
  for (int i = 0; i < 10; ++i)
    fleet.push_back(instantiate<float>(make_template(kinds[i % 4], 4, false),
                                       static_cast<std::uint64_t>(i), InputSpec{{12}}));
  for (int i = 0; i < 10; ++i) ten.emplace_back(kinds[i % 4], &fleet[static_cast<std::size_t>(i)]);
  CHECK(preaverage_same_structure(ten).size() <= 4);
}

TEST_CASE("server update handles a single upload") {
  auto data = tiny_data();
  FedConfig cfg = tiny_config(RunMode::Pfedhr);
  cfg.clusters = 4;  // more than a 2-layer model carries; must clamp internally
  auto plan = partition(data, 2, PartitionScheme::Iid, 0.1, 3);
  auto pub = make_public(data, plan, true);
  auto model = instantiate<float>(make_template(TemplateId::M1, 4, false), 5, InputSpec{{12}}, 0);
  std::vector<std::pair<int, const ModelState<float>*>> uploads{{0, &model}};
  auto outcome = server_update(uploads, {TemplateId::M1}, pub, cfg, 1);
  REQUIRE(outcome.matches.size() == 1);
  CHECK((outcome.matches[0].candidate_index == kSelfMatch || outcome.matches[0].teacher != nullptr));
}

TEST_CASE("server update returns one personalized outcome per upload") {
  auto data = tiny_data();
  FedConfig cfg;
  cfg.seed = 11;
  auto plan = partition(data, 12, PartitionScheme::TwoClassNonIid, 0.1, 3);
  auto pub = make_public(data, plan, true);

  std::vector<ModelState<float>> fleet;
  const TemplateId kinds[4] = {TemplateId::M1, TemplateId::M2, TemplateId::M3, TemplateId::M4};
  for (int i = 0; i < 4; ++i)
    fleet.push_back(instantiate<float>(make_template(kinds[i], 4, false), static_cast<std::uint64_t>(i),
                                       InputSpec{{12}}, i));
  std::vector<std::pair<int, const ModelState<float>*>> uploads;
  std::vector<TemplateId> tags;
  for (int i = 0; i < 4; ++i) {
    uploads.emplace_back(i, &fleet[static_cast<std::size_t>(i)]);
    tags.push_back(kinds[i]);
  }
  auto outcome = server_update(uploads, tags, pub, cfg, 1);
  CHECK(outcome.matches.size() == 4);
  CHECK(outcome.num_candidates <= cfg.max_candidates);
  std::set<int> ids;
  for (const auto& m : outcome.matches) ids.insert(m.client_id);
  CHECK(ids == std::set<int>{0, 1, 2, 3});

  // every distributed teacher is stitched from this round's uploads
  for (const auto& m : outcome.matches) {
    if (!m.teacher) continue;
    for (const auto& unit : m.teacher->layers) {
      if (unit.origin.kind == ProvenanceKind::Stitch) continue;
      CHECK(unit.origin.kind == ProvenanceKind::Client);
      CHECK(ids.count(unit.origin.client_id) == 1);
    }
  }
}

TEST_CASE("large active sets are pre-averaged per structure before decomposition") {
  auto data = tiny_data();
  FedConfig cfg;
  cfg.seed = 13;
  cfg.num_clients = 10;
  cfg.active_per_round = 10;  // > 8 forces the pre-average path
  auto plan = partition(data, 10, PartitionScheme::Iid, 0.1, 3);
  auto pub = make_public(data, plan, true);

  const TemplateId kinds[4] = {TemplateId::M1, TemplateId::M2, TemplateId::M3, TemplateId::M4};
  std::vector<ModelState<float>> fleet;
  std::vector<std::pair<int, const ModelState<float>*>> uploads;
  std::vector<TemplateId> tags;
  for (int i = 0; i < 10; ++i)
    fleet.push_back(instantiate<float>(make_template(kinds[i % 4], 4, false),
                                       static_cast<std::uint64_t>(i), InputSpec{{12}}, i));
  for (int i = 0; i < 10; ++i) {
    uploads.emplace_back(i, &fleet[static_cast<std::size_t>(i)]);
    tags.push_back(kinds[i % 4]);
  }
  auto outcome = server_update(uploads, tags, pub, cfg, 1);
  CHECK(outcome.matches.size() == 10);  // every uploader still gets a match decision
  for (const auto& m : outcome.matches) {
    if (!m.teacher) continue;
    for (const auto& unit : m.teacher->layers)
      if (unit.origin.kind != ProvenanceKind::Stitch)
        CHECK(unit.origin.kind == ProvenanceKind::Averaged);  // donors come from averaged models
  }
}

TEST_CASE("local-only runs never touch the server path") {
  auto reports = run_experiment(tiny_config(RunMode::LocalOnly), tiny_data());
  for (const auto& r : reports) {
    CHECK(r.num_candidates == 0);
    for (const auto& c : r.clients) CHECK(!c.matched);
  }
}

TEST_CASE("zero rounds produce an empty report list") {
  FedConfig cfg = tiny_config(RunMode::Pfedhr);
  cfg.rounds = 0;
  CHECK(run_experiment(cfg, tiny_data()).empty());
}

TEST_CASE("reruns with one seed are bitwise identical") {
  FedConfig cfg = tiny_config(RunMode::Pfedhr, 19);
  auto a = run_experiment(cfg, tiny_data());
  auto b = run_experiment(cfg, tiny_data());
  REQUIRE(a.size() == b.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    CHECK(a[t].mean_accuracy == b[t].mean_accuracy);
    CHECK(a[t].std_accuracy == b[t].std_accuracy);
    CHECK(a[t].num_candidates == b[t].num_candidates);
    for (std::size_t c = 0; c < a[t].clients.size(); ++c) {
      CHECK(a[t].clients[c].test_accuracy == b[t].clients[c].test_accuracy);
      CHECK(a[t].clients[c].train_loss == b[t].clients[c].train_loss);
    }
  }
}

TEST_CASE("unselected clients keep their exact state across a round") {
  FedConfig cfg = tiny_config(RunMode::Pfedhr, 23);
  auto sim = make_simulation(cfg, tiny_data());
  std::vector<ModelState<float>> before;
  for (const auto& c : sim.clients) before.push_back(c.model);

  RoundReport report = run_round(sim, 1);
  for (int i = 0; i < cfg.num_clients; ++i) {
    if (report.clients[static_cast<std::size_t>(i)].trained) continue;
    CHECK(parameters_equal(sim.clients[static_cast<std::size_t>(i)].model,
                           before[static_cast<std::size_t>(i)]));
  }
}

TEST_CASE("fedavg per-structure accuracy trends upward on iid data") {
  FedConfig cfg;
  cfg.mode = RunMode::FedavgPerStructure;
  cfg.scheme = PartitionScheme::Iid;
  cfg.num_clients = 8;
  cfg.active_per_round = 4;
  cfg.rounds = 20;
  cfg.local_epochs = 2;
  cfg.seed = 29;
  auto reports = run_experiment(cfg, make_synthetic<float>(4, 960, 12, 31));
  CHECK(reports.back().mean_accuracy >= reports.front().mean_accuracy);
  CHECK(reports.back().mean_accuracy > 0.5);
}

TEST_CASE("an image-mode federated round runs end to end") {
  LabeledDataset<float> ds;
  const int n = 160;
  ds.features = Tensor<float>({n, 1, 8, 8});
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.num_classes = 4;
  Rng rng(7);
  for (int i = 0; i < n; ++i) {
    const int c = i % 4;
    ds.labels[static_cast<std::size_t>(i)] = c;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        ds.features.at(i, 0, y, x) =
            static_cast<float>(0.25 * ((y / 2 + x / 2 + c) % 4) + 0.1 * rng.normal());
  }

  FedConfig cfg;
  cfg.num_clients = 4;
  cfg.active_per_round = 4;
  cfg.rounds = 1;
  cfg.local_epochs = 1;
  cfg.finetune_epochs = 1;
  cfg.scheme = PartitionScheme::Iid;
  cfg.seed = 21;
  auto reports = run_experiment(cfg, std::move(ds));
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].clients.size() == 4);
  for (const auto& c : reports[0].clients) {
    CHECK(c.test_accuracy >= 0.0);
    CHECK(c.test_accuracy <= 1.0);
  }
}

TEST_CASE("manifest round-trips through json") {
  RunManifest m;
  m.config.kd_lambda = 0.25;
  m.config.mode = RunMode::FedavgPerStructure;
  m.config.scheme = PartitionScheme::Iid;
  m.dataset.n = 777;
  m.out_dir = "/tmp/pfedhr_mtest";
  save_manifest(m, "/tmp/pfedhr_manifest.json");
  RunManifest back = load_manifest("/tmp/pfedhr_manifest.json");
  CHECK(back.config.kd_lambda == doctest::Approx(0.25));
  CHECK(back.config.mode == RunMode::FedavgPerStructure);
  CHECK(back.config.scheme == PartitionScheme::Iid);
  CHECK(back.dataset.n == 777);
  CHECK(back.out_dir == "/tmp/pfedhr_mtest");
}

TEST_CASE("run artifacts land in the output directory") {
  RunManifest m;
  m.config = tiny_config(RunMode::Pfedhr, 37);
  m.dataset.n = 480;
  m.dataset.dim = 12;
  m.out_dir = "/tmp/pfedhr_artifacts";
  auto reports = run_and_write(m);
  CHECK(!reports.empty());
  CHECK(std::filesystem::exists("/tmp/pfedhr_artifacts/manifest.json"));
  CHECK(std::filesystem::exists("/tmp/pfedhr_artifacts/rounds.jsonl"));
  CHECK(std::filesystem::exists("/tmp/pfedhr_artifacts/summary.csv"));
  CHECK(std::filesystem::exists("/tmp/pfedhr_artifacts/candidates.txt"));
}
