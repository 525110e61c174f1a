#pragma once

#include <chrono>
#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pfedhr/archzoo.hpp"
#include "pfedhr/data.hpp"
#include "pfedhr/losses.hpp"
#include "pfedhr/matching.hpp"
#include "pfedhr/model.hpp"
#include "pfedhr/reassembly.hpp"
#include "pfedhr/stitching.hpp"

namespace pfedhr {

enum class RunMode : std::uint8_t { Pfedhr = 0, LocalOnly = 1, FedavgPerStructure = 2 };

inline const char* run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::Pfedhr: return "PFEDHR";
    case RunMode::LocalOnly: return "LOCAL_ONLY";
    case RunMode::FedavgPerStructure: return "FEDAVG_PER_STRUCTURE";
  }
  return "?";
}

inline RunMode run_mode_by_name(const std::string& s) {
  if (s == "PFEDHR" || s == "pfedhr") return RunMode::Pfedhr;
  if (s == "LOCAL_ONLY" || s == "local_only") return RunMode::LocalOnly;
  if (s == "FEDAVG_PER_STRUCTURE" || s == "fedavg_per_structure") return RunMode::FedavgPerStructure;
  throw ConfigInvalid("unknown mode: " + s);
}

struct FedConfig {
  int num_clients = 12;
  int active_per_round = 4;
  int rounds = 20;
  int clusters = 4;
  int local_epochs = 10;
  int finetune_epochs = 3;
  double kd_lambda = 1.0;
  bool labeled_public = true;
  int stitch_depth = 1;
  int max_candidates = 32;
  double public_fraction = 0.10;
  std::uint64_t seed = 1;
  RunMode mode = RunMode::Pfedhr;
  bool large_n_preaverage = false;  // forced on when active_per_round > 8
  PartitionScheme scheme = PartitionScheme::TwoClassNonIid;
  std::string similarity = "cosine";
  double lr = 0.01;
  double finetune_lr = 0.05;  // hotter than lr: fresh stitch heads train from scratch here
  double momentum = 0.9;
  int batch_size = 32;
  int finetune_batch_size = 8;
  int cka_probe_samples = 256;
};

inline void validate(const FedConfig& cfg) {
  if (cfg.num_clients < 1) throw ConfigInvalid("num_clients must be >= 1");
  if (cfg.active_per_round < 1 || cfg.active_per_round > cfg.num_clients)
    throw ConfigInvalid("active_per_round must lie in [1, num_clients]");
  if (cfg.rounds < 0) throw ConfigInvalid("rounds must be >= 0");
  if (cfg.clusters < 1) throw ConfigInvalid("clusters must be >= 1");
  if (cfg.local_epochs < 0 || cfg.finetune_epochs < 0) throw ConfigInvalid("epoch counts must be >= 0");
  if (cfg.kd_lambda < 0) throw ConfigInvalid("kd_lambda must be >= 0");
  if (cfg.stitch_depth < 1 || cfg.stitch_depth > 3) throw ConfigInvalid("stitch_depth must be 1, 2 or 3");
  if (cfg.max_candidates < 1) throw ConfigInvalid("max_candidates must be >= 1");
  if (cfg.public_fraction < 0.0 || cfg.public_fraction > 0.5)
    throw ConfigInvalid("public_fraction must lie in [0, 0.5]");
  if (cfg.similarity != "cosine") throw ConfigInvalid("only cosine similarity is implemented");
  if (cfg.lr <= 0.0 || cfg.finetune_lr <= 0.0) throw ConfigInvalid("learning rates must be > 0");
  if (cfg.batch_size < 1 || cfg.finetune_batch_size < 1) throw ConfigInvalid("batch sizes must be >= 1");
}

template <typename S = float>
struct ClientState {
  int id = -1;
  TemplateId tmpl = TemplateId::M1;
  ModelState<S> model;
  std::vector<int> train_idx;
  std::vector<int> test_idx;
};

// ---------------------------------------------------------------------------
// Client update (local training with knowledge distillation)

// Trains the local model for local_epochs on its private data, minimizing
// CE(local(x), y) + lambda * KL(local logits, teacher logits). The teacher
// stays frozen in eval mode; with lambda == 0 or no teacher this is exactly
// plain local cross-entropy training. Returns the mean loss of the last epoch.
template <typename S>
double client_update(ClientState<S>& client, const ModelState<S>* teacher, const LabeledDataset<S>& data,
                     const FedConfig& cfg, int round) {
  if (teacher && teacher->num_classes() != client.model.num_classes())
    throw ClassCountMismatch("personalized model emits a different class count");

  const bool distill = teacher != nullptr && cfg.kd_lambda > 0.0;
  Rng order_rng(mix_seed(cfg.seed, seed_tag::kLocal, static_cast<std::uint64_t>(round),
                         static_cast<std::uint64_t>(client.id)));
  client.model.set_mode(Mode::Train);
  client.model.reseed(order_rng.next_u64());
  const SgdConfig<S> sgd{static_cast<S>(cfg.lr), static_cast<S>(cfg.momentum)};

  std::vector<int> order = client.train_idx;
  double last_epoch_loss = 0.0;
  for (int e = 0; e < cfg.local_epochs; ++e) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> rows(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(stop));
      Tensor<S> x = gather_rows(data.features, rows);
      std::vector<int> y;
      y.reserve(rows.size());
      for (int r : rows) y.push_back(data.labels[static_cast<std::size_t>(r)]);

      Tensor<S> logits = forward(client.model, x);
      LossValue<S> ce = cross_entropy(logits, y);
      double loss_value = ce.value;
      Tensor<S> grad = std::move(ce.grad);
      if (distill) {
        Tensor<S> teacher_logits = forward_eval(*teacher, x);
        LossValue<S> kd = distillation_kl(logits, teacher_logits);
        loss_value += cfg.kd_lambda * kd.value;
        for (std::size_t i = 0; i < grad.data.size(); ++i)
          grad.data[i] += static_cast<S>(cfg.kd_lambda) * kd.grad.data[i];
      }
      backward_and_step(client.model, grad, sgd);
      epoch_loss += loss_value;
      ++batches;
    }
    last_epoch_loss = batches ? epoch_loss / batches : 0.0;
  }
  client.model.set_mode(Mode::Eval);
  return last_epoch_loss;
}

template <typename S>
double evaluate_accuracy(const ModelState<S>& model, const LabeledDataset<S>& data,
                         const std::vector<int>& idx, int chunk = 128) {
  if (idx.empty()) return 0.0;
  int correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t stop = std::min(idx.size(), start + static_cast<std::size_t>(chunk));
    std::vector<int> rows(idx.begin() + static_cast<long>(start), idx.begin() + static_cast<long>(stop));
    Tensor<S> x = gather_rows(data.features, rows);
    Tensor<S> logits = forward_eval(model, x);
    const int c = logits.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      int arg = 0;
      for (int k = 1; k < c; ++k)
        if (logits.at(static_cast<int>(i), k) > logits.at(static_cast<int>(i), arg)) arg = k;
      if (arg == data.labels[static_cast<std::size_t>(rows[i])]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// ---------------------------------------------------------------------------
// Pre-averaging for large active sets

// Parameter-wise unweighted mean of uploads sharing a template; the reduced
// set has one model per distinct template, tagged AVERAGED.
template <typename S>
std::vector<std::pair<TemplateId, ModelState<S>>> preaverage_same_structure(
    const std::vector<std::pair<TemplateId, const ModelState<S>*>>& uploads) {
  std::vector<std::pair<TemplateId, ModelState<S>>> out;
  std::map<TemplateId, std::vector<const ModelState<S>*>> by_template;
  for (const auto& [tmpl, model] : uploads) by_template[tmpl].push_back(model);

  for (auto& [tmpl, group] : by_template) {
    ModelState<S> mean = *group.front();
    auto add_unit = [](LayerUnit<S>& acc, const LayerUnit<S>& other) {
      for (auto& [name, t] : acc.params) {
        const Tensor<S>& o = other.params.at(name);
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += o.data[i];
      }
    };
    for (std::size_t g = 1; g < group.size(); ++g) {
      for (std::size_t l = 0; l < mean.layers.size(); ++l) add_unit(mean.layers[l], group[g]->layers[l]);
      add_unit(mean.head, group[g]->head);
    }
    const S inv = S(1) / static_cast<S>(group.size());
    auto scale_unit = [inv](LayerUnit<S>& u) {
      for (auto& [name, t] : u.params)
        for (auto& v : t.data) v *= inv;
      u.grads.clear();
      u.velocity.clear();
    };
    for (auto& u : mean.layers) scale_unit(u);
    scale_unit(mean.head);
    out.emplace_back(tmpl, std::move(mean));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Server update

template <typename S = float>
struct PersonalizedOutcome {
  int client_id = -1;
  int candidate_index = kSelfMatch;
  double similarity = 0.0;
  std::vector<double> all_scores;
  std::shared_ptr<const ModelState<S>> teacher;  // null on SELF fallback
  std::string structure_dump;
};

template <typename S = float>
struct ServerOutcome {
  std::vector<PersonalizedOutcome<S>> matches;
  int num_candidates = 0;
  std::vector<std::string> candidate_dumps;
};

// One full server pass: decompose (optionally pre-averaged) uploads, group
// layers by functional distance, search rule-compliant reassembly candidates,
// stitch and finetune them, finetune client copies, and match every client to
// its most similar candidate.
template <typename S>
ServerOutcome<S> server_update(const std::vector<std::pair<int, const ModelState<S>*>>& uploads,
                               const std::vector<TemplateId>& upload_templates,
                               const PublicDataset<S>& pub, const FedConfig& cfg, int round) {
  if (uploads.empty()) throw EmptyUpload("server_update requires uploads");

  ServerOutcome<S> outcome;
  auto self_fallback = [&]() {
    for (const auto& [id, model] : uploads) {
      PersonalizedOutcome<S> p;
      p.client_id = id;
      p.similarity = 1.0;
      outcome.matches.push_back(std::move(p));
    }
    return outcome;
  };
  // Layer grouping needs at least two probe samples.
  if (pub.size() < 2) return self_fallback();

  const bool preaverage = cfg.large_n_preaverage || cfg.active_per_round > 8;
  std::vector<std::pair<TemplateId, ModelState<S>>> averaged;
  std::vector<std::pair<int, const ModelState<S>*>> working;
  if (preaverage) {
    std::vector<std::pair<TemplateId, const ModelState<S>*>> tagged;
    for (std::size_t i = 0; i < uploads.size(); ++i) tagged.emplace_back(upload_templates[i], uploads[i].second);
    averaged = preaverage_same_structure(tagged);
    for (std::size_t i = 0; i < averaged.size(); ++i) {
      for (std::size_t l = 0; l < averaged[i].second.layers.size(); ++l)
        averaged[i].second.layers[l].origin =
            Provenance{static_cast<int>(i), static_cast<int>(l), ProvenanceKind::Averaged};
      working.emplace_back(static_cast<int>(i), &averaged[i].second);
    }
  } else {
    working = uploads;
  }

  auto decomposed = decompose(working);
  auto store = LayerStore<S>::from_decomposition(decomposed);

  // Fixed probe batch for the round.
  Rng probe_rng(mix_seed(cfg.seed, seed_tag::kProbe, static_cast<std::uint64_t>(round)));
  const int probe_n = std::min(cfg.cka_probe_samples, pub.size());
  Tensor<S> probe = gather_rows(pub.features, probe_rng.sample_without_replacement(pub.size(), probe_n));

  const std::vector<double> dist = build_distance_matrix(decomposed, probe);
  std::vector<LayerRef> refs;
  refs.reserve(decomposed.size());
  for (const auto& dl : decomposed) refs.push_back(dl.ref);

  // A tiny upload set can carry fewer layers than the configured cluster count.
  const int k_eff = std::min<int>(cfg.clusters, static_cast<int>(refs.size()));
  LayerClustering clustering =
      group_layers(refs, dist, k_eff, mix_seed(cfg.seed, seed_tag::kCluster, static_cast<std::uint64_t>(round)));

  std::set<OpType> op_set;
  for (const auto& r : refs) op_set.insert(r.op);
  std::vector<CandidateBlueprint> blueprints =
      search_candidates(clustering, op_set, SearchLimits{cfg.max_candidates});

  const std::vector<int> input_spec = sample_dims(pub.features.shape);
  FinetuneConfig<S> ft;
  ft.batch_size = cfg.finetune_batch_size;
  ft.sgd = SgdConfig<S>{static_cast<S>(cfg.finetune_lr), static_cast<S>(cfg.momentum)};

  std::vector<std::shared_ptr<StitchedModel<S>>> candidates;
  for (std::size_t m = 0; m < blueprints.size(); ++m) {
    StitchOptions opts;
    opts.depth = cfg.stitch_depth;
    opts.seed = mix_seed(cfg.seed, seed_tag::kStitch, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(m));
    opts.input_spec = &input_spec;
    auto sm = std::make_shared<StitchedModel<S>>(stitch(blueprints[m], store, pub.num_classes, opts));
    finetune(sm->model, pub, cfg.finetune_epochs, cfg.labeled_public, ft,
             mix_seed(cfg.seed, seed_tag::kFinetune, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(m)));
    candidates.push_back(std::move(sm));
    outcome.candidate_dumps.push_back(dump_blueprint(blueprints[m]));
  }
  outcome.num_candidates = static_cast<int>(candidates.size());

  // Matching runs on finetuned copies; the authoritative uploads stay intact.
  // The copies get the client rate: they are already trained models that only
  // need calibrating to the public data, unlike the candidates whose fresh
  // heads have to be fitted from scratch.
  FinetuneConfig<S> ft_copy = ft;
  ft_copy.sgd = SgdConfig<S>{static_cast<S>(cfg.lr), static_cast<S>(cfg.momentum)};
  std::vector<ModelState<S>> client_copies;
  client_copies.reserve(uploads.size());
  for (const auto& [id, model] : uploads) {
    ModelState<S> copy = *model;
    finetune(copy, pub, cfg.finetune_epochs, cfg.labeled_public, ft_copy,
             mix_seed(cfg.seed, seed_tag::kFinetuneClient, static_cast<std::uint64_t>(round),
                      static_cast<std::uint64_t>(id)));
    client_copies.push_back(std::move(copy));
  }

  std::vector<std::pair<int, const ModelState<S>*>> finetuned_clients;
  for (std::size_t i = 0; i < uploads.size(); ++i)
    finetuned_clients.emplace_back(uploads[i].first, &client_copies[i]);
  std::vector<const ModelState<S>*> candidate_ptrs;
  for (const auto& c : candidates) candidate_ptrs.push_back(&c->model);

  std::vector<MatchResult> matches = match_clients(finetuned_clients, candidate_ptrs, pub);
  for (const auto& mr : matches) {
    PersonalizedOutcome<S> p;
    p.client_id = mr.client_id;
    p.candidate_index = mr.candidate_index;
    p.similarity = mr.similarity;
    p.all_scores = mr.all_scores;
    if (mr.candidate_index != kSelfMatch) {
      auto& sm = candidates[static_cast<std::size_t>(mr.candidate_index)];
      p.teacher = std::shared_ptr<const ModelState<S>>(sm, &sm->model);
      p.structure_dump = outcome.candidate_dumps[static_cast<std::size_t>(mr.candidate_index)];
    }
    outcome.matches.push_back(std::move(p));
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// Experiment driver

struct ClientRoundMetric {
  int client_id = -1;
  double test_accuracy = 0.0;
  double train_loss = 0.0;
  bool trained = false;
  bool matched = false;
  int candidate_index = kSelfMatch;
  double similarity = 0.0;
  std::string matched_structure;  // dump of the matched candidate, empty on SELF
};

struct RoundReport {
  int round = 0;
  std::vector<ClientRoundMetric> clients;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  int num_candidates = 0;
  long long wall_ms = 0;
  std::vector<std::string> candidate_dumps;
};

template <typename S = float>
struct Simulation {
  FedConfig cfg;
  LabeledDataset<S> dataset;
  PartitionPlan plan;
  PublicDataset<S> pub;
  std::vector<ClientState<S>> clients;
  std::vector<TemplateId> assignment;
  std::map<TemplateId, ModelState<S>> fedavg_globals;
  std::vector<std::shared_ptr<const ModelState<S>>> teachers;
};

// Builds clients, partition and public data. When `public_override` is given
// it replaces the carved-out public share (cross-dataset experiments).
template <typename S>
Simulation<S> make_simulation(const FedConfig& cfg, LabeledDataset<S> dataset,
                              const PublicDataset<S>* public_override = nullptr) {
  validate(cfg);
  Simulation<S> sim;
  sim.cfg = cfg;
  sim.dataset = std::move(dataset);
  sim.plan = partition(sim.dataset, cfg.num_clients, cfg.scheme, cfg.public_fraction,
                       mix_seed(cfg.seed, seed_tag::kPartition));
  sim.pub = public_override ? *public_override : make_public(sim.dataset, sim.plan, cfg.labeled_public);
  sim.pub.labeled = cfg.labeled_public;

  const InputSpec spec = sim.dataset.input_spec();
  const std::vector<TemplateId> all{TemplateId::M1, TemplateId::M2, TemplateId::M3, TemplateId::M4};
  sim.assignment = assign_templates(cfg.num_clients, all, mix_seed(cfg.seed, seed_tag::kAssign));

  sim.clients.resize(static_cast<std::size_t>(cfg.num_clients));
  for (int i = 0; i < cfg.num_clients; ++i) {
    ClientState<S>& c = sim.clients[static_cast<std::size_t>(i)];
    c.id = i;
    c.tmpl = sim.assignment[static_cast<std::size_t>(i)];
    c.model = instantiate<S>(make_template(c.tmpl, sim.dataset.num_classes, spec.is_image()),
                             mix_seed(cfg.seed, seed_tag::kInit, static_cast<std::uint64_t>(i)), spec, i);
    c.train_idx = sim.plan.client_train[static_cast<std::size_t>(i)];
    c.test_idx = sim.plan.client_test[static_cast<std::size_t>(i)];
  }
  if (cfg.mode == RunMode::FedavgPerStructure) {
    for (const TemplateId t : all)
      sim.fedavg_globals.emplace(
          t, instantiate<S>(make_template(t, sim.dataset.num_classes, spec.is_image()),
                            mix_seed(cfg.seed, seed_tag::kGlobalInit, static_cast<std::uint64_t>(t)), spec));
  }
  sim.teachers.assign(static_cast<std::size_t>(cfg.num_clients), nullptr);
  return sim;
}

template <typename S>
RoundReport run_round(Simulation<S>& sim, int round) {
  const auto t0 = std::chrono::steady_clock::now();
  const FedConfig& cfg = sim.cfg;
  RoundReport report;
  report.round = round;
  report.clients.resize(static_cast<std::size_t>(cfg.num_clients));
  for (int i = 0; i < cfg.num_clients; ++i) report.clients[static_cast<std::size_t>(i)].client_id = i;

  Rng sample_rng(mix_seed(cfg.seed, seed_tag::kSample, static_cast<std::uint64_t>(round)));
  std::vector<int> selected = sample_rng.sample_without_replacement(cfg.num_clients, cfg.active_per_round);
  std::sort(selected.begin(), selected.end());

  if (cfg.mode == RunMode::FedavgPerStructure) {
    for (int id : selected) {
      ClientState<S>& c = sim.clients[static_cast<std::size_t>(id)];
      c.model = sim.fedavg_globals.at(c.tmpl);  // download current per-structure global
      report.clients[static_cast<std::size_t>(id)].train_loss =
          client_update(c, static_cast<const ModelState<S>*>(nullptr), sim.dataset, cfg, round);
      report.clients[static_cast<std::size_t>(id)].trained = true;
    }
    std::vector<std::pair<TemplateId, const ModelState<S>*>> tagged;
    for (int id : selected)
      tagged.emplace_back(sim.clients[static_cast<std::size_t>(id)].tmpl, &sim.clients[static_cast<std::size_t>(id)].model);
    for (auto& [tmpl, mean] : preaverage_same_structure(tagged)) sim.fedavg_globals.at(tmpl) = std::move(mean);
  } else {
    for (int id : selected) {
      ClientState<S>& c = sim.clients[static_cast<std::size_t>(id)];
      const ModelState<S>* teacher =
          cfg.mode == RunMode::Pfedhr ? sim.teachers[static_cast<std::size_t>(id)].get() : nullptr;
      report.clients[static_cast<std::size_t>(id)].train_loss = client_update(c, teacher, sim.dataset, cfg, round);
      report.clients[static_cast<std::size_t>(id)].trained = true;
    }
    if (cfg.mode == RunMode::Pfedhr) {
      std::vector<std::pair<int, const ModelState<S>*>> uploads;
      std::vector<TemplateId> templates;
      for (int id : selected) {
        uploads.emplace_back(id, &sim.clients[static_cast<std::size_t>(id)].model);
        templates.push_back(sim.clients[static_cast<std::size_t>(id)].tmpl);
      }
      ServerOutcome<S> server = server_update(uploads, templates, sim.pub, cfg, round);
      report.num_candidates = server.num_candidates;
      report.candidate_dumps = std::move(server.candidate_dumps);
      for (auto& match : server.matches) {
        auto& metric = report.clients[static_cast<std::size_t>(match.client_id)];
        metric.matched = true;
        metric.candidate_index = match.candidate_index;
        metric.similarity = match.similarity;
        metric.matched_structure = match.structure_dump;
        sim.teachers[static_cast<std::size_t>(match.client_id)] = match.teacher;
      }
    }
  }

  double mean = 0.0;
  for (int i = 0; i < cfg.num_clients; ++i) {
    const ClientState<S>& c = sim.clients[static_cast<std::size_t>(i)];
    const ModelState<S>& eval_model =
        cfg.mode == RunMode::FedavgPerStructure ? sim.fedavg_globals.at(c.tmpl) : c.model;
    const double acc = evaluate_accuracy(eval_model, sim.dataset, c.test_idx);
    report.clients[static_cast<std::size_t>(i)].test_accuracy = acc;
    mean += acc;
  }
  mean /= cfg.num_clients;
  double var = 0.0;
  for (const auto& m : report.clients) var += (m.test_accuracy - mean) * (m.test_accuracy - mean);
  report.mean_accuracy = mean;
  report.std_accuracy = std::sqrt(var / cfg.num_clients);
  report.wall_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// T federated rounds; round t samples its active set under a round-derived
// seed, and a personalized model reaches a client the next time it is selected.
template <typename S>
std::vector<RoundReport> run_experiment(const FedConfig& cfg, LabeledDataset<S> dataset,
                                        const PublicDataset<S>* public_override = nullptr) {
  Simulation<S> sim = make_simulation(cfg, std::move(dataset), public_override);
  std::vector<RoundReport> reports;
  reports.reserve(static_cast<std::size_t>(cfg.rounds));
  for (int t = 1; t <= cfg.rounds; ++t) reports.push_back(run_round(sim, t));
  return reports;
}

}  // namespace pfedhr
