#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfedhr/orchestrator.hpp"
#include "pfedhr/version.hpp"

namespace pfedhr {

// Everything needed to reproduce a run. A saved manifest re-executed against
// the same binary yields byte-identical summary metrics.
struct DatasetDescriptor {
  std::string kind = "synthetic";  // synthetic | idx
  int classes = 4;
  int n = 1600;
  int dim = 16;
  double mean_scale = 1.0;
  std::string images_path;
  std::string labels_path;
};

struct PublicSourceDescriptor {
  std::string kind = "same";  // same | cross_synthetic | cross_idx
  int dim = 0;                // cross_synthetic source dimension
  std::string images_path;
  std::string labels_path;
};

struct RunManifest {
  FedConfig config;
  DatasetDescriptor dataset;
  PublicSourceDescriptor public_source;
  std::string version = kVersion;
  std::string out_dir = "out";
};

// ---------------------------------------------------------------------------
// JSON round-trips

inline nlohmann::json to_json(const FedConfig& c) {
  return nlohmann::json{{"num_clients", c.num_clients},
                        {"active_per_round", c.active_per_round},
                        {"rounds", c.rounds},
                        {"clusters", c.clusters},
                        {"local_epochs", c.local_epochs},
                        {"finetune_epochs", c.finetune_epochs},
                        {"kd_lambda", c.kd_lambda},
                        {"labeled_public", c.labeled_public},
                        {"stitch_depth", c.stitch_depth},
                        {"max_candidates", c.max_candidates},
                        {"public_fraction", c.public_fraction},
                        {"seed", c.seed},
                        {"mode", run_mode_name(c.mode)},
                        {"large_n_preaverage", c.large_n_preaverage},
                        {"scheme", c.scheme == PartitionScheme::Iid ? "IID" : "TWO_CLASS_NONIID"},
                        {"similarity", c.similarity},
                        {"lr", c.lr},
                        {"finetune_lr", c.finetune_lr},
                        {"momentum", c.momentum},
                        {"batch_size", c.batch_size},
                        {"finetune_batch_size", c.finetune_batch_size},
                        {"cka_probe_samples", c.cka_probe_samples}};
}

inline FedConfig fed_config_from_json(const nlohmann::json& j) {
  FedConfig c;
  c.num_clients = j.value("num_clients", c.num_clients);
  c.active_per_round = j.value("active_per_round", c.active_per_round);
  c.rounds = j.value("rounds", c.rounds);
  c.clusters = j.value("clusters", c.clusters);
  c.local_epochs = j.value("local_epochs", c.local_epochs);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.kd_lambda = j.value("kd_lambda", c.kd_lambda);
  c.labeled_public = j.value("labeled_public", c.labeled_public);
  c.stitch_depth = j.value("stitch_depth", c.stitch_depth);
  c.max_candidates = j.value("max_candidates", c.max_candidates);
  c.public_fraction = j.value("public_fraction", c.public_fraction);
  c.seed = j.value("seed", c.seed);
  if (j.contains("mode")) c.mode = run_mode_by_name(j["mode"].get<std::string>());
  c.large_n_preaverage = j.value("large_n_preaverage", c.large_n_preaverage);
  if (j.contains("scheme")) {
    const std::string s = j["scheme"].get<std::string>();
    if (s == "IID")
      c.scheme = PartitionScheme::Iid;
    else if (s == "TWO_CLASS_NONIID")
      c.scheme = PartitionScheme::TwoClassNonIid;
    else
      throw ConfigInvalid("unknown scheme: " + s);
  }
  c.similarity = j.value("similarity", c.similarity);
  c.lr = j.value("lr", c.lr);
  c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.finetune_batch_size = j.value("finetune_batch_size", c.finetune_batch_size);
  c.cka_probe_samples = j.value("cka_probe_samples", c.cka_probe_samples);
  return c;
}

inline nlohmann::json to_json(const RunManifest& m) {
  nlohmann::json j;
  j["config"] = to_json(m.config);
  j["dataset"] = {{"kind", m.dataset.kind},     {"classes", m.dataset.classes},
                  {"n", m.dataset.n},           {"dim", m.dataset.dim},
                  {"mean_scale", m.dataset.mean_scale}, {"images_path", m.dataset.images_path},
                  {"labels_path", m.dataset.labels_path}};
  j["public_source"] = {{"kind", m.public_source.kind},
                        {"dim", m.public_source.dim},
                        {"images_path", m.public_source.images_path},
                        {"labels_path", m.public_source.labels_path}};
  j["version"] = m.version;
  j["out_dir"] = m.out_dir;
  return j;
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  if (j.contains("config")) m.config = fed_config_from_json(j["config"]);
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    m.dataset.kind = d.value("kind", m.dataset.kind);
    m.dataset.classes = d.value("classes", m.dataset.classes);
    m.dataset.n = d.value("n", m.dataset.n);
    m.dataset.dim = d.value("dim", m.dataset.dim);
    m.dataset.mean_scale = d.value("mean_scale", m.dataset.mean_scale);
    m.dataset.images_path = d.value("images_path", m.dataset.images_path);
    m.dataset.labels_path = d.value("labels_path", m.dataset.labels_path);
  }
  if (j.contains("public_source")) {
    const auto& p = j["public_source"];
    m.public_source.kind = p.value("kind", m.public_source.kind);
    m.public_source.dim = p.value("dim", m.public_source.dim);
    m.public_source.images_path = p.value("images_path", m.public_source.images_path);
    m.public_source.labels_path = p.value("labels_path", m.public_source.labels_path);
  }
  m.version = j.value("version", m.version);
  m.out_dir = j.value("out_dir", m.out_dir);
  return m;
}

inline RunManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open manifest: " + path);
  nlohmann::json j;
  is >> j;
  return manifest_from_json(j);
}

inline void save_manifest(const RunManifest& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write manifest: " + path);
  os << to_json(m).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Dataset construction from descriptors

inline LabeledDataset<float> build_dataset(const DatasetDescriptor& d, std::uint64_t seed) {
  if (d.kind == "synthetic")
    return make_synthetic<float>(d.classes, d.n, d.dim, mix_seed(seed, seed_tag::kData), d.mean_scale);
  if (d.kind == "idx") return load_idx<float>(d.images_path, d.labels_path);
  throw ConfigInvalid("unknown dataset kind: " + d.kind);
}

inline bool has_public_override(const RunManifest& m) { return m.public_source.kind != "same"; }

inline PublicDataset<float> build_public_override(const RunManifest& m, const InputSpec& target) {
  if (m.public_source.kind == "cross_synthetic") {
    const int dim = m.public_source.dim > 0 ? m.public_source.dim : m.dataset.dim + 4;
    LabeledDataset<float> src = make_synthetic<float>(
        m.dataset.classes, m.dataset.n / 10 + 2, dim, mix_seed(m.config.seed, seed_tag::kData, 7),
        m.dataset.mean_scale);
    return cross_public(src, target, m.config.labeled_public);
  }
  if (m.public_source.kind == "cross_idx") {
    LabeledDataset<float> src = load_idx<float>(m.public_source.images_path, m.public_source.labels_path);
    return cross_public(src, target, m.config.labeled_public);
  }
  throw ConfigInvalid("unknown public source kind: " + m.public_source.kind);
}

// ---------------------------------------------------------------------------
// Output emission

namespace detail {

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

inline nlohmann::json round_to_json(const RoundReport& r, RunMode mode) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : r.clients) {
    nlohmann::json jc{{"client_id", c.client_id},
                      {"test_accuracy", c.test_accuracy},
                      {"train_loss", c.train_loss},
                      {"trained", c.trained}};
    if (c.matched) {
      jc["candidate_index"] = c.candidate_index;
      jc["similarity"] = c.similarity;
      jc["candidate_structure_dump"] = c.matched_structure;
    }
    clients.push_back(std::move(jc));
  }
  return nlohmann::json{{"round", r.round},
                        {"mode", run_mode_name(mode)},
                        {"mean_acc", r.mean_accuracy},
                        {"std_acc", r.std_accuracy},
                        {"num_candidates", r.num_candidates},
                        {"wall_ms", r.wall_ms},
                        {"clients", std::move(clients)}};
}

inline void write_rounds_jsonl(const std::vector<RoundReport>& reports, RunMode mode,
                               const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write rounds file: " + path);
  for (const auto& r : reports) os << round_to_json(r, mode).dump() << "\n";
}

// Per-round summary. Wall time stays in rounds.jsonl: the summary must be
// byte-identical across reruns of the same manifest.
inline void write_summary_csv(const std::vector<RoundReport>& reports, RunMode mode,
                              const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write summary file: " + path);
  os << "round,mode,mean_acc,std_acc,M\n";
  for (const auto& r : reports)
    os << r.round << ',' << run_mode_name(mode) << ',' << detail::fixed6(r.mean_accuracy) << ','
       << detail::fixed6(r.std_accuracy) << ',' << r.num_candidates << "\n";
}

inline void write_candidates_txt(const std::vector<RoundReport>& reports, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write candidates file: " + path);
  for (const auto& r : reports) {
    if (r.candidate_dumps.empty()) continue;
    os << "# round " << r.round << "\n";
    for (std::size_t m = 0; m < r.candidate_dumps.size(); ++m)
      os << "candidate " << m << "\n" << r.candidate_dumps[m] << "\n";
  }
}

inline std::vector<RoundReport> run_from_manifest(const RunManifest& manifest) {
  LabeledDataset<float> dataset = build_dataset(manifest.dataset, manifest.config.seed);
  if (has_public_override(manifest)) {
    PublicDataset<float> pub = build_public_override(manifest, dataset.input_spec());
    return run_experiment(manifest.config, std::move(dataset), &pub);
  }
  return run_experiment(manifest.config, std::move(dataset));
}

// Full run with artifacts: manifest.json, rounds.jsonl, summary.csv, candidates.txt.
inline std::vector<RoundReport> run_and_write(const RunManifest& manifest) {
  std::filesystem::create_directories(manifest.out_dir);
  save_manifest(manifest, manifest.out_dir + "/manifest.json");
  std::vector<RoundReport> reports = run_from_manifest(manifest);
  write_rounds_jsonl(reports, manifest.config.mode, manifest.out_dir + "/rounds.jsonl");
  write_summary_csv(reports, manifest.config.mode, manifest.out_dir + "/summary.csv");
  write_candidates_txt(reports, manifest.out_dir + "/candidates.txt");
  return reports;
}

}  // namespace pfedhr
