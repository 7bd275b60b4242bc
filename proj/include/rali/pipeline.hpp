#pragma once

// Stage drivers: align -> pca -> bucketed k-means -> fine-tune -> evaluate,
// the component ablation and the (M, K, N) sweep. Artifacts and a manifest
// are written when an output directory is given.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include <openssl/evp.h>

#include "rali/alignment.hpp"
#include "rali/config.hpp"
#include "rali/dataset.hpp"
#include "rali/kmeans.hpp"
#include "rali/logging.hpp"
#include "rali/metrics.hpp"
#include "rali/pca.hpp"
#include "rali/scoring.hpp"

namespace rali {

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::Numeric, "SHA-256 digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return out.str();
}

inline std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct StageSeeds {
  std::uint64_t align = 0;
  std::uint64_t kmeans = 0;  // per-bucket streams are substream(kmeans, "kmeans:bucket:<n>")
  std::uint64_t finetune = 0;

  static StageSeeds derive(std::uint64_t base) {
    return {Rng::substream(base, "align").next_u64(), base, Rng::substream(base, "finetune").next_u64()};
  }
};

inline unsigned parse_train_targets(const std::vector<std::string>& names) {
  unsigned targets = 0;
  for (const auto& n : names) {
    if (n == "centroids") targets |= kTrainCentroids;
    else if (n == "scores") targets |= kTrainScores;
    else if (n == "pca") targets |= kTrainPca;
    else if (n == "scale") targets |= kTrainScale;
    else throw Error(ErrorKind::Validation, "unknown fit target '" + n + "'");
  }
  if (targets == 0) throw Error(ErrorKind::Param, "fit_targets is empty");
  return targets;
}

inline AlignTrainConfig align_config(const PipelineConfig& cfg) {
  AlignTrainConfig a;
  a.lr = cfg.real("align_lr");
  a.epochs = cfg.count("align_epochs");
  a.batch_size = cfg.count("align_batch");
  a.seed = StageSeeds::derive(cfg.count("seed")).align;
  a.temperature_init = cfg.real("align_temperature");
  a.weight_decay = cfg.real("align_weight_decay");
  a.seed_augmentation = cfg.flag("seed_augmentation");
  return a;
}

inline ScoreFitConfig fit_config(const PipelineConfig& cfg) {
  ScoreFitConfig f;
  f.lr = cfg.real("fit_lr");
  f.epochs = cfg.count("fit_epochs");
  f.batch_size = cfg.count("fit_batch");
  f.seed = StageSeeds::derive(cfg.count("seed")).finetune;
  f.train_targets = parse_train_targets(cfg.list("fit_targets"));
  return f;
}

inline KMeansOptions kmeans_options(const PipelineConfig& cfg) {
  return {cfg.count("kmeans_max_iters"), cfg.real("kmeans_tol"), cfg.count("kmeans_n_init")};
}

/// Checks every stage's parameters before anything runs.
inline void validate_config(const PipelineConfig& cfg) {
  align_config(cfg).validate();
  fit_config(cfg).validate();
  if (cfg.count("pca_dim") < 1) throw Error(ErrorKind::Param, "pca_dim must be >= 1");
  if (cfg.count("n_basis") < 1) throw Error(ErrorKind::Param, "n_basis must be >= 1");
  if (cfg.count("n_buckets") < 1) throw Error(ErrorKind::Param, "n_buckets must be >= 1");
  if (cfg.count("kmeans_max_iters") < 1) throw Error(ErrorKind::Param, "kmeans_max_iters must be >= 1");
  if (!(cfg.real("kmeans_tol") >= 0.0)) throw Error(ErrorKind::Param, "kmeans_tol must be >= 0");
}

template <typename Fn>
auto run_stage(const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), "stage '" + name + "': " + e.what());
  }
}

inline AlignmentAdapter stage_align(const EmbeddingDataset& train, const PipelineConfig& cfg) {
  return run_stage("align", [&] { return train_alignment(train, align_config(cfg)); });
}

inline PcaModel stage_pca(const EmbeddingDataset& train, const AlignmentAdapter* adapter, const PipelineConfig& cfg) {
  return run_stage("pca", [&] {
    PcaModel pca = cfg.flag("use_pca") ? fit_pca(train, adapter, cfg.count("pca_dim")) : PcaModel::identity(train.dim);
    pca.round_to_storage();
    return pca;
  });
}

/// Initial scoring model from the (bucketed) k-means basis over projected embeddings.
inline ScoringModel stage_cluster(const EmbeddingDataset& train, const std::optional<AlignmentAdapter>& adapter,
                                  const PcaModel& pca, const PipelineConfig& cfg) {
  return run_stage("cluster", [&] {
    require_same_dim(pca.input_dim(), train.dim, "dataset vs PCA");
    std::vector<DenseVector> reduced;
    std::vector<double> scores;
    reduced.reserve(train.size());
    for (const auto& r : train.records) {
      reduced.push_back(project(pca, adapter ? apply_adapter(*adapter, r.image_emb) : r.image_emb));
      scores.push_back(r.score);
    }
    const auto k = cfg.count("n_basis");
    const auto seed = StageSeeds::derive(cfg.count("seed")).kmeans;
    BasisSet basis;
    if (cfg.flag("bucketed")) {
      const auto spec = make_buckets(scores, cfg.count("n_buckets"), k);
      basis = bucketed_kmeans(reduced, scores, spec, seed, kmeans_options(cfg));
    } else {
      basis = plain_kmeans(reduced, scores, k, seed, kmeans_options(cfg));
    }
    ScoringModel model{pca, std::move(basis), adapter, 1.0, false};
    model.round_to_storage();
    model.validate();
    return model;
  });
}

inline ScoringModel stage_finetune(const ScoringModel& model, const EmbeddingDataset& train, const PipelineConfig& cfg) {
  return run_stage("finetune", [&] { return finetune_scoring(model, train, fit_config(cfg)); });
}

inline EvalReport stage_evaluate(const ScoringModel& model, const EmbeddingDataset& data, const std::string& name,
                                 const PipelineConfig& cfg) {
  return run_stage("evaluate", [&] {
    const auto t0 = std::chrono::steady_clock::now();
    auto report = evaluate(model, data, name, {cfg.flag("logistic_plcc")});
    const double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
    log::info("predict " + name + ": " + std::to_string(us / static_cast<double>(data.size())) + " us/image over " +
              std::to_string(data.size()) + " images");
    return report;
  });
}

struct PipelineRun {
  std::optional<AlignmentAdapter> adapter;
  PcaModel pca;
  ScoringModel initial;  // after clustering
  ScoringModel model;    // after fine-tuning (== initial when scoring_definition is off)
  EvalReport initial_report;
  EvalReport report;
  nlohmann::json manifest;
};

namespace detail {

inline nlohmann::json persist(const std::filesystem::path& dir, const std::string& file, const io::Bytes& bytes) {
  if (dir.empty()) return {{"file", file}, {"sha256", sha256_hex(bytes)}};
  io::write_file(dir / file, bytes);
  return {{"file", (dir / file).string()}, {"sha256", sha256_hex(bytes)}};
}

inline void write_manifest(const std::filesystem::path& dir, const nlohmann::json& manifest) {
  if (dir.empty()) return;
  const std::string text = manifest.dump(2) + "\n";
  io::write_file(dir / "manifest.json", std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace detail

/// Full pipeline. With a non-empty out_dir every stage artifact is written as
/// soon as it exists, and manifest.json is rewritten after each stage so a
/// failed run keeps its partial state.
inline PipelineRun run_pipeline(const PipelineConfig& cfg, const EmbeddingDataset& train, const EmbeddingDataset& test,
                                const std::filesystem::path& out_dir = {}) {
  validate_config(cfg);
  require_same_dim(train.dim, test.dim, "train vs test dataset");
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  const auto seeds = StageSeeds::derive(cfg.count("seed"));
  PipelineRun run;
  auto& m = run.manifest;
  m["config_hash"] = sha256_hex(cfg.canonical());
  m["config"] = cfg.values();
  m["seeds"] = {{"base", cfg.count("seed")},
                {"align", seeds.align},
                {"kmeans", seeds.kmeans},
                {"kmeans_substreams", "kmeans:bucket:<n>"},
                {"finetune", seeds.finetune}};
  const auto train_hash = sha256_hex(encode_rqe1(train));
  const auto test_hash = sha256_hex(encode_rqe1(test));
  m["inputs"] = {{"train", {{"records", train.size()}, {"dim", train.dim}, {"sha256", train_hash}}},
                 {"test", {{"records", test.size()}, {"dim", test.dim}, {"sha256", test_hash}}}};
  m["stages"] = nlohmann::json::array();
  auto record_stage = [&](const std::string& name, nlohmann::json inputs, nlohmann::json output) {
    m["stages"].push_back({{"stage", name}, {"inputs", std::move(inputs)}, {"output", std::move(output)}});
    detail::write_manifest(out_dir, m);
  };

  std::string adapter_hash;
  if (cfg.flag("use_alignment")) {
    run.adapter = stage_align(train, cfg);
    auto out = detail::persist(out_dir, "adapter.rqa1", encode_rqa1(*run.adapter));
    adapter_hash = out["sha256"];
    record_stage("align", {{"train", train_hash}}, out);
  }
  const AlignmentAdapter* adapter = run.adapter ? &*run.adapter : nullptr;

  run.pca = stage_pca(train, adapter, cfg);
  auto pca_out = detail::persist(out_dir, "pca.rqp1", encode_rqp1(run.pca));
  record_stage("pca", {{"train", train_hash}, {"adapter", adapter_hash}}, pca_out);

  run.initial = stage_cluster(train, run.adapter, run.pca, cfg);
  auto init_out = detail::persist(out_dir, "clustered.rqm1", encode_rqm1(run.initial));
  record_stage("cluster", {{"train", train_hash}, {"pca", pca_out["sha256"]}, {"adapter", adapter_hash}}, init_out);

  if (cfg.flag("scoring_definition")) {
    run.model = stage_finetune(run.initial, train, cfg);
  } else {
    run.model = run.initial;
  }
  auto model_out = detail::persist(out_dir, "model.rqm1", encode_rqm1(run.model));
  record_stage("finetune", {{"train", train_hash}, {"model", init_out["sha256"]}}, model_out);

  run.initial_report = stage_evaluate(run.initial, test, "test:initial", cfg);
  run.report = stage_evaluate(run.model, test, "test", cfg);
  m["reports"] = {run.initial_report.to_json(), run.report.to_json()};
  m["model_sha256"] = model_out["sha256"];
  if (!out_dir.empty()) {
    const std::string lines = run.initial_report.to_json().dump() + "\n" + run.report.to_json().dump() + "\n";
    io::write_file(out_dir / "report.jsonl",
                   std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(lines.data()), lines.size()));
  }
  record_stage("evaluate", {{"test", test_hash}, {"model", model_out["sha256"]}},
               {{"file", out_dir.empty() ? "report.jsonl" : (out_dir / "report.jsonl").string()}});
  return run;
}

struct AblationCase {
  std::string name;
  bool alignment;
  bool pca;
  bool bucketed;
  bool seed_augmentation;
  bool scoring_definition;
};

/// The six component switch combinations, Case 1 to Case 6.
inline std::vector<AblationCase> component_ablation_cases() {
  return {
      {"Case 1", false, true, true, false, true},
      {"Case 2", true, false, true, true, true},
      {"Case 3", true, true, false, true, true},
      {"Case 4", true, true, true, false, true},
      {"Case 5", true, true, true, true, false},
      {"Case 6", true, true, true, true, true},
  };
}

inline PipelineConfig with_case(PipelineConfig cfg, const AblationCase& c) {
  cfg.set("use_alignment", c.alignment ? "true" : "false");
  cfg.set("use_pca", c.pca ? "true" : "false");
  cfg.set("bucketed", c.bucketed ? "true" : "false");
  cfg.set("seed_augmentation", c.seed_augmentation ? "true" : "false");
  cfg.set("scoring_definition", c.scoring_definition ? "true" : "false");
  return cfg;
}

struct AblationRow {
  AblationCase setup;
  EvalReport report;
};

inline std::vector<AblationRow> run_component_ablation(const PipelineConfig& cfg, const EmbeddingDataset& train,
                                                       const EmbeddingDataset& test) {
  std::vector<AblationRow> rows;
  for (const auto& c : component_ablation_cases()) {
    log::info("ablation " + c.name);
    rows.push_back({c, run_pipeline(with_case(cfg, c), train, test).report});
  }
  return rows;
}

struct SweepRow {
  std::size_t pca_dim;
  std::size_t n_basis;
  std::size_t n_buckets;
  EvalReport without_scoring;
  EvalReport with_scoring;
};

/// Every (M, K:N) combination from sweep_m x sweep_kn; each row reports the
/// model before and after score fine-tuning.
inline std::vector<SweepRow> run_sweep(const PipelineConfig& cfg, const EmbeddingDataset& train, const EmbeddingDataset& test) {
  std::vector<SweepRow> rows;
  const auto ms = cfg.list("sweep_m");
  const auto kns = cfg.list("sweep_kn");
  for (const auto& m : ms) {
    for (const auto& kn : kns) {
      const auto colon = kn.find(':');
      if (colon == std::string::npos) throw Error(ErrorKind::Validation, "sweep_kn entry '" + kn + "' is not K:N");
      PipelineConfig c = cfg;
      c.set("pca_dim", m);
      c.set("n_basis", kn.substr(0, colon));
      c.set("n_buckets", kn.substr(colon + 1));
      c.set("scoring_definition", "true");
      log::info("sweep M=" + m + " K:N=" + kn);
      const auto run = run_pipeline(c, train, test);
      rows.push_back({c.count("pca_dim"), c.count("n_basis"), c.count("n_buckets"), run.initial_report, run.report});
    }
  }
  return rows;
}

inline std::string format_ablation_table(std::span<const AblationRow> rows) {
  auto mark = [](bool on) { return on ? "yes" : "no "; };
  std::string out = "case     alignment  pca  bucketed  seed_aug  scoring_def  PLCC / SRCC\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-7s  %-9s  %-3s  %-8s  %-8s  %-11s  %.3f / %.3f\n", r.setup.name.c_str(),
                  mark(r.setup.alignment), mark(r.setup.pca), mark(r.setup.bucketed), mark(r.setup.seed_augmentation),
                  mark(r.setup.scoring_definition), r.report.plcc, r.report.srcc);
    out += buf;
  }
  return out;
}

inline std::string format_sweep_table(std::span<const SweepRow> rows) {
  std::string out = "case  pca_dim  basis  buckets  without scoring_def  with scoring_def\n";
  char buf[160];
  std::size_t i = 0;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-4zu  %7zu  %5zu  %7zu  %.3f / %.3f        %.3f / %.3f\n", ++i, r.pca_dim, r.n_basis,
                  r.n_buckets, r.without_scoring.plcc, r.without_scoring.srcc, r.with_scoring.plcc, r.with_scoring.srcc);
    out += buf;
  }
  return out;
}

}  // namespace rali
