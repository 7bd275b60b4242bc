// rali: command-line driver for the image-quality scoring pipeline.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "rali/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rali;

namespace {

// Relative dataset paths are looked up under RALI_DATA_DIR when it is set.
fs::path data_path(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("RALI_DATA_DIR"); root && *root) return fs::path(root) / path;
  return path;
}

void write_text(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-") {
    std::fwrite(text.data(), 1, text.size(), stdout);
    return;
  }
  io::write_file(out, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  int verbose = 0;
  bool quiet = false;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value config file")->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "config override key=value (repeatable)");
    app->add_option("--seed", seed, "base seed");
    app->add_flag("-v,--verbose", verbose, "more logging (-vv for debug)");
    app->add_flag("-q,--quiet", quiet, "errors only");
  }

  PipelineConfig load() const {
    if (quiet) {
      log::set_level(log::Level::Quiet);
    } else if (verbose >= 2) {
      log::set_level(log::Level::Debug);
    } else if (verbose == 1) {
      log::set_level(log::Level::Info);
    }
    PipelineConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& o : overrides) cfg.apply_override(o);
    if (seed) cfg.set("seed", std::to_string(*seed));
    validate_config(cfg);
    return cfg;
  }
};

template <typename T>
void put(PipelineConfig& cfg, const char* key, const std::optional<T>& value) {
  if (!value) return;
  if constexpr (std::is_same_v<T, std::string>) {
    cfg.set(key, *value);
  } else {
    std::ostringstream s;
    s.precision(17);
    s << *value;
    cfg.set(key, s.str());
  }
}

std::string dataset_summary(const EmbeddingDataset& d, const fs::path& path) {
  double lo = kMaxScore, hi = kMinScore, mean = 0.0;
  for (const auto& r : d.records) {
    lo = std::min(lo, r.score);
    hi = std::max(hi, r.score);
    mean += r.score;
  }
  char buf[256];
  if (d.empty()) {
    std::snprintf(buf, sizeof(buf), "%s: 0 records, D=%zu\n", path.string().c_str(), d.dim);
  } else {
    std::snprintf(buf, sizeof(buf), "%s: %zu records, D=%zu, %zu text seeds, scores %.3f..%.3f (mean %.3f)\n",
                  path.string().c_str(), d.size(), d.dim, d.records.front().text_embs.size(), lo, hi,
                  mean / static_cast<double>(d.size()));
  }
  return buf;
}

nlohmann::json describe(const fs::path& path) {
  const auto magic = io::peek_magic(path);
  nlohmann::json out = {{"file", path.string()}, {"format", magic}};
  if (magic == "RQE1") {
    const auto d = load_dataset(path, DatasetFormat::Packed);
    out["records"] = d.size();
    out["dim"] = d.dim;
    out["text_seeds"] = d.empty() ? 0 : d.records.front().text_embs.size();
  } else if (magic == "RQA1") {
    const auto a = load_adapter(path);
    out["dim"] = a.dim();
    out["temperature"] = a.temperature();
  } else if (magic == "RQP1") {
    const auto p = decode_rqp1(io::read_file(path));
    out["input_dim"] = p.input_dim();
    out["output_dim"] = p.output_dim();
    double total = 0.0;
    for (double v : p.eigenvalues.span()) total += v;
    out["retained_variance"] = total;
  } else if (magic == "RQM1") {
    const auto m = load_model(path);
    std::set<std::uint32_t> buckets(m.basis.bucket_of.begin(), m.basis.bucket_of.end());
    out["input_dim"] = m.input_dim();
    out["reduced_dim"] = m.reduced_dim();
    out["basis_vectors"] = m.basis.size();
    out["buckets_used"] = buckets.size();
    out["adapter"] = m.adapter.has_value();
    out["softmax_scale"] = m.softmax_scale;
    out["scale_trained"] = m.scale_trained;
    const auto [lo, hi] = std::minmax_element(m.basis.scores.begin(), m.basis.scores.end());
    out["basis_score_range"] = {*lo, *hi};
  } else {
    const auto d = load_dataset(path, DatasetFormat::Jsonl);
    out["format"] = "JSONL";
    out["records"] = d.size();
    out["dim"] = d.dim;
  }
  out["sha256"] = sha256_hex(io::read_file(path));
  return out;
}

std::string score_lines(const ScoringModel& model, const EmbeddingDataset& data, std::size_t top) {
  if (model.input_dim() != data.dim) {
    throw Error(ErrorKind::Dim, "model expects D=" + std::to_string(model.input_dim()) + " but the dataset has D=" +
                                    std::to_string(data.dim));
  }
  std::vector<std::string> lines(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto& r = data.records[i];
    Prediction p;
    try {
      p = predict(model, r.image_emb);
    } catch (const Error& e) {
      throw Error(e.kind(), "record " + r.id + ": " + e.what());
    }
    std::vector<std::size_t> order(p.weights.dim());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t n = std::min(top, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                      [&](std::size_t a, std::size_t b) { return p.weights[a] > p.weights[b] || (p.weights[a] == p.weights[b] && a < b); });
    nlohmann::json weights = nlohmann::json::array();
    for (std::size_t j = 0; j < n; ++j) weights.push_back({{"basis", order[j]}, {"weight", p.weights[order[j]]}});
    nlohmann::json line = {{"id", r.id}, {"score", std::clamp(p.score, kMinScore, kMaxScore)}, {"top_weights", weights}};
    lines[i] = line.dump() + "\n";
  });
  std::string out;
  for (const auto& l : lines) out += l;
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reasoning-free image quality scoring over precomputed embeddings"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common common;

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "write a seeded synthetic embedding corpus");
  std::optional<std::uint64_t> g_n, g_dim, g_seeds, g_holdout;
  std::optional<double> g_sigma;
  std::string g_out, g_test_out;
  gen->add_option("--n", g_n, "training records");
  gen->add_option("--dim", g_dim, "embedding dimension (>= 2)");
  gen->add_option("--noise-sigma", g_sigma, "noise scale");
  gen->add_option("--text-seeds", g_seeds, "text embeddings per record");
  gen->add_option("--holdout", g_holdout, "held-out records (written with --test-out)");
  gen->add_option("--out", g_out, "training dataset path (.rqe1 or .jsonl)")->required();
  gen->add_option("--test-out", g_test_out, "held-out dataset path");
  common.attach(gen);

  // align
  auto* align = app.add_subcommand("align", "train the contrastive image adapter");
  std::string a_train, a_out;
  align->add_option("--train", a_train, "training dataset")->required();
  align->add_option("--out", a_out, "adapter output (RQA1)")->required();
  common.attach(align);

  // pca
  auto* pca = app.add_subcommand("pca", "fit the PCA projection on (adapted) image embeddings");
  std::string p_train, p_adapter, p_out;
  std::optional<std::uint64_t> p_dim;
  pca->add_option("--train", p_train, "training dataset")->required();
  pca->add_option("--adapter", p_adapter, "adapter (RQA1) applied before fitting");
  pca->add_option("--dim", p_dim, "target dimension M");
  pca->add_option("--out", p_out, "PCA output (RQP1)")->required();
  common.attach(pca);

  // cluster
  auto* cluster = app.add_subcommand("cluster", "build the basis set by bucketed k-means");
  std::string c_train, c_adapter, c_pca, c_out;
  std::optional<std::uint64_t> c_k, c_buckets;
  bool c_plain = false;
  cluster->add_option("--train", c_train, "training dataset")->required();
  cluster->add_option("--adapter", c_adapter, "adapter (RQA1)");
  cluster->add_option("--pca", c_pca, "PCA projection (RQP1)")->required();
  cluster->add_option("--basis", c_k, "number of basis vectors K");
  cluster->add_option("--buckets", c_buckets, "number of score buckets N");
  cluster->add_flag("--plain", c_plain, "one global k-means instead of per-bucket");
  cluster->add_option("--out", c_out, "initial model output (RQM1)")->required();
  common.attach(cluster);

  // finetune
  auto* finetune = app.add_subcommand("finetune", "fine-tune basis vectors and scores");
  std::string f_model, f_train, f_out;
  std::optional<std::uint64_t> f_epochs;
  std::optional<double> f_lr;
  std::optional<std::string> f_targets;
  finetune->add_option("--model", f_model, "initial model (RQM1)")->required();
  finetune->add_option("--train", f_train, "training dataset")->required();
  finetune->add_option("--epochs", f_epochs, "epochs");
  finetune->add_option("--lr", f_lr, "learning rate");
  finetune->add_option("--targets", f_targets, "comma list of centroids,scores,pca,scale");
  finetune->add_option("--out", f_out, "model output (RQM1)")->required();
  common.attach(finetune);

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "align, reduce, cluster, fine-tune and evaluate");
  std::string pl_train, pl_test, pl_out_dir;
  bool pl_skip_align = false, pl_no_pca = false, pl_plain = false, pl_no_score_def = false, pl_json = false;
  pipe->add_option("--train", pl_train, "training dataset (default: config train_path)");
  pipe->add_option("--test", pl_test, "held-out dataset (default: config test_path)");
  pipe->add_option("--out-dir", pl_out_dir, "artifact directory (default: config out_dir)");
  pipe->add_flag("--skip-align", pl_skip_align, "no contrastive alignment (and no seed augmentation)");
  pipe->add_flag("--no-pca", pl_no_pca, "use raw D-dim features");
  pipe->add_flag("--plain-kmeans", pl_plain, "one global k-means");
  pipe->add_flag("--no-scoring-def", pl_no_score_def, "keep the clustered basis without fine-tuning");
  pipe->add_flag("--json", pl_json, "print the report as JSON lines");
  common.attach(pipe);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "component ablation and (M, K:N) sweep");
  std::string ab_train, ab_test, ab_out;
  bool ab_sweep_only = false, ab_json = false;
  ablate->add_option("--train", ab_train, "training dataset (default: config train_path)");
  ablate->add_option("--test", ab_test, "held-out dataset (default: config test_path)");
  ablate->add_flag("--sweep-only", ab_sweep_only, "skip the six component cases");
  ablate->add_flag("--json", ab_json, "emit JSON instead of tables");
  ablate->add_option("--out", ab_out, "write the output to a file");
  common.attach(ablate);

  // score
  auto* score = app.add_subcommand("score", "per-image scores as JSON lines");
  std::string s_model, s_data, s_out;
  std::size_t s_top = 5;
  score->add_option("--model", s_model, "model (RQM1)")->required();
  score->add_option("--data", s_data, "dataset to score")->required();
  score->add_option("--top", s_top, "basis weights listed per image");
  score->add_option("--out", s_out, "output file (default stdout)");
  common.attach(score);

  // eval
  auto* eval = app.add_subcommand("eval", "PLCC / SRCC / MSE of a model on datasets");
  std::string e_model;
  std::vector<std::string> e_data;
  bool e_json = false;
  eval->add_option("--model", e_model, "model (RQM1)")->required();
  eval->add_option("--data", e_data, "datasets (repeatable)")->required();
  eval->add_flag("--json", e_json, "JSON lines only");
  common.attach(eval);

  // inspect
  auto* inspect = app.add_subcommand("inspect", "summarise any RQE1/RQA1/RQP1/RQM1/JSONL file");
  std::vector<std::string> i_files;
  inspect->add_option("files", i_files, "files to inspect")->required();
  common.attach(inspect);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    PipelineConfig cfg = common.load();

    if (active == gen) {
      put(cfg, "n", g_n);
      put(cfg, "dim", g_dim);
      put(cfg, "noise_sigma", g_sigma);
      put(cfg, "n_text_seeds", g_seeds);
      put(cfg, "holdout", g_holdout);
      const std::size_t holdout = g_test_out.empty() ? 0 : cfg.count("holdout");
      if (cfg.count("dim") < 2) {
        std::cerr << gen->help();
        throw Error(ErrorKind::Param, "--dim must be >= 2, got " + std::to_string(cfg.count("dim")));
      }
      SyntheticSpec spec{cfg.count("n") + holdout, cfg.count("dim"), cfg.count("seed"), cfg.real("noise_sigma"),
                         cfg.count("n_text_seeds")};
      auto [train, test] = split_tail(gen_synthetic(spec), holdout);
      const auto out = data_path(g_out);
      save_dataset(train, out);
      std::cout << dataset_summary(train, out);
      if (holdout) {
        const auto test_out = data_path(g_test_out);
        save_dataset(test, test_out);
        std::cout << dataset_summary(test, test_out);
      }
    } else if (active == align) {
      const auto train = load_dataset(data_path(a_train));
      const auto adapter = stage_align(train, cfg);
      save_adapter(adapter, a_out);
      std::cout << "adapter D=" << adapter.dim() << " temperature=" << adapter.temperature() << " -> " << a_out << "\n";
    } else if (active == pca) {
      put(cfg, "pca_dim", p_dim);
      const auto train = load_dataset(data_path(p_train));
      std::optional<AlignmentAdapter> adapter;
      if (!p_adapter.empty()) adapter = load_adapter(p_adapter);
      const auto model = stage_pca(train, adapter ? &*adapter : nullptr, cfg);
      io::write_file(p_out, encode_rqp1(model));
      std::cout << "pca " << model.input_dim() << " -> " << model.output_dim() << " -> " << p_out << "\n";
    } else if (active == cluster) {
      put(cfg, "n_basis", c_k);
      put(cfg, "n_buckets", c_buckets);
      if (c_plain) cfg.set("bucketed", "false");
      const auto train = load_dataset(data_path(c_train));
      std::optional<AlignmentAdapter> adapter;
      if (!c_adapter.empty()) adapter = load_adapter(c_adapter);
      const auto model = stage_cluster(train, adapter, decode_rqp1(io::read_file(c_pca)), cfg);
      save_model(model, c_out);
      std::cout << "basis K=" << model.basis.size() << " M=" << model.reduced_dim() << " -> " << c_out << "\n";
    } else if (active == finetune) {
      put(cfg, "fit_epochs", f_epochs);
      put(cfg, "fit_lr", f_lr);
      put(cfg, "fit_targets", f_targets);
      validate_config(cfg);
      const auto train = load_dataset(data_path(f_train));
      const auto model = stage_finetune(load_model(f_model), train, cfg);
      save_model(model, f_out);
      std::cout << "fine-tuned " << model.basis.size() << " basis vectors -> " << f_out << "\n";
    } else if (active == pipe) {
      if (!pl_train.empty()) cfg.set("train_path", pl_train);
      if (!pl_test.empty()) cfg.set("test_path", pl_test);
      if (!pl_out_dir.empty()) cfg.set("out_dir", pl_out_dir);
      if (pl_skip_align) {
        cfg.set("use_alignment", "false");
        cfg.set("seed_augmentation", "false");
      }
      if (pl_no_pca) cfg.set("use_pca", "false");
      if (pl_plain) cfg.set("bucketed", "false");
      if (pl_no_score_def) cfg.set("scoring_definition", "false");
      const auto train = load_dataset(data_path(cfg.text("train_path")));
      const auto test = load_dataset(data_path(cfg.text("test_path")));
      const auto run = run_pipeline(cfg, train, test, cfg.text("out_dir"));
      if (pl_json) {
        std::cout << run.initial_report.to_json().dump() << "\n" << run.report.to_json().dump() << "\n";
      } else {
        const std::vector<EvalReport> reports{run.initial_report, run.report};
        std::cout << format_report_table(reports) << "model " << run.manifest["model_sha256"].get<std::string>() << "\n";
      }
    } else if (active == ablate) {
      if (!ab_train.empty()) cfg.set("train_path", ab_train);
      if (!ab_test.empty()) cfg.set("test_path", ab_test);
      const auto train = load_dataset(data_path(cfg.text("train_path")));
      const auto test = load_dataset(data_path(cfg.text("test_path")));
      std::string text;
      nlohmann::json doc;
      if (!ab_sweep_only) {
        const auto rows = run_component_ablation(cfg, train, test);
        text += format_ablation_table(rows);
        for (const auto& r : rows) {
          doc["cases"].push_back({{"case", r.setup.name},
                                  {"alignment", r.setup.alignment},
                                  {"pca", r.setup.pca},
                                  {"bucketed", r.setup.bucketed},
                                  {"seed_augmentation", r.setup.seed_augmentation},
                                  {"scoring_definition", r.setup.scoring_definition},
                                  {"report", r.report.to_json()}});
        }
      }
      if (!cfg.list("sweep_m").empty() && !cfg.list("sweep_kn").empty()) {
        const auto rows = run_sweep(cfg, train, test);
        if (!text.empty()) text += "\n";
        text += format_sweep_table(rows);
        for (const auto& r : rows) {
          doc["sweep"].push_back({{"pca_dim", r.pca_dim},
                                  {"n_basis", r.n_basis},
                                  {"n_buckets", r.n_buckets},
                                  {"without_scoring_definition", r.without_scoring.to_json()},
                                  {"with_scoring_definition", r.with_scoring.to_json()}});
        }
      } else if (ab_sweep_only) {
        throw Error(ErrorKind::Validation, "--sweep-only needs sweep_m and sweep_kn");
      }
      write_text(ab_json ? doc.dump(2) + "\n" : text, ab_out);
    } else if (active == score) {
      const auto model = load_model(s_model);
      const auto data = load_dataset(data_path(s_data));
      // Everything is computed before anything is written, so a failure leaves no partial output.
      write_text(score_lines(model, data, s_top), s_out);
    } else if (active == eval) {
      const auto model = load_model(e_model);
      std::vector<EvalReport> reports;
      for (const auto& d : e_data) {
        const auto path = data_path(d);
        reports.push_back(evaluate(model, load_dataset(path), path.filename().string(), {cfg.flag("logistic_plcc")}));
      }
      for (const auto& r : reports) std::cout << r.to_json().dump() << "\n";
      if (!e_json) std::cout << format_report_table(reports);
    } else if (active == inspect) {
      for (const auto& f : i_files) std::cout << describe(f).dump(2) << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "rali " << active->get_name() << ": " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "rali " << active->get_name() << ": IoError: " << e.what() << "\n";
    return exit_code(ErrorKind::Io);
  } catch (const std::exception& e) {
    std::cerr << "rali " << active->get_name() << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
