#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rali/pipeline.hpp"

using namespace rali;

namespace {

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.set("pca_dim", "8");
  cfg.set("n_basis", "12");
  cfg.set("n_buckets", "10");
  cfg.set("align_epochs", "2");
  cfg.set("align_batch", "64");
  cfg.set("fit_epochs", "5");
  cfg.set("kmeans_n_init", "2");
  return cfg;
}

struct Corpus {
  EmbeddingDataset train;
  EmbeddingDataset test;
};

const Corpus& corpus() {
  static const Corpus c = [] {
    auto [train, test] = split_tail(gen_synthetic({400, 16, 7, 0.05, 3}), 100);
    return Corpus{train, test};
  }();
  return c;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rali_pipeline_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Config, DefaultsAndTypedAccess) {
  PipelineConfig cfg;
  EXPECT_EQ(cfg.count("n_basis"), 250u);
  EXPECT_EQ(cfg.count("n_buckets"), 240u);
  EXPECT_DOUBLE_EQ(cfg.real("align_temperature"), 0.07);
  EXPECT_TRUE(cfg.flag("use_alignment"));
  EXPECT_EQ(cfg.list("fit_targets"), (std::vector<std::string>{"centroids", "scores"}));
  EXPECT_THROW(cfg.real("n_basis"), Error);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  PipelineConfig cfg;
  auto kind = [&](const std::string& assignment) {
    try {
      cfg.apply_override(assignment);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Io;
  };
  EXPECT_EQ(kind("n_basiss=3"), ErrorKind::Validation);
  EXPECT_EQ(kind("n_basis=-3"), ErrorKind::Validation);
  EXPECT_EQ(kind("noise_sigma=abc"), ErrorKind::Validation);
  EXPECT_EQ(kind("use_pca=maybe"), ErrorKind::Validation);
  EXPECT_EQ(kind("no_equals_sign"), ErrorKind::Validation);
  EXPECT_EQ(cfg.count("n_basis"), 250u);
}

TEST(Config, TextFormatWithComments) {
  std::istringstream in("# comment\n n_basis = 50  # trailing\n\nuse_pca=false\n");
  PipelineConfig cfg;
  cfg.load_text(in);
  EXPECT_EQ(cfg.count("n_basis"), 50u);
  EXPECT_FALSE(cfg.flag("use_pca"));
  std::istringstream bad("n_basis=5\nbogus=1\n");
  try {
    cfg.load_text(bad, "x.cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos);
  }
}

TEST(Config, HashFollowsValues) {
  PipelineConfig a, b;
  EXPECT_EQ(sha256_hex(a.canonical()), sha256_hex(b.canonical()));
  b.set("seed", "8");
  EXPECT_NE(sha256_hex(a.canonical()), sha256_hex(b.canonical()));
  EXPECT_EQ(sha256_hex(std::string_view("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Config, TrainTargetsParse) {
  EXPECT_EQ(parse_train_targets({"centroids", "scale"}), kTrainCentroids | kTrainScale);
  EXPECT_THROW(parse_train_targets({"weights"}), Error);
  PipelineConfig cfg;
  cfg.set("fit_targets", "");
  EXPECT_THROW(validate_config(cfg), Error);
}

TEST(Pipeline, RerunGivesIdenticalModel) {
  const auto cfg = small_config();
  const auto a = run_pipeline(cfg, corpus().train, corpus().test);
  const auto b = run_pipeline(cfg, corpus().train, corpus().test);
  EXPECT_EQ(encode_rqm1(a.model), encode_rqm1(b.model));
  EXPECT_EQ(a.manifest["model_sha256"], b.manifest["model_sha256"]);
  EXPECT_EQ(a.manifest["config_hash"], b.manifest["config_hash"]);
  auto other = cfg;
  other.set("seed", "8");
  EXPECT_NE(encode_rqm1(run_pipeline(other, corpus().train, corpus().test).model), encode_rqm1(a.model));
}

TEST(Pipeline, ThreadCountDoesNotChangeTheModel) {
  const auto cfg = small_config();
  const auto serial = run_pipeline(cfg, corpus().train, corpus().test);
  ::setenv("RALI_THREADS", "3", 1);
  const auto threaded = run_pipeline(cfg, corpus().train, corpus().test);
  ::unsetenv("RALI_THREADS");
  EXPECT_EQ(encode_rqm1(serial.model), encode_rqm1(threaded.model));
}

TEST(Pipeline, ArtifactsAndManifest) {
  const auto dir = fresh_dir("artifacts");
  const auto run = run_pipeline(small_config(), corpus().train, corpus().test, dir);
  for (const char* f : {"adapter.rqa1", "pca.rqp1", "clustered.rqm1", "model.rqm1", "report.jsonl", "manifest.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  std::ifstream in(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  EXPECT_EQ(manifest, run.manifest);
  ASSERT_EQ(manifest["stages"].size(), 5u);
  EXPECT_EQ(manifest["stages"][0]["stage"], "align");
  EXPECT_EQ(manifest["model_sha256"], sha256_hex(io::read_file(dir / "model.rqm1")));
  EXPECT_EQ(manifest["stages"][2]["inputs"]["pca"], sha256_hex(io::read_file(dir / "pca.rqp1")));
  EXPECT_EQ(manifest["inputs"]["train"]["sha256"], sha256_hex(encode_rqe1(corpus().train)));
  EXPECT_EQ(load_model(dir / "model.rqm1"), run.model);
  EXPECT_EQ(load_adapter(dir / "adapter.rqa1"), *run.adapter);

  // The stored artifacts replay the clustering stage exactly.
  const auto pca = decode_rqp1(io::read_file(dir / "pca.rqp1"));
  const auto replay = stage_cluster(corpus().train, load_adapter(dir / "adapter.rqa1"), pca, small_config());
  EXPECT_EQ(encode_rqm1(replay), io::read_file(dir / "clustered.rqm1"));
  std::filesystem::remove_all(dir);
}

TEST(Pipeline, FailingStageIsNamedAndEarlierArtifactsKept) {
  const auto dir = fresh_dir("failing");
  auto cfg = small_config();
  cfg.set("n_basis", "5");  // fewer than the nonempty buckets
  try {
    run_pipeline(cfg, corpus().train, corpus().test, dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Alloc);
    EXPECT_NE(std::string(e.what()).find("stage 'cluster'"), std::string::npos);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "pca.rqp1"));
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.json"));
  EXPECT_FALSE(std::filesystem::exists(dir / "model.rqm1"));
  std::filesystem::remove_all(dir);
}

TEST(Pipeline, SkippingAlignmentMatchesTheFirstAblationArm) {
  auto skip = small_config();
  skip.set("use_alignment", "false");
  skip.set("seed_augmentation", "false");
  const auto first = with_case(small_config(), component_ablation_cases()[0]);
  EXPECT_EQ(encode_rqm1(run_pipeline(skip, corpus().train, corpus().test).model),
            encode_rqm1(run_pipeline(first, corpus().train, corpus().test).model));
  EXPECT_FALSE(run_pipeline(skip, corpus().train, corpus().test).model.adapter.has_value());
}

TEST(Pipeline, WithoutScoringDefinitionTheModelIsTheClusteredOne) {
  auto cfg = small_config();
  cfg.set("scoring_definition", "false");
  const auto run = run_pipeline(cfg, corpus().train, corpus().test);
  EXPECT_EQ(run.model, run.initial);
}

TEST(Pipeline, WithoutPcaTheInputIsUsedDirectly) {
  auto cfg = small_config();
  cfg.set("use_pca", "false");
  const auto run = run_pipeline(cfg, corpus().train, corpus().test);
  EXPECT_EQ(run.model.reduced_dim(), 16u);
}

TEST(Ablation, SixCasesInOrder) {
  const auto rows = run_component_ablation(small_config(), corpus().train, corpus().test);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].setup.name, "Case 1");
  EXPECT_FALSE(rows[0].setup.alignment);
  EXPECT_FALSE(rows[2].setup.bucketed);
  EXPECT_FALSE(rows[4].setup.scoring_definition);
  const auto table = format_ablation_table(rows);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 7);
  EXPECT_EQ(table.rfind("case     alignment  pca  bucketed  seed_aug  scoring_def", 0), 0u);
}

TEST(Ablation, SweepCoversEveryCombination) {
  auto cfg = small_config();
  cfg.set("sweep_m", "4,8");
  cfg.set("sweep_kn", "12:10,20:8");
  const auto rows = run_sweep(cfg, corpus().train, corpus().test);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].pca_dim, 4u);
  EXPECT_EQ(rows[1].n_basis, 20u);
  EXPECT_EQ(rows[3].n_buckets, 8u);
  const auto table = format_sweep_table(rows);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 5);
  cfg.set("sweep_kn", "12-10");
  EXPECT_THROW(run_sweep(cfg, corpus().train, corpus().test), Error);
}
