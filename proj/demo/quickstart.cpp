// Train on a synthetic corpus and score a few held-out images.

#include <cstdio>

#include "rali/pipeline.hpp"

int main() {
  auto [train, test] = rali::split_tail(rali::gen_synthetic({2500, 64, 7, 0.05, 4}), 500);

  rali::PipelineConfig cfg;
  cfg.set("pca_dim", "32");
  cfg.set("n_basis", "50");
  cfg.set("n_buckets", "48");
  const auto run = rali::run_pipeline(cfg, train, test);

  std::printf("held-out PLCC %.3f  SRCC %.3f\n", run.report.plcc, run.report.srcc);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& r = test.records[i];
    std::printf("%s  truth %.2f  predicted %.2f\n", r.id.c_str(), r.score, rali::predict(run.model, r.image_emb).score);
  }
}
