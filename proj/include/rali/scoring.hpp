#pragma once

// Softmax-of-cosine scoring over the basis set and its end-to-end fine-tuning.
//
//   z   = U^T (adapter(x) - mean)
//   w_i = softmax_i(scale * cos(z, mu_i))
//   y   = sum_i w_i f_i

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rali/alignment.hpp"
#include "rali/binary_io.hpp"
#include "rali/dataset.hpp"
#include "rali/kmeans.hpp"
#include "rali/logging.hpp"
#include "rali/numcore.hpp"
#include "rali/pca.hpp"

namespace rali {

struct ScoringModel {
  PcaModel pca;
  BasisSet basis;
  std::optional<AlignmentAdapter> adapter;
  double softmax_scale = 1.0;
  bool scale_trained = false;

  std::size_t input_dim() const noexcept { return pca.input_dim(); }
  std::size_t reduced_dim() const noexcept { return pca.output_dim(); }

  void validate() const {
    pca.validate();
    basis.validate();
    require_same_dim(pca.output_dim(), basis.dim(), "basis centroid vs PCA output");
    if (adapter) {
      adapter->validate();
      require_same_dim(adapter->dim(), pca.input_dim(), "adapter vs PCA input");
    }
    if (!std::isfinite(softmax_scale)) throw Error(ErrorKind::Numeric, "softmax scale is not finite");
  }

  void round_to_storage() {
    pca.round_to_storage();
    basis.round_to_storage();
    if (adapter) adapter->round_to_storage();
    softmax_scale = to_storage(softmax_scale);
  }

  friend bool operator==(const ScoringModel&, const ScoringModel&) = default;
};

/// Adapter (if any) followed by the PCA projection.
inline DenseVector embed(const ScoringModel& model, const DenseVector& image_emb) {
  require_same_dim(model.input_dim(), image_emb.dim(), "image embedding vs model");
  if (model.adapter) return project(model.pca, apply_adapter(*model.adapter, image_emb));
  return project(model.pca, image_emb);
}

struct Prediction {
  double score = 0.0;
  DenseVector weights;
};

inline Prediction predict_reduced(const ScoringModel& model, const DenseVector& z) {
  require_same_dim(model.reduced_dim(), z.dim(), "reduced embedding");
  if (!(norm2(z.span()) > 0.0)) throw Error(ErrorKind::DegenerateInput, "projected embedding has zero norm");
  const std::size_t k = model.basis.size();
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < k; ++i) logits[i] = model.softmax_scale * cosine(z, model.basis.centroids[i]);
  Prediction out{0.0, softmax(logits)};
  for (std::size_t i = 0; i < k; ++i) out.score += out.weights[i] * model.basis.scores[i];
  return out;
}

inline Prediction predict(const ScoringModel& model, const DenseVector& image_emb) {
  return predict_reduced(model, embed(model, image_emb));
}

enum TrainTarget : unsigned {
  kTrainCentroids = 1u << 0,
  kTrainScores = 1u << 1,
  kTrainPca = 1u << 2,
  kTrainScale = 1u << 3,
};

struct ScoreGradients {
  double prediction = 0.0;
  double loss = 0.0;  // (y - s)^2 / 2
  std::vector<DenseVector> centroids;
  std::vector<double> scores;
  double scale = 0.0;
  std::optional<DenseMatrix> projection;  // filled when requested
};

/// Analytic partials of (y - s)^2 / 2 with respect to the basis, the softmax
/// scale and optionally the projection matrix U (mean held fixed).
inline ScoreGradients score_gradients(const ScoringModel& model, const DenseVector& image_emb, double target,
                                      bool with_projection = false) {
  const DenseVector adapted = model.adapter ? apply_adapter(*model.adapter, image_emb) : image_emb;
  require_same_dim(model.input_dim(), adapted.dim(), "image embedding vs model");
  const DenseVector z = project(model.pca, adapted);
  const double z_norm = norm2(z.span());
  if (!(z_norm > 0.0)) throw Error(ErrorKind::DegenerateInput, "projected embedding has zero norm");

  const std::size_t k = model.basis.size();
  const std::size_t m = z.dim();
  std::vector<double> cos(k);
  std::vector<double> mu_norm(k);
  for (std::size_t i = 0; i < k; ++i) {
    mu_norm[i] = norm2(model.basis.centroids[i].span());
    if (!(mu_norm[i] > 0.0)) throw Error(ErrorKind::DegenerateInput, "basis centroid " + std::to_string(i) + " has zero norm");
    cos[i] = dot(z.span(), model.basis.centroids[i].span()) / (z_norm * mu_norm[i]);
  }
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < k; ++i) logits[i] = model.softmax_scale * cos[i];
  const DenseVector w = softmax(logits);
  double y = 0.0;
  for (std::size_t i = 0; i < k; ++i) y += w[i] * model.basis.scores[i];
  const double residual = y - target;

  ScoreGradients g;
  g.prediction = y;
  g.loss = 0.5 * residual * residual;
  g.scores.resize(k);
  g.centroids.assign(k, DenseVector(m));
  std::vector<double> d_z(m, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    g.scores[i] = residual * w[i];
    const double centered = model.basis.scores[i] - y;
    g.scale += residual * w[i] * centered * cos[i];
    // dL/dcos_i, then the cosine derivative with respect to mu_i and z.
    const double d_cos = residual * model.softmax_scale * w[i] * centered;
    const auto mu = model.basis.centroids[i].span();
    for (std::size_t d = 0; d < m; ++d) {
      const double z_hat = z[d] / z_norm;
      const double mu_hat = mu[d] / mu_norm[i];
      g.centroids[i][d] = d_cos * (z_hat - cos[i] * mu_hat) / mu_norm[i];
      d_z[d] += d_cos * (mu_hat - cos[i] * z_hat) / z_norm;
    }
  }
  if (with_projection) {
    const std::size_t dim = model.input_dim();
    DenseMatrix gu(dim, m);
    for (std::size_t r = 0; r < dim; ++r) {
      const double centered = adapted[r] - model.pca.mean[r];
      auto row = gu.row(r);
      for (std::size_t c = 0; c < m; ++c) row[c] = centered * d_z[c];
    }
    g.projection = std::move(gu);
  }
  return g;
}

struct ScoreFitConfig {
  double lr = 3e-2;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  unsigned train_targets = kTrainCentroids | kTrainScores;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorKind::Param, "scoring lr must be > 0");
    if (batch_size < 1) throw Error(ErrorKind::Param, "scoring batch_size must be >= 1");
    if ((train_targets & (kTrainCentroids | kTrainScores | kTrainPca | kTrainScale)) == 0) {
      throw Error(ErrorKind::Param, "train_targets is empty");
    }
  }
};

struct FitHistory {
  std::vector<double> epoch_mse;  // mean (y - s)^2 over batches, measured before each update
};

/// Mini-batch gradient descent on the mean squared error (y - s)^2 over the
/// configured targets. Zero epochs return the model untouched; otherwise the
/// result is rounded to f32 storage precision.
inline ScoringModel finetune_scoring(const ScoringModel& init, const EmbeddingDataset& data, const ScoreFitConfig& cfg,
                                     FitHistory* history = nullptr) {
  cfg.validate();
  init.validate();
  if (cfg.epochs == 0) return init;
  if (data.empty()) throw Error(ErrorKind::Validation, "scoring fine-tune needs a nonempty dataset");
  require_same_dim(init.input_dim(), data.dim, "dataset vs model");

  ScoringModel model = init;
  const bool train_pca = cfg.train_targets & kTrainPca;
  if (cfg.train_targets & kTrainScale) model.scale_trained = true;

  // With the adapter fixed, the adapted embeddings can be computed once and
  // treated as the model input.
  std::vector<DenseVector> inputs;
  inputs.reserve(data.size());
  for (const auto& r : data.records) {
    inputs.push_back(model.adapter ? apply_adapter(*model.adapter, r.image_emb) : r.image_emb);
  }
  ScoringModel bare = model;
  bare.adapter.reset();

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double mse_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(stop - start);
      std::vector<DenseVector> d_mu(bare.basis.size(), DenseVector(bare.reduced_dim()));
      std::vector<double> d_f(bare.basis.size(), 0.0);
      double d_scale = 0.0;
      DenseMatrix d_u = train_pca ? DenseMatrix(bare.input_dim(), bare.reduced_dim()) : DenseMatrix();
      double batch_mse = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        const auto idx = order[k];
        ScoreGradients g;
        try {
          g = score_gradients(bare, inputs[idx], data.records[idx].score, train_pca);
        } catch (const Error& e) {
          throw Error(e.kind(), "record " + data.records[idx].id + ": " + e.what());
        }
        batch_mse += 2.0 * g.loss;
        // d/dtheta (y - s)^2 = 2 * d/dtheta (y - s)^2 / 2
        for (std::size_t i = 0; i < d_mu.size(); ++i) {
          d_f[i] += 2.0 * inv * g.scores[i];
          for (std::size_t d = 0; d < d_mu[i].dim(); ++d) d_mu[i][d] += 2.0 * inv * g.centroids[i][d];
        }
        d_scale += 2.0 * inv * g.scale;
        if (train_pca) {
          auto dst = d_u.span();
          const auto src = g.projection->span();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += 2.0 * inv * src[i];
        }
      }
      mse_sum += batch_mse * inv;
      ++batches;

      if (cfg.train_targets & kTrainScores) {
        for (std::size_t i = 0; i < d_f.size(); ++i) bare.basis.scores[i] -= cfg.lr * d_f[i];
      }
      if (cfg.train_targets & kTrainCentroids) {
        for (std::size_t i = 0; i < d_mu.size(); ++i) {
          for (std::size_t d = 0; d < d_mu[i].dim(); ++d) bare.basis.centroids[i][d] -= cfg.lr * d_mu[i][d];
        }
      }
      if (cfg.train_targets & kTrainScale) bare.softmax_scale -= cfg.lr * d_scale;
      if (train_pca) {
        auto dst = bare.pca.projection.span();
        const auto src = d_u.span();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= cfg.lr * src[i];
      }
    }
    const double mse = mse_sum / static_cast<double>(batches);
    if (!std::isfinite(mse)) throw Error(ErrorKind::Numeric, "scoring fine-tune diverged");
    if (history) history->epoch_mse.push_back(mse);
    log::info("finetune epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) + " mse=" + std::to_string(mse));
  }

  model.pca = std::move(bare.pca);
  model.basis = std::move(bare.basis);
  model.softmax_scale = bare.softmax_scale;
  model.round_to_storage();
  model.validate();
  return model;
}

// RQM1 layout (little-endian; counts u32, parameters f32):
//   "RQM1" | version | D | M | K | flags (bit0 adapter present, bit1 scale trained)
//   PCA:    mean[D] | projection[D*M] row-major | eigenvalues[M]
//   basis:  centroids[K*M] | scores[K] | bucket index u32[K]
//   adapter payload (when flagged) | softmax_scale
inline constexpr std::uint32_t kRqm1Version = 1;
inline constexpr std::uint32_t kFlagAdapter = 1u << 0;
inline constexpr std::uint32_t kFlagScaleTrained = 1u << 1;

inline io::Bytes encode_rqm1(const ScoringModel& model) {
  model.validate();
  const auto dim = static_cast<std::uint32_t>(model.input_dim());
  const auto m = static_cast<std::uint32_t>(model.reduced_dim());
  const auto k = static_cast<std::uint32_t>(model.basis.size());
  std::uint32_t flags = 0;
  if (model.adapter) flags |= kFlagAdapter;
  if (model.scale_trained) flags |= kFlagScaleTrained;
  io::ByteWriter w;
  w.put_magic("RQM1");
  w.put<std::uint32_t>(kRqm1Version);
  w.put<std::uint32_t>(dim);
  w.put<std::uint32_t>(m);
  w.put<std::uint32_t>(k);
  w.put<std::uint32_t>(flags);
  w.put_f32(model.pca.mean.span());
  w.put_f32(model.pca.projection.span());
  w.put_f32(model.pca.eigenvalues.span());
  for (const auto& c : model.basis.centroids) w.put_f32(c.span());
  w.put_f32(model.basis.scores);
  for (auto b : model.basis.bucket_of) w.put<std::uint32_t>(b);
  if (model.adapter) write_adapter_payload(w, *model.adapter);
  w.put_f32(model.softmax_scale);
  return w.take();
}

inline ScoringModel decode_rqm1(std::span<const std::uint8_t> bytes) {
  io::ByteReader rd(bytes);
  rd.expect_magic("RQM1");
  const auto version = rd.get<std::uint32_t>();
  if (version != kRqm1Version) throw Error(ErrorKind::Format, "unsupported RQM1 version " + std::to_string(version));
  const std::size_t dim = rd.get<std::uint32_t>();
  const std::size_t m = rd.get<std::uint32_t>();
  const std::size_t k = rd.get<std::uint32_t>();
  const auto flags = rd.get<std::uint32_t>();
  if (dim == 0 || m == 0 || k == 0 || m > dim) throw Error(ErrorKind::Format, "RQM1 header has invalid D/M/K");
  if (flags & ~(kFlagAdapter | kFlagScaleTrained)) throw Error(ErrorKind::Format, "RQM1 header has unknown flags");
  const std::size_t expected = 4 * (dim + dim * m + m + k * m + k + k + 1 + ((flags & kFlagAdapter) ? dim * dim + dim + 1 : 0));
  if (rd.remaining() != expected) throw Error(ErrorKind::Format, "RQM1 payload size does not match its header");

  ScoringModel model;
  std::vector<double> mean(dim);
  rd.get_f32(mean);
  std::vector<double> proj(dim * m);
  rd.get_f32(proj);
  std::vector<double> eig(m);
  rd.get_f32(eig);
  model.pca = PcaModel{DenseVector(std::move(mean)), DenseMatrix(dim, m, std::move(proj)), DenseVector(std::move(eig))};
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> c(m);
    rd.get_f32(c);
    model.basis.centroids.emplace_back(std::move(c));
  }
  model.basis.scores.resize(k);
  rd.get_f32(model.basis.scores);
  for (std::size_t i = 0; i < k; ++i) model.basis.bucket_of.push_back(rd.get<std::uint32_t>());
  if (flags & kFlagAdapter) model.adapter = read_adapter_payload(rd, dim);
  model.softmax_scale = rd.get_f32();
  model.scale_trained = flags & kFlagScaleTrained;
  rd.expect_end();
  model.validate();
  return model;
}

inline void save_model(const ScoringModel& model, const std::filesystem::path& path) {
  io::write_file(path, encode_rqm1(model));
}

inline ScoringModel load_model(const std::filesystem::path& path) { return decode_rqm1(io::read_file(path)); }

// RQP1 (standalone PCA stage artifact): "RQP1" | version | D | M | mean[D] | projection[D*M] | eigenvalues[M]
inline constexpr std::uint32_t kRqp1Version = 1;

inline io::Bytes encode_rqp1(const PcaModel& pca) {
  pca.validate();
  io::ByteWriter w;
  w.put_magic("RQP1");
  w.put<std::uint32_t>(kRqp1Version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pca.input_dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pca.output_dim()));
  w.put_f32(pca.mean.span());
  w.put_f32(pca.projection.span());
  w.put_f32(pca.eigenvalues.span());
  return w.take();
}

inline PcaModel decode_rqp1(std::span<const std::uint8_t> bytes) {
  io::ByteReader rd(bytes);
  rd.expect_magic("RQP1");
  const auto version = rd.get<std::uint32_t>();
  if (version != kRqp1Version) throw Error(ErrorKind::Format, "unsupported RQP1 version " + std::to_string(version));
  const std::size_t dim = rd.get<std::uint32_t>();
  const std::size_t m = rd.get<std::uint32_t>();
  if (dim == 0 || m == 0 || m > dim) throw Error(ErrorKind::Format, "RQP1 header has invalid D/M");
  if (rd.remaining() != 4 * (dim + dim * m + m)) throw Error(ErrorKind::Format, "RQP1 payload size does not match its header");
  std::vector<double> mean(dim);
  rd.get_f32(mean);
  std::vector<double> proj(dim * m);
  rd.get_f32(proj);
  std::vector<double> eig(m);
  rd.get_f32(eig);
  PcaModel pca{DenseVector(std::move(mean)), DenseMatrix(dim, m, std::move(proj)), DenseVector(std::move(eig))};
  pca.validate();
  return pca;
}

}  // namespace rali
