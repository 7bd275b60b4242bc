#pragma once

// Principal component projection R^D -> R^M.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "rali/alignment.hpp"
#include "rali/dataset.hpp"
#include "rali/numcore.hpp"

namespace rali {

struct PcaModel {
  DenseVector mean;        // D
  DenseMatrix projection;  // D x M, orthonormal columns
  DenseVector eigenvalues; // M, non-increasing

  std::size_t input_dim() const noexcept { return projection.rows(); }
  std::size_t output_dim() const noexcept { return projection.cols(); }

  /// Pass-through model (zero mean, identity projection) for runs without reduction.
  static PcaModel identity(std::size_t dim) { return {DenseVector(dim), DenseMatrix::identity(dim), DenseVector(dim)}; }

  void validate() const {
    if (mean.dim() != projection.rows() || eigenvalues.dim() != projection.cols() || projection.cols() == 0) {
      throw Error(ErrorKind::Dim, "PCA model shapes are inconsistent");
    }
    mean.check_finite();
    eigenvalues.check_finite();
    for (double v : projection.span()) {
      if (!std::isfinite(v)) throw Error(ErrorKind::Numeric, "non-finite PCA projection entry");
    }
  }

  void round_to_storage() {
    rali::round_to_storage(mean.span());
    rali::round_to_storage(projection.span());
    rali::round_to_storage(eigenvalues.span());
  }

  friend bool operator==(const PcaModel&, const PcaModel&) = default;
};

/// Fit on the given embeddings: population covariance (divisor L), top-m
/// eigenvectors, each column signed so its largest-magnitude entry is positive.
inline PcaModel fit_pca(std::span<const DenseVector> embeddings, std::size_t m) {
  if (embeddings.empty()) throw Error(ErrorKind::Validation, "PCA needs at least one embedding");
  const std::size_t dim = embeddings.front().dim();
  const std::size_t count = embeddings.size();
  if (m < 1 || m > dim || m > count) {
    throw Error(ErrorKind::Param, "PCA target dimension " + std::to_string(m) + " must lie in [1, min(D=" +
                                      std::to_string(dim) + ", L=" + std::to_string(count) + ")]");
  }

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  for (const auto& e : embeddings) {
    require_same_dim(dim, e.dim(), "fit_pca");
    mean += Eigen::Map<const Eigen::VectorXd>(e.span().data(), static_cast<Eigen::Index>(dim));
  }
  mean /= static_cast<double>(count);

  Eigen::MatrixXd centered(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < count; ++i) {
    centered.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::VectorXd>(embeddings[i].span().data(), static_cast<Eigen::Index>(dim)).transpose() -
        mean.transpose();
  }
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(count);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw Error(ErrorKind::Numeric, "covariance eigen-solve failed");

  // Eigen returns ascending eigenvalues.
  const auto& values = solver.eigenvalues();
  const auto& vectors = solver.eigenvectors();
  const double largest = std::max(values(static_cast<Eigen::Index>(dim) - 1), 0.0);
  const double cutoff = largest * 1e-10;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) rank += (largest > 0.0 && values(i) > cutoff);
  if (m > rank) {
    throw Error(ErrorKind::Rank, "requested " + std::to_string(m) + " components but the data has rank " +
                                     std::to_string(rank));
  }

  PcaModel model;
  model.mean = DenseVector(std::vector<double>(mean.data(), mean.data() + dim));
  model.projection = DenseMatrix(dim, m);
  model.eigenvalues = DenseVector(m);
  for (std::size_t c = 0; c < m; ++c) {
    const Eigen::Index src = static_cast<Eigen::Index>(dim - 1 - c);
    std::size_t pivot = 0;
    for (std::size_t r = 1; r < dim; ++r) {
      if (std::abs(vectors(static_cast<Eigen::Index>(r), src)) > std::abs(vectors(static_cast<Eigen::Index>(pivot), src))) {
        pivot = r;
      }
    }
    const double sign = vectors(static_cast<Eigen::Index>(pivot), src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < dim; ++r) model.projection(r, c) = sign * vectors(static_cast<Eigen::Index>(r), src);
    model.eigenvalues[c] = std::max(values(src), 0.0);
  }
  return model;
}

/// Fit on adapted image embeddings of a dataset (raw embeddings when adapter is null).
inline PcaModel fit_pca(const EmbeddingDataset& data, const AlignmentAdapter* adapter, std::size_t m) {
  if (data.empty()) throw Error(ErrorKind::Validation, "PCA needs a nonempty dataset");
  std::vector<DenseVector> embeddings;
  embeddings.reserve(data.size());
  for (const auto& r : data.records) {
    embeddings.push_back(adapter ? apply_adapter(*adapter, r.image_emb) : r.image_emb);
  }
  return fit_pca(embeddings, m);
}

/// U^T (x - mean)
inline DenseVector project(const PcaModel& p, std::span<const double> x) {
  require_same_dim(p.input_dim(), x.size(), "project");
  std::vector<double> centered(x.begin(), x.end());
  for (std::size_t i = 0; i < centered.size(); ++i) centered[i] -= p.mean[i];
  return matvec_transposed(p.projection, centered);
}

inline DenseVector project(const PcaModel& p, const DenseVector& x) { return project(p, x.span()); }

/// mean + U z
inline DenseVector reconstruct(const PcaModel& p, std::span<const double> z) {
  require_same_dim(p.output_dim(), z.size(), "reconstruct");
  DenseVector x = matvec(p.projection, z);
  for (std::size_t i = 0; i < x.dim(); ++i) x[i] += p.mean[i];
  return x;
}

inline DenseVector reconstruct(const PcaModel& p, const DenseVector& z) { return reconstruct(p, z.span()); }

}  // namespace rali
