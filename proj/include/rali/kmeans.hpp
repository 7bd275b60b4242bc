#pragma once

// Score buckets over [1,5] and k-means run independently inside each bucket.
// Output basis vectors are flattened over (bucket, cluster) in ascending order.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rali/dataset.hpp"
#include "rali/logging.hpp"
#include "rali/numcore.hpp"
#include "rali/parallel.hpp"

namespace rali {

struct BucketSpec {
  std::size_t n_buckets = 1;
  std::vector<std::size_t> population;  // samples per bucket
  std::vector<std::size_t> allocation;  // clusters per bucket (k_n)

  std::size_t k_effective() const { return std::accumulate(allocation.begin(), allocation.end(), std::size_t{0}); }

  double lower(std::size_t n) const { return kMinScore + (kMaxScore - kMinScore) * static_cast<double>(n) / static_cast<double>(n_buckets); }
  double upper(std::size_t n) const { return kMinScore + (kMaxScore - kMinScore) * static_cast<double>(n + 1) / static_cast<double>(n_buckets); }

  /// Buckets are [lower, upper) except the last, which is closed at 5.
  std::size_t bucket_of(double score) const {
    if (!(score >= kMinScore && score <= kMaxScore)) {
      throw Error(ErrorKind::Validation, "score " + std::to_string(score) + " outside [1,5]");
    }
    auto idx = static_cast<std::size_t>(std::floor((score - kMinScore) * static_cast<double>(n_buckets) / (kMaxScore - kMinScore)));
    idx = std::min(idx, n_buckets - 1);
    while (idx + 1 < n_buckets && score >= lower(idx + 1)) ++idx;
    while (idx > 0 && score < lower(idx)) --idx;
    return idx;
  }
};

/// Cluster budget per bucket. Hamilton (largest remainder) apportionment of
/// k_total by bucket population, with every nonempty bucket held at >= 1 and
/// every bucket capped at its population; buckets pinned by either bound are
/// fixed and the rest re-apportioned until stable. Remainder ties go to the
/// lower bucket index.
inline BucketSpec make_buckets(std::span<const double> scores, std::size_t n_buckets, std::size_t k_total) {
  if (n_buckets < 1) throw Error(ErrorKind::Param, "n_buckets must be >= 1");
  BucketSpec spec;
  spec.n_buckets = n_buckets;
  spec.population.assign(n_buckets, 0);
  spec.allocation.assign(n_buckets, 0);
  for (double s : scores) ++spec.population[spec.bucket_of(s)];

  std::size_t nonempty = 0;
  for (auto p : spec.population) nonempty += p > 0;
  if (k_total < nonempty) {
    throw Error(ErrorKind::Alloc, "k_total " + std::to_string(k_total) + " is smaller than the " +
                                      std::to_string(nonempty) + " nonempty buckets");
  }
  if (k_total > scores.size()) {
    throw Error(ErrorKind::Alloc, "k_total " + std::to_string(k_total) + " exceeds the " + std::to_string(scores.size()) +
                                      " samples available");
  }

  std::vector<bool> fixed(n_buckets, false);
  for (std::size_t n = 0; n < n_buckets; ++n) fixed[n] = spec.population[n] == 0;

  while (true) {
    std::size_t budget = k_total;
    std::size_t free_pop = 0;
    for (std::size_t n = 0; n < n_buckets; ++n) {
      if (fixed[n]) budget -= spec.allocation[n];
      else free_pop += spec.population[n];
    }
    if (free_pop == 0) break;

    std::vector<double> quota(n_buckets, 0.0);
    for (std::size_t n = 0; n < n_buckets; ++n) {
      if (!fixed[n]) {
        quota[n] = static_cast<double>(budget) * static_cast<double>(spec.population[n]) / static_cast<double>(free_pop);
      }
    }
    // Floor pins first, then caps; pinning only ever raises the remaining quotas after a cap.
    bool pinned = false;
    for (std::size_t n = 0; n < n_buckets; ++n) {
      if (!fixed[n] && quota[n] < 1.0) {
        spec.allocation[n] = 1;
        fixed[n] = pinned = true;
      }
    }
    if (pinned) continue;
    for (std::size_t n = 0; n < n_buckets; ++n) {
      if (!fixed[n] && quota[n] > static_cast<double>(spec.population[n])) {
        spec.allocation[n] = spec.population[n];
        fixed[n] = pinned = true;
      }
    }
    if (pinned) continue;

    std::size_t assigned = 0;
    std::vector<std::size_t> free;
    for (std::size_t n = 0; n < n_buckets; ++n) {
      if (fixed[n]) continue;
      spec.allocation[n] = static_cast<std::size_t>(std::floor(quota[n]));
      assigned += spec.allocation[n];
      free.push_back(n);
    }
    std::stable_sort(free.begin(), free.end(), [&](std::size_t a, std::size_t b) {
      return quota[a] - std::floor(quota[a]) > quota[b] - std::floor(quota[b]);
    });
    for (std::size_t i = 0; assigned < budget; ++i, ++assigned) ++spec.allocation[free[i % free.size()]];
    break;
  }
  return spec;
}

struct BasisSet {
  std::vector<DenseVector> centroids;  // mu_i, dim M
  std::vector<double> scores;          // f_i
  std::vector<std::uint32_t> bucket_of;

  std::size_t size() const noexcept { return centroids.size(); }
  std::size_t dim() const noexcept { return centroids.empty() ? 0 : centroids.front().dim(); }

  void validate() const {
    if (centroids.empty()) throw Error(ErrorKind::Validation, "basis set is empty");
    if (scores.size() != centroids.size() || bucket_of.size() != centroids.size()) {
      throw Error(ErrorKind::Dim, "basis centroid/score/bucket lengths differ");
    }
    for (std::size_t i = 0; i < centroids.size(); ++i) {
      require_same_dim(dim(), centroids[i].dim(), "basis centroid");
      centroids[i].check_finite();
      if (!(norm2(centroids[i].span()) > 0.0)) {
        throw Error(ErrorKind::DegenerateInput, "basis centroid " + std::to_string(i) + " has zero norm");
      }
      if (!std::isfinite(scores[i])) throw Error(ErrorKind::Numeric, "non-finite basis score");
    }
  }

  void round_to_storage() {
    for (auto& c : centroids) rali::round_to_storage(c.span());
    rali::round_to_storage(scores);
  }

  friend bool operator==(const BasisSet&, const BasisSet&) = default;
};

struct KMeansOptions {
  std::size_t max_iters = 300;
  double tol = 1e-6;      // max centroid shift
  std::size_t n_init = 10; // k-means++ restarts, best objective kept
};

struct KMeansResult {
  std::vector<DenseVector> centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> objective_trace;  // sum of squared distances after each Lloyd step
  double objective = 0.0;
  std::size_t iterations = 0;
};

namespace detail {

inline std::vector<DenseVector> kmeans_plus_plus(std::span<const DenseVector> points, std::size_t k, Rng& rng) {
  std::vector<DenseVector> centers;
  centers.reserve(k);
  centers.push_back(points[rng.uniform_index(points.size())]);
  std::vector<double> nearest(points.size(), std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(points[i].span(), centers.back().span()));
      total += nearest[i];
    }
    std::size_t pick = points.size() - 1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        acc += nearest[i];
        if (target < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_index(points.size());
    }
    centers.push_back(points[pick]);
  }
  return centers;
}

inline std::size_t nearest_centroid(std::span<const double> x, const std::vector<DenseVector>& centroids) {
  std::size_t best = 0;
  double best_d = squared_distance(x, centroids[0].span());
  for (std::size_t j = 1; j < centroids.size(); ++j) {
    const double d = squared_distance(x, centroids[j].span());
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

inline KMeansResult lloyd(std::span<const DenseVector> points, std::size_t k, Rng& rng, const KMeansOptions& opts) {
  const std::size_t n = points.size();
  const std::size_t dim = points.front().dim();
  KMeansResult res;
  res.centroids = kmeans_plus_plus(points, k, rng);
  res.assignment.assign(n, k);
  std::vector<std::size_t> counts(k);

  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    std::vector<std::size_t> next(n);
    for (std::size_t i = 0; i < n; ++i) next[i] = nearest_centroid(points[i].span(), res.centroids);

    // Empty-cluster repair: reseed from the farthest member of the largest cluster.
    for (std::size_t j = 0; j < k; ++j) {
      std::fill(counts.begin(), counts.end(), 0);
      for (auto a : next) ++counts[a];
      if (counts[j] > 0) continue;
      const std::size_t largest = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      if (counts[largest] < 2) throw Error(ErrorKind::Alloc, "cannot repair empty cluster: too few points");
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (next[i] != largest) continue;
        const double d = squared_distance(points[i].span(), res.centroids[largest].span());
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      res.centroids[j] = points[far];
      next[far] = j;
    }

    const bool changed = next != res.assignment;
    res.assignment = std::move(next);

    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = sums[res.assignment[i]];
      const auto x = points[i].span();
      for (std::size_t d = 0; d < dim; ++d) s[d] += x[d];
      ++counts[res.assignment[i]];
    }
    double shift = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      for (auto& v : sums[j]) v /= static_cast<double>(counts[j]);
      shift = std::max(shift, std::sqrt(squared_distance(sums[j], res.centroids[j].span())));
      res.centroids[j] = DenseVector(std::move(sums[j]));
    }

    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      objective += squared_distance(points[i].span(), res.centroids[res.assignment[i]].span());
    }
    if (!res.objective_trace.empty()) {
      const double prev = res.objective_trace.back();
      if (objective > prev + 1e-12 * std::max(1.0, prev)) {
        throw Error(ErrorKind::Numeric, "Lloyd objective increased from " + std::to_string(prev) + " to " +
                                            std::to_string(objective));
      }
    }
    res.objective_trace.push_back(objective);
    res.objective = objective;
    res.iterations = it + 1;
    if (!changed || shift < opts.tol) break;
  }
  return res;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding (squared Euclidean distance,
/// nearest-centroid ties to the lower index).
inline KMeansResult kmeans(std::span<const DenseVector> points, std::size_t k, Rng& rng, const KMeansOptions& opts = {}) {
  if (k == 0) throw Error(ErrorKind::Param, "k-means needs k >= 1");
  if (points.size() < k) {
    throw Error(ErrorKind::Alloc, "k-means with k=" + std::to_string(k) + " over only " + std::to_string(points.size()) + " points");
  }
  KMeansResult best;
  for (std::size_t trial = 0; trial < std::max<std::size_t>(1, opts.n_init); ++trial) {
    auto res = detail::lloyd(points, k, rng, opts);
    if (trial == 0 || res.objective < best.objective) best = std::move(res);
  }
  return best;
}

namespace detail {

inline void append_clusters(BasisSet& basis, const KMeansResult& res, std::span<const double> scores, std::uint32_t bucket) {
  const std::size_t k = res.centroids.size();
  std::vector<double> score_sum(k, 0.0);
  std::vector<std::size_t> members(k, 0);
  for (std::size_t i = 0; i < res.assignment.size(); ++i) {
    score_sum[res.assignment[i]] += scores[i];
    ++members[res.assignment[i]];
  }
  for (std::size_t j = 0; j < k; ++j) {
    basis.centroids.push_back(res.centroids[j]);
    basis.scores.push_back(score_sum[j] / static_cast<double>(members[j]));
    basis.bucket_of.push_back(bucket);
  }
}

}  // namespace detail

/// Per-bucket k-means; bucket n draws its k-means++ seeds from
/// Rng::substream(seed, "kmeans:bucket:<n>"). f_nj is the mean member score.
inline BasisSet bucketed_kmeans(std::span<const DenseVector> embeddings, std::span<const double> scores, const BucketSpec& spec,
                                std::uint64_t seed, const KMeansOptions& opts = {}) {
  require_same_dim(embeddings.size(), scores.size(), "bucketed_kmeans embeddings/scores");
  if (spec.allocation.size() != spec.n_buckets) throw Error(ErrorKind::Param, "bucket allocation has wrong length");

  std::vector<std::vector<std::size_t>> members(spec.n_buckets);
  for (std::size_t i = 0; i < scores.size(); ++i) members[spec.bucket_of(scores[i])].push_back(i);
  for (std::size_t n = 0; n < spec.n_buckets; ++n) {
    if ((spec.allocation[n] == 0) != members[n].empty()) {
      throw Error(ErrorKind::Param, "bucket allocation is inconsistent with the scores in bucket " + std::to_string(n));
    }
  }

  std::vector<KMeansResult> results(spec.n_buckets);
  std::vector<std::vector<double>> bucket_scores(spec.n_buckets);
  parallel_for(spec.n_buckets, [&](std::size_t n) {
    if (spec.allocation[n] == 0) return;
    std::vector<DenseVector> pts;
    pts.reserve(members[n].size());
    for (auto i : members[n]) {
      pts.push_back(embeddings[i]);
      bucket_scores[n].push_back(scores[i]);
    }
    Rng rng = Rng::substream(seed, "kmeans:bucket:" + std::to_string(n));
    results[n] = kmeans(pts, spec.allocation[n], rng, opts);
  });

  BasisSet basis;
  for (std::size_t n = 0; n < spec.n_buckets; ++n) {
    if (spec.allocation[n] == 0) continue;
    detail::append_clusters(basis, results[n], bucket_scores[n], static_cast<std::uint32_t>(n));
  }
  basis.validate();
  return basis;
}

/// One global k-means with K clusters, ignoring buckets (ablation arm).
inline BasisSet plain_kmeans(std::span<const DenseVector> embeddings, std::span<const double> scores, std::size_t k,
                             std::uint64_t seed, const KMeansOptions& opts = {}) {
  require_same_dim(embeddings.size(), scores.size(), "plain_kmeans embeddings/scores");
  Rng rng = Rng::substream(seed, "kmeans:global");
  const auto res = kmeans(embeddings, k, rng, opts);
  BasisSet basis;
  detail::append_clusters(basis, res, scores, 0);
  basis.validate();
  return basis;
}

}  // namespace rali
