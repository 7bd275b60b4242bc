#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "rali/kmeans.hpp"

using namespace rali;

namespace {

std::vector<DenseVector> blobs(Rng& rng, std::size_t n, std::size_t dim, std::size_t centers, double spread) {
  std::vector<std::vector<double>> c(centers, std::vector<double>(dim));
  for (auto& v : c) {
    for (auto& x : v) x = rng.uniform(-5.0, 5.0);
  }
  std::vector<DenseVector> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> p = c[i % centers];
    for (auto& x : p) x += spread * rng.normal();
    out.emplace_back(std::move(p));
  }
  return out;
}

double objective_of(std::span<const DenseVector> pts, const KMeansResult& r) {
  double obj = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) obj += squared_distance(pts[i].span(), r.centroids[r.assignment[i]].span());
  return obj;
}

}  // namespace

TEST(Buckets, ApportionmentExample) {
  std::vector<double> scores;
  for (int i = 0; i < 10; ++i) scores.push_back(1.5);
  for (int i = 0; i < 5; ++i) scores.push_back(3.5);
  for (int i = 0; i < 5; ++i) scores.push_back(4.5);
  const auto spec = make_buckets(scores, 4, 6);
  EXPECT_EQ(spec.population, (std::vector<std::size_t>{10, 0, 5, 5}));
  EXPECT_EQ(spec.allocation, (std::vector<std::size_t>{3, 0, 2, 1}));
}

TEST(Buckets, EdgesAreHalfOpenExceptTheLast) {
  BucketSpec spec;
  spec.n_buckets = 4;
  EXPECT_EQ(spec.bucket_of(1.0), 0u);
  EXPECT_EQ(spec.bucket_of(1.9999), 0u);
  EXPECT_EQ(spec.bucket_of(2.0), 1u);
  EXPECT_EQ(spec.bucket_of(4.0), 3u);
  EXPECT_EQ(spec.bucket_of(5.0), 3u);
  EXPECT_THROW(spec.bucket_of(5.01), Error);
  EXPECT_THROW(spec.bucket_of(0.99), Error);
  spec.n_buckets = 240;
  for (std::size_t n = 0; n < 240; ++n) {
    EXPECT_EQ(spec.bucket_of(spec.lower(n)), n);
    EXPECT_EQ(spec.bucket_of(std::nextafter(spec.upper(n), 0.0)), n);
  }
}

TEST(Buckets, SingleBucketTakesEverything) {
  const std::vector<double> scores{1.0, 2.2, 4.9, 5.0};
  const auto spec = make_buckets(scores, 1, 3);
  EXPECT_EQ(spec.allocation, (std::vector<std::size_t>{3}));
}

TEST(Buckets, AllocationInvariants) {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n_buckets = 1 + rng.uniform_index(40);
    const std::size_t count = 1 + rng.uniform_index(300);
    std::vector<double> scores(count);
    // Skewed scores so that many buckets stay empty or tiny.
    for (auto& s : scores) s = 1.0 + 4.0 * std::pow(rng.uniform(), 1.0 + 3.0 * rng.uniform());
    std::size_t nonempty = 0;
    BucketSpec probe;
    probe.n_buckets = n_buckets;
    std::vector<std::size_t> pop(n_buckets, 0);
    for (double s : scores) ++pop[probe.bucket_of(s)];
    for (auto p : pop) nonempty += p > 0;
    const std::size_t k = nonempty + rng.uniform_index(count - nonempty + 1);
    const auto spec = make_buckets(scores, n_buckets, k);
    EXPECT_EQ(spec.k_effective(), k);
    EXPECT_EQ(spec.population, pop);
    for (std::size_t n = 0; n < n_buckets; ++n) {
      EXPECT_LE(spec.allocation[n], spec.population[n]);
      EXPECT_EQ(spec.allocation[n] == 0, spec.population[n] == 0);
    }
    if (nonempty > 1) EXPECT_THROW(make_buckets(scores, n_buckets, nonempty - 1), Error);
    EXPECT_THROW(make_buckets(scores, n_buckets, count + 1), Error);
  }
}

TEST(Buckets, ManyBucketsOnUniformScores) {
  Rng rng(1);
  std::vector<double> scores(5000);
  for (auto& s : scores) s = rng.uniform(1.0, 5.0);
  const auto spec = make_buckets(scores, 240, 250);
  EXPECT_EQ(spec.k_effective(), 250u);
  for (std::size_t n = 0; n < 240; ++n) EXPECT_GE(spec.allocation[n], 1u);
}

TEST(KMeans, TwoPairsOnALine) {
  const std::vector<DenseVector> pts{DenseVector{0}, DenseVector{1}, DenseVector{10}, DenseVector{11}};
  Rng rng(0);
  auto res = kmeans(pts, 2, rng);
  std::vector<double> c{res.centroids[0][0], res.centroids[1][0]};
  std::sort(c.begin(), c.end());
  EXPECT_DOUBLE_EQ(c[0], 0.5);
  EXPECT_DOUBLE_EQ(c[1], 10.5);
  EXPECT_DOUBLE_EQ(res.objective, 1.0);
  EXPECT_EQ(res.assignment[0], res.assignment[1]);
  EXPECT_NE(res.assignment[1], res.assignment[2]);
}

TEST(KMeans, OneClusterIsTheMean) {
  Rng rng(2);
  const auto pts = blobs(rng, 37, 5, 3, 1.0);
  auto res = kmeans(pts, 1, rng);
  for (std::size_t j = 0; j < 5; ++j) {
    double m = 0.0;
    for (const auto& p : pts) m += p[j];
    EXPECT_NEAR(res.centroids[0][j], m / 37.0, 1e-12);
  }
}

TEST(KMeans, AsManyClustersAsPointsGivesZeroObjective) {
  Rng rng(3);
  const auto pts = blobs(rng, 12, 3, 12, 0.5);
  auto res = kmeans(pts, 12, rng);
  EXPECT_EQ(res.objective, 0.0);
  EXPECT_THROW(kmeans(pts, 13, rng), Error);
  EXPECT_THROW(kmeans(pts, 0, rng), Error);
}

TEST(KMeans, FixedPointConditions) {
  // At convergence each point sits with its nearest centroid and each
  // centroid is the mean of its members.
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = blobs(rng, 150, 4, 5, 1.5);
    auto res = kmeans(pts, 5, rng, {1000, 0.0, 1});
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double own = squared_distance(pts[i].span(), res.centroids[res.assignment[i]].span());
      for (const auto& c : res.centroids) EXPECT_LE(own, squared_distance(pts[i].span(), c.span()) + 1e-12);
    }
    for (std::size_t j = 0; j < 5; ++j) {
      std::vector<double> mean(4, 0.0);
      std::size_t members = 0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (res.assignment[i] != j) continue;
        ++members;
        for (std::size_t d = 0; d < 4; ++d) mean[d] += pts[i][d];
      }
      ASSERT_GT(members, 0u);
      for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(res.centroids[j][d], mean[d] / members, 1e-10);
    }
    EXPECT_NEAR(res.objective, objective_of(pts, res), 1e-9);
  }
}

TEST(KMeans, ObjectiveNeverIncreases) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pts = blobs(rng, 200, 6, 8, 3.0);
    auto res = kmeans(pts, 8, rng);
    ASSERT_FALSE(res.objective_trace.empty());
    for (std::size_t t = 1; t < res.objective_trace.size(); ++t) {
      EXPECT_LE(res.objective_trace[t], res.objective_trace[t - 1] * (1.0 + 1e-12));
    }
  }
}

TEST(KMeans, MatchesExhaustiveOptimumOnSmallInstances) {
  Rng rng(2025);
  int matched = 0;
  const int instances = 100;
  for (int t = 0; t < instances; ++t) {
    const std::size_t n = 4 + rng.uniform_index(5);
    const std::size_t k = 2 + rng.uniform_index(2);
    const auto pts = blobs(rng, n, 2, k, 1.0);
    std::vector<std::vector<double>> raw;
    for (const auto& p : pts) raw.push_back(p.values());
    const double optimum = rali::testing::exhaustive_kmeans_objective(raw, k);
    Rng krng = Rng::substream(99, static_cast<std::uint64_t>(t));
    const auto res = kmeans(pts, k, krng);
    EXPECT_GE(res.objective, optimum - 1e-9);
    matched += res.objective <= optimum * (1.0 + 1e-9) + 1e-12;
  }
  EXPECT_GE(matched, 95);
}

TEST(KMeans, SeededRunsAreReproducible) {
  Rng data_rng(6);
  const auto pts = blobs(data_rng, 100, 3, 4, 2.0);
  Rng a(42), b(42);
  const auto ra = kmeans(pts, 4, a);
  const auto rb = kmeans(pts, 4, b);
  EXPECT_EQ(ra.centroids, rb.centroids);
  EXPECT_EQ(ra.assignment, rb.assignment);
}

TEST(BucketedKMeans, ScoresStayInsideTheirBucket) {
  Rng rng(7);
  const std::size_t count = 2000;
  auto pts = blobs(rng, count, 8, 10, 1.0);
  std::vector<double> scores(count);
  for (auto& s : scores) s = rng.uniform(1.0, 5.0);
  const auto spec = make_buckets(scores, 48, 50);
  const auto basis = bucketed_kmeans(pts, scores, spec, 7);
  ASSERT_EQ(basis.size(), 50u);
  for (std::size_t i = 0; i < basis.size(); ++i) {
    const auto n = basis.bucket_of[i];
    EXPECT_GE(basis.scores[i], spec.lower(n));
    EXPECT_LE(basis.scores[i], spec.upper(n));
    if (i > 0) EXPECT_GE(basis.bucket_of[i], basis.bucket_of[i - 1]);
  }
  EXPECT_EQ(bucketed_kmeans(pts, scores, spec, 7), basis);
}

TEST(BucketedKMeans, ThreadCountDoesNotChangeTheResult) {
  Rng rng(8);
  auto pts = blobs(rng, 600, 4, 6, 1.0);
  std::vector<double> scores(600);
  for (auto& s : scores) s = rng.uniform(1.0, 5.0);
  const auto spec = make_buckets(scores, 12, 30);
  const auto serial = bucketed_kmeans(pts, scores, spec, 3);
  ::setenv("RALI_THREADS", "4", 1);
  const auto threaded = bucketed_kmeans(pts, scores, spec, 3);
  ::unsetenv("RALI_THREADS");
  EXPECT_EQ(serial, threaded);
}

TEST(PlainKMeans, SingleBucketLabel) {
  Rng rng(9);
  auto pts = blobs(rng, 100, 3, 4, 1.0);
  std::vector<double> scores(100, 2.0);
  const auto basis = plain_kmeans(pts, scores, 4, 1);
  EXPECT_EQ(basis.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(basis.bucket_of[i], 0u);
    EXPECT_DOUBLE_EQ(basis.scores[i], 2.0);
  }
}
