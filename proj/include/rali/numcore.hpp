#pragma once

// Dense vector/matrix primitives, cosine, softmax and the deterministic RNG
// shared by every stage of the engine. All arithmetic is double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rali/error.hpp"

namespace rali {

class DenseVector {
 public:
  DenseVector() = default;

  explicit DenseVector(std::size_t dim) : values_(dim, 0.0) {}

  explicit DenseVector(std::vector<double> values) : values_(std::move(values)) { check_finite(); }

  DenseVector(std::initializer_list<double> values) : values_(values) { check_finite(); }

  std::size_t dim() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }

  std::span<const double> span() const noexcept { return values_; }
  std::span<double> span() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  void check_finite() const {
    for (double v : values_) {
      if (!std::isfinite(v)) throw Error(ErrorKind::Numeric, "non-finite vector entry");
    }
  }

  friend bool operator==(const DenseVector&, const DenseVector&) = default;

 private:
  std::vector<double> values_;
};

/// Row-major dense matrix.
class DenseMatrix {
 public:
  DenseMatrix() = default;

  DenseMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), values_(rows * cols, 0.0) {}

  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw Error(ErrorKind::Dim, "matrix storage size " + std::to_string(values_.size()) + " != " +
                                      std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    for (double v : values_) {
      if (!std::isfinite(v)) throw Error(ErrorKind::Numeric, "non-finite matrix entry");
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }

  std::span<const double> span() const noexcept { return values_; }
  std::span<double> span() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

inline void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw Error(ErrorKind::Dim, std::string(what) + ": dimension " + std::to_string(a) + " vs " + std::to_string(b));
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a.size(), b.size(), "squared_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// <a,b> / (|a| |b|), clamped to [-1, 1]. Zero-norm inputs are an error.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a.size(), b.size(), "cosine");
  double ab = 0.0;
  double aa = 0.0;
  double bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (!(aa > 0.0) || !(bb > 0.0)) throw Error(ErrorKind::DegenerateInput, "cosine of a zero-norm vector");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

inline double cosine(const DenseVector& a, const DenseVector& b) { return cosine(a.span(), b.span()); }

inline DenseVector softmax(std::span<const double> x) {
  if (x.empty()) throw Error(ErrorKind::Dim, "softmax of an empty vector");
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : x) {
    if (!std::isfinite(v)) throw Error(ErrorKind::Numeric, "softmax input is not finite");
    hi = std::max(hi, v);
  }
  DenseVector out(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - hi);
    sum += out[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) out[i] /= sum;
  return out;
}

inline DenseVector softmax(const DenseVector& x) { return softmax(x.span()); }

/// y = A x
inline DenseVector matvec(const DenseMatrix& a, std::span<const double> x) {
  require_same_dim(a.cols(), x.size(), "matvec");
  DenseVector y(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x);
  return y;
}

/// y = A^T x
inline DenseVector matvec_transposed(const DenseMatrix& a, std::span<const double> x) {
  require_same_dim(a.rows(), x.size(), "matvec_transposed");
  DenseVector y(a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const auto row = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) y[c] += row[c] * xr;
  }
  return y;
}

/// Round to the nearest binary32 value and widen back; on-disk precision.
inline double to_storage(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void round_to_storage(std::span<double> values) {
  for (double& v : values) v = to_storage(v);
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Seedable deterministic generator. The engine (mt19937_64) and every
/// transform below are fully specified, so a seed reproduces the stream
/// bit-for-bit on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(detail::splitmix64(seed)) {}

  /// Independent stream for a named stage, e.g. substream(seed, "align").
  static Rng substream(std::uint64_t base_seed, std::string_view name) {
    return Rng(detail::splitmix64(base_seed) ^ detail::fnv1a(name));
  }

  static Rng substream(std::uint64_t base_seed, std::uint64_t index) {
    return Rng(detail::splitmix64(base_seed ^ detail::splitmix64(index + 0x632BE59BD9B4E019ULL)));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), rejection-sampled so it is unbiased.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw Error(ErrorKind::Param, "uniform_index over an empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return static_cast<std::size_t>(r % bound);
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Fisher-Yates.
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace rali
