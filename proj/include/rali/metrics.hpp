#pragma once

// PLCC / SRCC and dataset-level evaluation reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "rali/dataset.hpp"
#include "rali/parallel.hpp"
#include "rali/scoring.hpp"

namespace rali {

/// Pearson correlation. Constant input on either side is DegenerateInput.
inline double plcc(std::span<const double> pred, std::span<const double> truth) {
  require_same_dim(pred.size(), truth.size(), "plcc");
  if (pred.size() < 2) throw Error(ErrorKind::DegenerateInput, "correlation needs at least 2 samples");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  const double mt = std::accumulate(truth.begin(), truth.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i] - mp;
    const double dy = truth[i] - mt;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw Error(ErrorKind::DegenerateInput, "correlation of a constant sequence");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based fractional ranks; tied values share their average rank.
inline std::vector<double> midranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double srcc(std::span<const double> pred, std::span<const double> truth) {
  require_same_dim(pred.size(), truth.size(), "srcc");
  const auto rp = midranks(pred);
  const auto rt = midranks(truth);
  return plcc(rp, rt);
}

/// beta2 + (beta1 - beta2) / (1 + exp(-(x - beta3) / |beta4|))
struct Logistic4 {
  double beta1 = 5.0;
  double beta2 = 1.0;
  double beta3 = 3.0;
  double beta4 = 1.0;

  double operator()(double x) const { return beta2 + (beta1 - beta2) / (1.0 + std::exp(-(x - beta3) / std::abs(beta4))); }
};

/// Levenberg-Marquardt least-squares fit of a 4-parameter logistic mapping pred -> truth.
inline Logistic4 fit_logistic4(std::span<const double> pred, std::span<const double> truth, std::size_t max_iters = 200) {
  require_same_dim(pred.size(), truth.size(), "fit_logistic4");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  double var = 0.0;
  for (double p : pred) var += (p - mp) * (p - mp);
  Logistic4 f{*std::max_element(truth.begin(), truth.end()), *std::min_element(truth.begin(), truth.end()), mp,
              var > 0.0 ? std::sqrt(var / n) : 1.0};

  auto sse = [&](const Logistic4& g) {
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (g(pred[i]) - truth[i]) * (g(pred[i]) - truth[i]);
    return s;
  };
  double cost = sse(f);
  double damping = 1e-3;
  for (std::size_t it = 0; it < max_iters; ++it) {
    Eigen::Matrix4d jtj = Eigen::Matrix4d::Zero();
    Eigen::Vector4d jtr = Eigen::Vector4d::Zero();
    const double s4 = std::abs(f.beta4);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double e = std::exp(-(pred[i] - f.beta3) / s4);
      const double sig = 1.0 / (1.0 + e);
      const double ds = sig * (1.0 - sig);
      const double spread = f.beta1 - f.beta2;
      Eigen::Vector4d j;
      j << sig, 1.0 - sig, -spread * ds / s4, -spread * ds * (pred[i] - f.beta3) / (s4 * s4) * (f.beta4 < 0 ? -1.0 : 1.0);
      const double r = f(pred[i]) - truth[i];
      jtj += j * j.transpose();
      jtr += j * r;
    }
    bool improved = false;
    for (int attempt = 0; attempt < 10 && !improved; ++attempt) {
      Eigen::Matrix4d a = jtj;
      a.diagonal() *= 1.0 + damping;
      const Eigen::Vector4d step = a.ldlt().solve(-jtr);
      Logistic4 g{f.beta1 + step(0), f.beta2 + step(1), f.beta3 + step(2), f.beta4 + step(3)};
      if (g.beta4 == 0.0) g.beta4 = 1e-12;
      const double c = sse(g);
      if (std::isfinite(c) && c < cost) {
        const double rel = (cost - c) / std::max(cost, 1e-300);
        f = g;
        cost = c;
        damping = std::max(damping * 0.3, 1e-12);
        improved = true;
        if (rel < 1e-12) return f;
      } else {
        damping *= 10.0;
      }
    }
    if (!improved) break;
  }
  return f;
}

struct EvalReport {
  std::string dataset_name;
  std::size_t n = 0;
  double plcc = 0.0;
  double srcc = 0.0;
  double mse = 0.0;

  nlohmann::json to_json() const {
    return {{"dataset", dataset_name}, {"n", n}, {"plcc", plcc}, {"srcc", srcc}, {"mse", mse}};
  }
};

struct EvalOptions {
  bool logistic_plcc = false;  // report PLCC after a 4-parameter logistic remap
};

/// Scores clamped to [1,5] for every record.
inline std::vector<double> predict_all(const ScoringModel& model, const EmbeddingDataset& data) {
  require_same_dim(model.input_dim(), data.dim, "dataset vs model");
  std::vector<double> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    try {
      out[i] = std::clamp(predict(model, data.records[i].image_emb).score, kMinScore, kMaxScore);
    } catch (const Error& e) {
      throw Error(e.kind(), "record " + data.records[i].id + ": " + e.what());
    }
  });
  return out;
}

inline EvalReport evaluate(const ScoringModel& model, const EmbeddingDataset& data, std::string name = "dataset",
                           const EvalOptions& opts = {}) {
  if (data.empty()) throw Error(ErrorKind::Validation, "evaluation needs a nonempty dataset");
  const auto predictions = predict_all(model, data);

  // Metrics are computed over (truth, prediction) pairs in sorted order, so the
  // report is bit-identical under any permutation of the records.
  std::vector<std::pair<double, double>> pairs(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) pairs[i] = {data.records[i].score, predictions[i]};
  std::sort(pairs.begin(), pairs.end());
  std::vector<double> truth(pairs.size());
  std::vector<double> pred(pairs.size());
  double se = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    truth[i] = pairs[i].first;
    pred[i] = pairs[i].second;
    se += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  }

  EvalReport report;
  report.dataset_name = std::move(name);
  report.n = data.size();
  report.mse = se / static_cast<double>(data.size());
  report.srcc = srcc(pred, truth);
  if (opts.logistic_plcc) {
    const auto f = fit_logistic4(pred, truth);
    std::vector<double> mapped(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) mapped[i] = f(pred[i]);
    report.plcc = plcc(mapped, truth);
  } else {
    report.plcc = plcc(pred, truth);
  }
  return report;
}

/// Aligned plain-text table with "PLCC / SRCC" cells.
inline std::string format_report_table(std::span<const EvalReport> reports) {
  std::size_t width = 7;
  for (const auto& r : reports) width = std::max(width, r.dataset_name.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  %6s  %-15s  %8s\n", static_cast<int>(width), "dataset", "n", "PLCC / SRCC", "MSE");
  out += buf;
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof(buf), "%-*s  %6zu  %.3f / %.3f    %8.4f\n", static_cast<int>(width), r.dataset_name.c_str(), r.n,
                  r.plcc, r.srcc, r.mse);
    out += buf;
  }
  return out;
}

}  // namespace rali
