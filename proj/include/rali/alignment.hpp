#pragma once

// Image-side affine adapter trained with a symmetric image/text InfoNCE loss
// against frozen text embeddings.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rali/binary_io.hpp"
#include "rali/dataset.hpp"
#include "rali/logging.hpp"
#include "rali/numcore.hpp"

namespace rali {

inline constexpr double kMinLogTemperature = -4.605170185988091;  // ln 0.01
inline constexpr double kMaxLogTemperature = 4.605170185988091;   // ln 100

struct AlignmentAdapter {
  DenseMatrix weight;  // D x D
  DenseVector bias;    // D
  double log_temperature = 0.0;

  static AlignmentAdapter identity(std::size_t dim, double temperature = 0.07) {
    return {DenseMatrix::identity(dim), DenseVector(dim), std::log(temperature)};
  }

  std::size_t dim() const noexcept { return bias.dim(); }
  double temperature() const { return std::exp(log_temperature); }

  void validate() const {
    if (weight.rows() != bias.dim() || weight.cols() != bias.dim() || bias.dim() == 0) {
      throw Error(ErrorKind::Dim, "adapter weight must be DxD with a length-D bias");
    }
    for (double v : weight.span()) {
      if (!std::isfinite(v)) throw Error(ErrorKind::Numeric, "non-finite adapter weight");
    }
    bias.check_finite();
    const double t = temperature();
    if (!(t > 0.0 && t < 1000.0)) throw Error(ErrorKind::Numeric, "adapter temperature outside (0, 1000)");
  }

  void round_to_storage() {
    rali::round_to_storage(weight.span());
    rali::round_to_storage(bias.span());
    log_temperature = to_storage(log_temperature);
  }

  friend bool operator==(const AlignmentAdapter&, const AlignmentAdapter&) = default;
};

/// weight * x + bias, no normalization.
inline DenseVector apply_adapter(const AlignmentAdapter& a, std::span<const double> x) {
  require_same_dim(a.dim(), x.size(), "apply_adapter");
  DenseVector y = matvec(a.weight, x);
  for (std::size_t i = 0; i < y.dim(); ++i) y[i] += a.bias[i];
  return y;
}

inline DenseVector apply_adapter(const AlignmentAdapter& a, const DenseVector& x) { return apply_adapter(a, x.span()); }

struct AdapterGradients {
  DenseMatrix weight;
  DenseVector bias;
  double log_temperature = 0.0;
};

struct ContrastiveResult {
  double loss = 0.0;
  AdapterGradients grad;
  bool degenerate = false;  // every text in the batch is identical
};

/// Symmetric InfoNCE: loss = (L_i2t + L_t2i) / 2 over the BxB logits
/// S[p][q] = cos(adapter(image_p), text_q) / temperature, diagonal positive.
inline ContrastiveResult contrastive_loss(const AlignmentAdapter& adapter, std::span<const DenseVector> images,
                                          std::span<const DenseVector> texts) {
  const std::size_t batch = images.size();
  const std::size_t dim = adapter.dim();
  if (batch < 2) throw Error(ErrorKind::Param, "contrastive batch needs at least 2 pairs");
  require_same_dim(batch, texts.size(), "contrastive batch images/texts");

  std::vector<DenseVector> unit_img(batch);
  std::vector<double> img_norm(batch);
  std::vector<DenseVector> unit_txt(batch);
  for (std::size_t p = 0; p < batch; ++p) {
    require_same_dim(dim, images[p].dim(), "contrastive image");
    require_same_dim(dim, texts[p].dim(), "contrastive text");
    DenseVector u = apply_adapter(adapter, images[p]);
    img_norm[p] = norm2(u.span());
    if (!(img_norm[p] > 0.0)) throw Error(ErrorKind::DegenerateInput, "adapted image embedding has zero norm");
    for (double& v : u.span()) v /= img_norm[p];
    unit_img[p] = std::move(u);
    DenseVector t = texts[p];
    const double tn = norm2(t.span());
    if (!(tn > 0.0)) throw Error(ErrorKind::DegenerateInput, "text embedding has zero norm");
    for (double& v : t.span()) v /= tn;
    unit_txt[p] = std::move(t);
  }

  bool degenerate = true;
  for (std::size_t q = 1; q < batch && degenerate; ++q) degenerate = texts[q] == texts[0];
  if (degenerate) log::warn("DegenerateBatch: all texts in the contrastive batch are identical");

  const double inv_temp = std::exp(-adapter.log_temperature);
  std::vector<double> logits(batch * batch);
  for (std::size_t p = 0; p < batch; ++p) {
    for (std::size_t q = 0; q < batch; ++q) {
      logits[p * batch + q] = std::clamp(dot(unit_img[p].span(), unit_txt[q].span()), -1.0, 1.0) * inv_temp;
    }
  }

  // dL/dS accumulates (softmax - onehot) from both directions, scaled by 1/(2B).
  std::vector<double> d_logits(batch * batch, 0.0);
  const double scale = 0.5 / static_cast<double>(batch);
  double loss = 0.0;
  for (std::size_t p = 0; p < batch; ++p) {
    double hi = logits[p * batch];
    for (std::size_t q = 1; q < batch; ++q) hi = std::max(hi, logits[p * batch + q]);
    double sum = 0.0;
    for (std::size_t q = 0; q < batch; ++q) sum += std::exp(logits[p * batch + q] - hi);
    loss += scale * (hi + std::log(sum) - logits[p * batch + p]);
    for (std::size_t q = 0; q < batch; ++q) {
      d_logits[p * batch + q] += scale * (std::exp(logits[p * batch + q] - hi) / sum - (p == q ? 1.0 : 0.0));
    }
  }
  for (std::size_t q = 0; q < batch; ++q) {
    double hi = logits[q];
    for (std::size_t p = 1; p < batch; ++p) hi = std::max(hi, logits[p * batch + q]);
    double sum = 0.0;
    for (std::size_t p = 0; p < batch; ++p) sum += std::exp(logits[p * batch + q] - hi);
    loss += scale * (hi + std::log(sum) - logits[q * batch + q]);
    for (std::size_t p = 0; p < batch; ++p) {
      d_logits[p * batch + q] += scale * (std::exp(logits[p * batch + q] - hi) / sum - (p == q ? 1.0 : 0.0));
    }
  }
  if (!std::isfinite(loss)) throw Error(ErrorKind::Numeric, "contrastive loss is not finite");

  ContrastiveResult out;
  out.loss = loss;
  out.degenerate = degenerate;
  out.grad.weight = DenseMatrix(dim, dim);
  out.grad.bias = DenseVector(dim);
  double d_log_temp = 0.0;
  std::vector<double> g(dim);
  for (std::size_t p = 0; p < batch; ++p) {
    std::fill(g.begin(), g.end(), 0.0);
    for (std::size_t q = 0; q < batch; ++q) {
      const double dl = d_logits[p * batch + q];
      d_log_temp -= dl * logits[p * batch + q];
      const double dc = dl * inv_temp;
      const auto t = unit_txt[q].span();
      for (std::size_t i = 0; i < dim; ++i) g[i] += dc * t[i];
    }
    // Through the normalization u / |u|.
    const auto uh = unit_img[p].span();
    const double radial = dot(g, uh);
    const auto x = images[p].span();
    for (std::size_t i = 0; i < dim; ++i) {
      const double du = (g[i] - radial * uh[i]) / img_norm[p];
      out.grad.bias[i] += du;
      auto row = out.grad.weight.row(i);
      for (std::size_t j = 0; j < dim; ++j) row[j] += du * x[j];
    }
  }
  out.grad.log_temperature = d_log_temp;
  return out;
}

struct AlignTrainConfig {
  double lr = 1e-5;
  std::size_t epochs = 10;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  double temperature_init = 0.07;
  double weight_decay = 0.0;
  bool seed_augmentation = true;  // false: always use the first text embedding
  bool learn_temperature = true;

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorKind::Param, "align lr must be > 0");
    if (batch_size < 2) throw Error(ErrorKind::Param, "align batch_size must be >= 2");
    if (!(temperature_init > 0.0 && temperature_init < 1000.0)) {
      throw Error(ErrorKind::Param, "temperature_init must lie in (0, 1000)");
    }
    if (!(weight_decay >= 0.0)) throw Error(ErrorKind::Param, "weight_decay must be >= 0");
  }
};

struct AlignHistory {
  std::vector<double> epoch_loss;  // mean batch loss per epoch, measured before each update
};

/// Mini-batch gradient descent on the adapter; text embeddings are read-only.
/// The returned adapter is rounded to f32 storage precision.
inline AlignmentAdapter train_alignment(const EmbeddingDataset& data, const AlignTrainConfig& cfg,
                                        AlignHistory* history = nullptr) {
  cfg.validate();
  if (data.size() < 2) throw Error(ErrorKind::Validation, "alignment needs at least 2 records");
  std::vector<std::string> missing;
  for (const auto& r : data.records) {
    if (r.text_embs.empty()) missing.push_back(r.id);
  }
  if (!missing.empty()) {
    throw Error(ErrorKind::Validation, "alignment needs text embeddings; missing for ids [" + detail::join_ids(missing) + "]");
  }

  AlignmentAdapter adapter = AlignmentAdapter::identity(data.dim, cfg.temperature_init);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::vector<std::size_t> text_pick(data.size());
  std::vector<DenseVector> images;
  std::vector<DenseVector> texts;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto n_texts = data.records[i].text_embs.size();
      text_pick[i] = cfg.seed_augmentation ? rng.uniform_index(n_texts) : 0;
    }
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      if (stop - start < 2) break;
      images.clear();
      texts.clear();
      for (std::size_t k = start; k < stop; ++k) {
        const auto& r = data.records[order[k]];
        images.push_back(r.image_emb);
        texts.push_back(r.text_embs[text_pick[order[k]]]);
      }
      const auto result = contrastive_loss(adapter, images, texts);
      loss_sum += result.loss;
      ++batches;

      auto w = adapter.weight.span();
      const auto gw = result.grad.weight.span();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg.lr * (gw[i] + cfg.weight_decay * w[i]);
      for (std::size_t i = 0; i < adapter.dim(); ++i) adapter.bias[i] -= cfg.lr * result.grad.bias[i];
      if (cfg.learn_temperature) {
        adapter.log_temperature = std::clamp(adapter.log_temperature - cfg.lr * result.grad.log_temperature,
                                             kMinLogTemperature, kMaxLogTemperature);
      }
    }
    const double mean_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    if (history) history->epoch_loss.push_back(mean_loss);
    log::info("align epoch " + std::to_string(epoch + 1) + "/" + std::to_string(cfg.epochs) +
              " loss=" + std::to_string(mean_loss));
  }
  adapter.round_to_storage();
  adapter.validate();
  return adapter;
}

/// Fraction of images whose highest-cosine text in the batch is their own.
inline double retrieval_accuracy(const AlignmentAdapter& adapter, std::span<const DenseVector> images,
                                 std::span<const DenseVector> texts) {
  require_same_dim(images.size(), texts.size(), "retrieval batch");
  if (images.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t p = 0; p < images.size(); ++p) {
    const DenseVector u = apply_adapter(adapter, images[p]);
    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t q = 0; q < texts.size(); ++q) {
      const double c = cosine(u, texts[q]);
      if (c > best_cos) {
        best_cos = c;
        best = q;
      }
    }
    hits += best == p;
  }
  return static_cast<double>(hits) / static_cast<double>(images.size());
}

// Adapter payload: weight f32[D*D] row-major | bias f32[D] | log_temperature f32.
inline void write_adapter_payload(io::ByteWriter& w, const AlignmentAdapter& a) {
  w.put_f32(a.weight.span());
  w.put_f32(a.bias.span());
  w.put_f32(a.log_temperature);
}

inline AlignmentAdapter read_adapter_payload(io::ByteReader& rd, std::size_t dim) {
  std::vector<double> weight(dim * dim);
  rd.get_f32(weight);
  std::vector<double> bias(dim);
  rd.get_f32(bias);
  AlignmentAdapter a{DenseMatrix(dim, dim, std::move(weight)), DenseVector(std::move(bias)), rd.get_f32()};
  a.validate();
  return a;
}

// RQA1: "RQA1" | version u32 | D u32 | adapter payload.
inline constexpr std::uint32_t kRqa1Version = 1;

inline io::Bytes encode_rqa1(const AlignmentAdapter& a) {
  a.validate();
  io::ByteWriter w;
  w.put_magic("RQA1");
  w.put<std::uint32_t>(kRqa1Version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(a.dim()));
  write_adapter_payload(w, a);
  return w.take();
}

inline AlignmentAdapter decode_rqa1(std::span<const std::uint8_t> bytes) {
  io::ByteReader rd(bytes);
  rd.expect_magic("RQA1");
  const auto version = rd.get<std::uint32_t>();
  if (version != kRqa1Version) throw Error(ErrorKind::Format, "unsupported RQA1 version " + std::to_string(version));
  const auto dim = rd.get<std::uint32_t>();
  if (dim == 0) throw Error(ErrorKind::Format, "RQA1 header declares D = 0");
  if (rd.remaining() != 4 * (static_cast<std::size_t>(dim) * dim + dim + 1)) {
    throw Error(ErrorKind::Format, "RQA1 payload size does not match D = " + std::to_string(dim));
  }
  auto a = read_adapter_payload(rd, dim);
  rd.expect_end();
  return a;
}

inline void save_adapter(const AlignmentAdapter& a, const std::filesystem::path& path) {
  io::write_file(path, encode_rqa1(a));
}

inline AlignmentAdapter load_adapter(const std::filesystem::path& path) { return decode_rqa1(io::read_file(path)); }

}  // namespace rali
