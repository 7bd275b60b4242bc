#pragma once

// Image/text/score embedding records, the RQE1 and JSONL on-disk formats,
// and the seeded synthetic corpus generator.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "rali/binary_io.hpp"
#include "rali/numcore.hpp"

namespace rali {

inline constexpr double kMinScore = 1.0;
inline constexpr double kMaxScore = 5.0;

struct SampleRecord {
  std::string id;
  DenseVector image_emb;
  std::vector<DenseVector> text_embs;  // one per generation seed, may be empty
  double score = 0.0;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct EmbeddingDataset {
  std::size_t dim = 0;
  std::vector<SampleRecord> records;
  std::map<std::string, std::string> meta;

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }

  friend bool operator==(const EmbeddingDataset&, const EmbeddingDataset&) = default;
};

enum class DatasetFormat { Packed, Jsonl };

inline DatasetFormat format_from_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return (ext == ".jsonl" || ext == ".json") ? DatasetFormat::Jsonl : DatasetFormat::Packed;
}

namespace detail {

inline std::string join_ids(const std::vector<std::string>& ids, std::size_t limit = 20) {
  std::string out;
  for (std::size_t i = 0; i < ids.size() && i < limit; ++i) {
    if (i) out += ", ";
    out += ids[i];
  }
  if (ids.size() > limit) out += ", ... (" + std::to_string(ids.size()) + " total)";
  return out;
}

inline bool all_finite(const DenseVector& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace detail

/// Throws ValidationError naming every offending record id.
inline void validate(const EmbeddingDataset& d) {
  if (d.dim == 0) throw Error(ErrorKind::Validation, "dataset dimension must be positive");
  std::vector<std::string> bad_score;
  std::vector<std::string> bad_dim;
  std::vector<std::string> bad_value;
  std::vector<std::string> duplicate;
  std::set<std::string> seen;
  for (const auto& r : d.records) {
    if (!(r.score >= kMinScore && r.score <= kMaxScore)) bad_score.push_back(r.id);
    bool dim_ok = r.image_emb.dim() == d.dim;
    bool finite = detail::all_finite(r.image_emb);
    for (const auto& t : r.text_embs) {
      dim_ok = dim_ok && t.dim() == d.dim;
      finite = finite && detail::all_finite(t);
    }
    if (!dim_ok) bad_dim.push_back(r.id);
    if (!finite) bad_value.push_back(r.id);
    if (!seen.insert(r.id).second) duplicate.push_back(r.id);
  }
  std::string msg;
  if (!bad_score.empty()) msg += "score outside [1,5] for ids [" + detail::join_ids(bad_score) + "]; ";
  if (!bad_dim.empty()) {
    msg += "dimension mismatch (expected " + std::to_string(d.dim) + ") for ids [" + detail::join_ids(bad_dim) + "]; ";
  }
  if (!bad_value.empty()) msg += "non-finite embedding entries for ids [" + detail::join_ids(bad_value) + "]; ";
  if (!duplicate.empty()) msg += "duplicate ids [" + detail::join_ids(duplicate) + "]; ";
  if (!msg.empty()) {
    msg.resize(msg.size() - 2);
    throw Error(ErrorKind::Validation, msg);
  }
}

// RQE1 layout (little-endian):
//   "RQE1" | version u32 | D u32 | record count u64 | text seeds per record u32
//   per record: id length u16 | id bytes | score f32 | image f32[D] | texts f32[D] x seeds
inline constexpr std::uint32_t kRqe1Version = 1;
inline constexpr std::size_t kRqe1HeaderBytes = 24;

inline io::Bytes encode_rqe1(const EmbeddingDataset& d) {
  validate(d);
  const std::size_t seeds = d.records.empty() ? 0 : d.records.front().text_embs.size();
  for (const auto& r : d.records) {
    if (r.text_embs.size() != seeds) {
      throw Error(ErrorKind::Validation, "RQE1 needs the same number of text embeddings per record; record " + r.id +
                                             " has " + std::to_string(r.text_embs.size()) + ", expected " +
                                             std::to_string(seeds));
    }
    if (r.id.size() > 0xFFFF) throw Error(ErrorKind::Validation, "record id longer than 65535 bytes");
  }
  io::ByteWriter w;
  w.put_magic("RQE1");
  w.put<std::uint32_t>(kRqe1Version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.dim));
  w.put<std::uint64_t>(d.records.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(seeds));
  for (const auto& r : d.records) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(r.id.size()));
    w.put_raw(r.id);
    w.put_f32(r.score);
    w.put_f32(r.image_emb.span());
    for (const auto& t : r.text_embs) w.put_f32(t.span());
  }
  return w.take();
}

inline EmbeddingDataset decode_rqe1(std::span<const std::uint8_t> bytes) {
  io::ByteReader rd(bytes);
  rd.expect_magic("RQE1");
  const auto version = rd.get<std::uint32_t>();
  if (version != kRqe1Version) throw Error(ErrorKind::Format, "unsupported RQE1 version " + std::to_string(version));
  EmbeddingDataset d;
  d.dim = rd.get<std::uint32_t>();
  if (d.dim == 0) throw Error(ErrorKind::Format, "RQE1 header declares D = 0");
  const auto count = rd.get<std::uint64_t>();
  const auto seeds = rd.get<std::uint32_t>();
  const std::size_t min_record = 2 + 4 + 4 * d.dim * (1 + static_cast<std::size_t>(seeds));
  if (count > rd.remaining() / min_record) throw Error(ErrorKind::Format, "RQE1 record count exceeds file size");
  d.records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    SampleRecord r;
    const auto id_len = rd.get<std::uint16_t>();
    r.id = rd.get_raw(id_len);
    r.score = rd.get_f32();
    std::vector<double> image(d.dim);
    rd.get_f32(image);
    r.image_emb = DenseVector(std::move(image));
    r.text_embs.reserve(seeds);
    for (std::uint32_t k = 0; k < seeds; ++k) {
      std::vector<double> text(d.dim);
      rd.get_f32(text);
      r.text_embs.emplace_back(std::move(text));
    }
    d.records.push_back(std::move(r));
  }
  rd.expect_end();
  validate(d);
  return d;
}

inline std::string encode_jsonl(const EmbeddingDataset& d) {
  validate(d);
  std::ostringstream out;
  nlohmann::json header = {{"dim", d.dim}, {"meta", d.meta}};
  out << header.dump() << '\n';
  for (const auto& r : d.records) {
    nlohmann::json texts = nlohmann::json::array();
    for (const auto& t : r.text_embs) texts.push_back(t.values());
    nlohmann::json line = {{"id", r.id}, {"score", r.score}, {"image_emb", r.image_emb.values()}, {"text_embs", texts}};
    out << line.dump() << '\n';
  }
  return out.str();
}

/// One record per line; an optional line without "id" carries {"dim", "meta"}.
/// Numbers are read as f64 and narrowed to f32 storage precision.
inline EmbeddingDataset decode_jsonl(std::istream& in) {
  EmbeddingDataset d;
  std::string line;
  std::size_t line_no = 0;
  auto narrow = [](const nlohmann::json& arr, std::size_t line_no) {
    if (!arr.is_array()) throw Error(ErrorKind::Format, "line " + std::to_string(line_no) + ": expected an array");
    std::vector<double> v;
    v.reserve(arr.size());
    for (const auto& x : arr) {
      if (!x.is_number()) throw Error(ErrorKind::Format, "line " + std::to_string(line_no) + ": non-numeric entry");
      v.push_back(to_storage(x.get<double>()));
    }
    return v;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.is_object()) throw Error(ErrorKind::Format, "line " + std::to_string(line_no) + ": expected an object");
    try {
      if (!j.contains("id")) {
        if (j.contains("dim")) d.dim = j.at("dim").get<std::size_t>();
        if (j.contains("meta")) d.meta = j.at("meta").get<std::map<std::string, std::string>>();
        continue;
      }
      SampleRecord r;
      r.id = j.at("id").get<std::string>();
      r.score = to_storage(j.at("score").get<double>());
      auto image = narrow(j.at("image_emb"), line_no);
      if (image.empty()) throw Error(ErrorKind::Format, "line " + std::to_string(line_no) + ": empty image_emb");
      if (d.dim == 0) d.dim = image.size();
      r.image_emb = DenseVector(std::move(image));
      if (j.contains("text_embs")) {
        for (const auto& t : j.at("text_embs")) r.text_embs.emplace_back(narrow(t, line_no));
      }
      d.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Format, "line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (d.dim == 0) throw Error(ErrorKind::Format, "cannot infer embedding dimension from an empty JSONL file");
  validate(d);
  return d;
}

inline EmbeddingDataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  if (format == DatasetFormat::Packed) {
    const auto bytes = io::read_file(path);
    return decode_rqe1(bytes);
  }
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return decode_jsonl(in);
}

inline EmbeddingDataset load_dataset(const std::filesystem::path& path) {
  return load_dataset(path, format_from_path(path));
}

inline void save_dataset(const EmbeddingDataset& d, const std::filesystem::path& path, DatasetFormat format) {
  if (format == DatasetFormat::Packed) {
    const auto bytes = encode_rqe1(d);
    io::write_file(path, bytes);
    return;
  }
  const auto text = encode_jsonl(d);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

inline void save_dataset(const EmbeddingDataset& d, const std::filesystem::path& path) {
  save_dataset(d, path, format_from_path(path));
}

struct SyntheticSpec {
  std::size_t n = 2000;
  std::size_t dim = 64;
  std::uint64_t seed = 7;
  double noise_sigma = 0.05;
  std::size_t n_text_seeds = 4;
};

/// Unit score direction u and an orthogonal unit direction v, both derived from the seed.
struct SyntheticAxes {
  DenseVector u;
  DenseVector v;
};

inline SyntheticAxes synthetic_axes(std::uint64_t seed, std::size_t dim) {
  if (dim < 2) throw Error(ErrorKind::Param, "synthetic data needs dim >= 2, got " + std::to_string(dim));
  Rng rng = Rng::substream(seed, "synthetic:axes");
  std::vector<double> u(dim);
  std::vector<double> v(dim);
  for (auto& x : u) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  const double un = norm2(u);
  for (auto& x : u) x /= un;
  const double uv = dot(u, v);
  for (std::size_t i = 0; i < dim; ++i) v[i] -= uv * u[i];
  const double vn = norm2(v);
  for (auto& x : v) x /= vn;
  return {DenseVector(std::move(u)), DenseVector(std::move(v))};
}

/// Embeddings a(s)*u + noise with a(s) = (s-3)/2; the noise is isotropic
/// Gaussian restricted to the orthogonal complement of u (v included).
/// Values are rounded to f32 so the corpus round-trips through RQE1 exactly.
inline EmbeddingDataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.n < 1) throw Error(ErrorKind::Param, "synthetic data needs n >= 1");
  if (!(spec.noise_sigma >= 0.0) || !std::isfinite(spec.noise_sigma)) {
    throw Error(ErrorKind::Param, "noise_sigma must be finite and >= 0");
  }
  const auto axes = synthetic_axes(spec.seed, spec.dim);
  const auto& u = axes.u;
  Rng rng = Rng::substream(spec.seed, "synthetic:samples");

  auto draw = [&](double signal) {
    std::vector<double> g(spec.dim);
    for (auto& x : g) x = rng.normal() * spec.noise_sigma;
    const double along = dot(g, u.span());
    for (std::size_t i = 0; i < spec.dim; ++i) g[i] += (signal - along) * u[i];
    round_to_storage(g);
    return DenseVector(std::move(g));
  };

  EmbeddingDataset d;
  d.dim = spec.dim;
  d.meta = {{"source", "synthetic"},
            {"seed", std::to_string(spec.seed)},
            {"noise_sigma", std::to_string(spec.noise_sigma)},
            {"n_text_seeds", std::to_string(spec.n_text_seeds)}};
  d.records.reserve(spec.n);
  char id[32];
  for (std::size_t i = 0; i < spec.n; ++i) {
    SampleRecord r;
    std::snprintf(id, sizeof(id), "syn%06zu", i);
    r.id = id;
    r.score = to_storage(rng.uniform(kMinScore, kMaxScore));
    const double signal = (r.score - 3.0) / 2.0;
    r.image_emb = draw(signal);
    for (std::size_t k = 0; k < spec.n_text_seeds; ++k) r.text_embs.push_back(draw(signal));
    d.records.push_back(std::move(r));
  }
  return d;
}

/// Splits off the last `tail` records (e.g. a held-out set drawn from the same generator call).
inline std::pair<EmbeddingDataset, EmbeddingDataset> split_tail(const EmbeddingDataset& d, std::size_t tail) {
  if (tail > d.size()) throw Error(ErrorKind::Param, "cannot split " + std::to_string(tail) + " records from " + std::to_string(d.size()));
  EmbeddingDataset head{d.dim, {}, d.meta};
  EmbeddingDataset rest{d.dim, {}, d.meta};
  const std::size_t cut = d.size() - tail;
  head.records.assign(d.records.begin(), d.records.begin() + static_cast<std::ptrdiff_t>(cut));
  rest.records.assign(d.records.begin() + static_cast<std::ptrdiff_t>(cut), d.records.end());
  return {std::move(head), std::move(rest)};
}

}  // namespace rali
