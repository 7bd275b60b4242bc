#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "rali/dataset.hpp"
#include "rali/metrics.hpp"
#include "rali/pipeline.hpp"

using namespace rali;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "rali_tests";
  fs::create_directories(dir);
  return dir / name;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an rali::Error";
  return ErrorKind::Numeric;
}

}  // namespace

TEST(Rqe1, EmptyDatasetIsHeaderOnly) {
  EmbeddingDataset d;
  d.dim = 768;
  const auto path = temp_path("empty.rqe1");
  save_dataset(d, path, DatasetFormat::Packed);
  EXPECT_EQ(fs::file_size(path), kRqe1HeaderBytes);
  EXPECT_EQ(fs::file_size(path), 24u);
  const auto back = load_dataset(path, DatasetFormat::Packed);
  EXPECT_TRUE(back.empty());
  EXPECT_EQ(back.dim, 768u);
}

TEST(Rqe1, ByteLayout) {
  EmbeddingDataset d;
  d.dim = 2;
  d.records.push_back({"ab", DenseVector{1.0, -2.0}, {DenseVector{0.5, 0.25}}, 3.0});
  const auto bytes = encode_rqe1(d);
  ASSERT_EQ(bytes.size(), 24u + 2 + 2 + 4 + 8 + 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "RQE1");
  auto u32 = [&](std::size_t off) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + off, 4);
    return v;
  };
  std::uint64_t count;
  std::memcpy(&count, bytes.data() + 12, 8);
  EXPECT_EQ(u32(4), 1u);  // version
  EXPECT_EQ(u32(8), 2u);  // D
  EXPECT_EQ(count, 1u);
  EXPECT_EQ(u32(20), 1u);  // seeds
  EXPECT_EQ(bytes[24], 2);
  EXPECT_EQ(bytes[25], 0);
  EXPECT_EQ(std::string(bytes.begin() + 26, bytes.begin() + 28), "ab");
  float score;
  std::memcpy(&score, bytes.data() + 28, 4);
  EXPECT_EQ(score, 3.0f);
  float last;
  std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
  EXPECT_EQ(last, 0.25f);
}

TEST(Rqe1, RoundTripIsBitExact) {
  const auto d = gen_synthetic({1000, 16, 3, 0.1, 3});
  const auto path = temp_path("roundtrip.rqe1");
  save_dataset(d, path, DatasetFormat::Packed);
  const auto back = load_dataset(path, DatasetFormat::Packed);
  EXPECT_EQ(back.records, d.records);
  const auto first = io::read_file(path);
  const auto second = encode_rqe1(back);
  EXPECT_EQ(sha256_hex(first), sha256_hex(second));
  save_dataset(back, path, DatasetFormat::Packed);
  EXPECT_EQ(io::read_file(path), first);
}

TEST(Rqe1, RejectsMalformedInput) {
  io::Bytes bad = {'R', 'Q', 'X', '1', 1, 0, 0, 0};
  EXPECT_EQ(kind_of([&] { decode_rqe1(bad); }), ErrorKind::Format);
  EmbeddingDataset d;
  d.dim = 4;
  d.records.push_back({"a", DenseVector{1, 2, 3, 4}, {}, 2.0});
  auto bytes = encode_rqe1(d);
  bytes.pop_back();
  EXPECT_EQ(kind_of([&] { decode_rqe1(bytes); }), ErrorKind::Format);
  bytes = encode_rqe1(d);
  bytes.push_back(0);
  EXPECT_EQ(kind_of([&] { decode_rqe1(bytes); }), ErrorKind::Format);
  EXPECT_EQ(kind_of([] { load_dataset("/nonexistent/x.rqe1", DatasetFormat::Packed); }), ErrorKind::Io);
}

TEST(Rqe1, ScoreOutOfRangeInFileIsValidationError) {
  EmbeddingDataset d;
  d.dim = 1;
  d.records.push_back({"ok", DenseVector{1}, {}, 2.0});
  auto bytes = encode_rqe1(d);
  const float bad = 7.5f;
  std::memcpy(bytes.data() + 24 + 2 + 2, &bad, 4);
  try {
    decode_rqe1(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
    EXPECT_NE(std::string(e.what()).find("ok"), std::string::npos);
  }
}

TEST(Rqe1, SaveRejectsNaNAndRaggedSeeds) {
  EmbeddingDataset d;
  d.dim = 2;
  DenseVector v(2);
  v[0] = std::nan("");
  d.records.push_back({"nan", v, {}, 3.0});
  EXPECT_EQ(kind_of([&] { save_dataset(d, temp_path("nan.rqe1"), DatasetFormat::Packed); }), ErrorKind::Validation);

  EmbeddingDataset ragged;
  ragged.dim = 1;
  ragged.records.push_back({"a", DenseVector{1}, {DenseVector{1}}, 3.0});
  ragged.records.push_back({"b", DenseVector{1}, {}, 3.0});
  EXPECT_EQ(kind_of([&] { encode_rqe1(ragged); }), ErrorKind::Validation);
}

TEST(Jsonl, MinimalRecord) {
  std::istringstream in(R"({"id":"a","score":3.0,"image_emb":[1,0],"text_embs":[[0,1]]})");
  const auto d = decode_jsonl(in);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.dim, 2u);
  EXPECT_EQ(d.records[0].id, "a");
  EXPECT_EQ(d.records[0].score, 3.0);
  EXPECT_EQ(d.records[0].image_emb, (DenseVector{1, 0}));
  ASSERT_EQ(d.records[0].text_embs.size(), 1u);
  EXPECT_EQ(d.records[0].text_embs[0], (DenseVector{0, 1}));
}

TEST(Jsonl, NarrowsToStoragePrecision) {
  std::istringstream in(R"({"id":"a","score":2.1,"image_emb":[0.1,0.2]})");
  const auto d = decode_jsonl(in);
  EXPECT_EQ(d.records[0].score, static_cast<double>(2.1f));
  EXPECT_EQ(d.records[0].image_emb[0], static_cast<double>(0.1f));
}

TEST(Jsonl, ValidationListsOffendingIds) {
  std::istringstream in(
      "{\"id\":\"good\",\"score\":3,\"image_emb\":[1,0]}\n"
      "{\"id\":\"low\",\"score\":0.5,\"image_emb\":[1,0]}\n"
      "{\"id\":\"high\",\"score\":5.5,\"image_emb\":[1,0]}\n"
      "{\"id\":\"short\",\"score\":3,\"image_emb\":[1]}\n");
  try {
    decode_jsonl(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("low"), std::string::npos);
    EXPECT_NE(msg.find("high"), std::string::npos);
    EXPECT_NE(msg.find("short"), std::string::npos);
    EXPECT_EQ(msg.find("good"), std::string::npos);
  }
}

TEST(Jsonl, RoundTripThroughFile) {
  auto d = gen_synthetic({20, 5, 1, 0.2, 2});
  const auto path = temp_path("small.jsonl");
  save_dataset(d, path);
  const auto back = load_dataset(path);
  EXPECT_EQ(back, d);
  std::istringstream garbage("{not json}\n");
  EXPECT_EQ(kind_of([&] { decode_jsonl(garbage); }), ErrorKind::Format);
}

TEST(Synthetic, ZeroNoiseIsCollinear) {
  const auto d = gen_synthetic({1, 8, 5, 0.0, 2});
  const auto axes = synthetic_axes(5, 8);
  const auto& r = d.records[0];
  EXPECT_NEAR(std::abs(cosine(r.image_emb, axes.u)), 1.0, 1e-7);
  EXPECT_EQ(cosine(r.image_emb, r.text_embs[0]), 1.0);
  EXPECT_NEAR(dot(axes.u.span(), axes.v.span()), 0.0, 1e-12);
}

TEST(Synthetic, RejectsSmallDim) {
  EXPECT_EQ(kind_of([] { gen_synthetic({10, 1, 1, 0.1, 1}); }), ErrorKind::Param);
}

TEST(Synthetic, Deterministic) {
  const auto a = gen_synthetic({2000, 64, 7, 0.05, 4});
  const auto b = gen_synthetic({2000, 64, 7, 0.05, 4});
  EXPECT_EQ(a, b);
  EXPECT_EQ(encode_rqe1(a), encode_rqe1(b));
  const auto c = gen_synthetic({2000, 64, 8, 0.05, 4});
  EXPECT_NE(a.records, c.records);
}

TEST(Synthetic, ScoreDirectionRecoversScore) {
  const auto d = gen_synthetic({2000, 64, 7, 0.05, 4});
  const auto axes = synthetic_axes(7, 64);
  std::vector<double> along, truth;
  for (const auto& r : d.records) {
    along.push_back(dot(r.image_emb.span(), axes.u.span()));
    truth.push_back(r.score);
    EXPECT_GE(r.score, 1.0);
    EXPECT_LE(r.score, 5.0);
  }
  EXPECT_GE(plcc(along, truth), 0.99);
}

TEST(Synthetic, ProjectionMatchesExpectedSignal) {
  const auto d = gen_synthetic({10000, 12, 21, 0.3, 1});
  const auto axes = synthetic_axes(21, 12);
  double mean = 0.0, m2 = 0.0;
  for (const auto& r : d.records) {
    const double resid = dot(r.image_emb.span(), axes.u.span()) - (r.score - 3.0) / 2.0;
    mean += resid;
    m2 += resid * resid;
  }
  const double n = static_cast<double>(d.size());
  mean /= n;
  const double sd = std::sqrt(std::max(m2 / n - mean * mean, 0.0));
  // Residuals come only from f32 storage rounding; allow 3 standard errors plus rounding scale.
  EXPECT_LE(std::abs(mean), 3.0 * sd / std::sqrt(n) + 1e-7);
}

TEST(Split, TailHoldsLastRecords) {
  const auto d = gen_synthetic({10, 3, 2, 0.1, 1});
  const auto [head, tail] = split_tail(d, 4);
  EXPECT_EQ(head.size(), 6u);
  EXPECT_EQ(tail.size(), 4u);
  EXPECT_EQ(tail.records.front().id, d.records[6].id);
  EXPECT_THROW(split_tail(d, 11), Error);
}
