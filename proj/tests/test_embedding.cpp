#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cirf/embedding.hpp"
#include "stub_server.hpp"
#include "test_util.hpp"

using namespace cirf;

namespace {

TraceDataset dataset_of(const std::vector<std::pair<std::string, int>>& shape) {
  TraceDataset ds;
  for (const auto& [id, m] : shape) {
    std::string rationale;
    for (int j = 1; j <= m; ++j) rationale += std::to_string(j) + ". step " + id + std::to_string(j) + "\n";
    ds.traces.push_back(parse_trace(testutil::record(id, rationale)));
  }
  return ds;
}

EmbeddingMatrix matrix_of(const TraceDataset& ds, const std::vector<std::vector<float>>& rows) {
  EmbeddingMatrix m;
  m.dim = rows.front().size();
  m.rows = Matrix<float>(rows.size(), m.dim);
  std::size_t n = 0;
  for (const auto& t : ds.traces)
    for (const auto& s : t.segments) {
      std::copy(rows[n].begin(), rows[n].end(), m.rows.row(n).begin());
      m.index.emplace(RowKey{t.trace_id, s.step_index}, n);
      ++n;
    }
  return m;
}

std::vector<float> row(const EmbeddingMatrix& m, const std::string& id, int step) {
  auto r = m.at({id, step});
  return {r.begin(), r.end()};
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorKind::Io;
}

}  // namespace

TEST(MeanCenter, SingleSegmentIsZero) {
  const auto ds = dataset_of({{"a", 1}});
  const auto c = mean_center(matrix_of(ds, {{2, 3}}), ds);
  EXPECT_EQ(row(c, "a", 1), (std::vector<float>{0, 0}));
  EXPECT_TRUE(c.centered);
}

TEST(MeanCenter, HandExamples) {
  const auto ds = dataset_of({{"a", 2}, {"b", 3}});
  const auto c = mean_center(matrix_of(ds, {{1, 0}, {3, 0}, {1, 1}, {2, 2}, {3, 3}}), ds);
  EXPECT_EQ(row(c, "a", 1), (std::vector<float>{-1, 0}));
  EXPECT_EQ(row(c, "a", 2), (std::vector<float>{1, 0}));
  EXPECT_EQ(row(c, "b", 1), (std::vector<float>{-1, -1}));
  EXPECT_EQ(row(c, "b", 2), (std::vector<float>{0, 0}));
  EXPECT_EQ(row(c, "b", 3), (std::vector<float>{1, 1}));
}

TEST(MeanCenter, AlreadyCenteredRejected) {
  const auto ds = dataset_of({{"a", 2}});
  auto m = matrix_of(ds, {{1, 0}, {3, 0}});
  m.centered = true;
  EXPECT_EQ(kind_of([&] { mean_center(m, ds); }), ErrorKind::AlreadyCentered);
}

TEST(MeanCenter, MissingRowIsIncompleteTrace) {
  const auto ds = dataset_of({{"a", 2}});
  auto m = matrix_of(dataset_of({{"a", 1}}), {{1, 0}});
  EXPECT_EQ(kind_of([&] { mean_center(m, ds); }), ErrorKind::IncompleteTrace);
}

TEST(MeanCenter, ShiftInvariantPerTrace) {
  // Adding a per-trace constant leaves the centered rows unchanged.
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-1, 1);
  // Power-of-two trace lengths keep every mean exact, so equality is exact too.
  const auto ds = dataset_of({{"a", 2}, {"b", 4}});
  std::vector<std::vector<float>> rows(6, std::vector<float>(4));
  for (auto& r : rows)
    for (auto& v : r) v = std::ldexp(std::round(std::ldexp(u(rng), 10)), -10);  // exact in f32 after shifts
  auto shifted = rows;
  for (std::size_t n = 0; n < 6; ++n)
    for (auto& v : shifted[n]) v += n < 2 ? 4.0f : -2.0f;
  const auto a = mean_center(matrix_of(ds, rows), ds);
  const auto b = mean_center(matrix_of(ds, shifted), ds);
  EXPECT_EQ(a.rows, b.rows);
}

TEST(QuestionCenter, SubtractsQuestionRow) {
  const auto ds = dataset_of({{"a", 2}});
  const auto m = matrix_of(ds, {{1, 2}, {3, 4}});
  EmbeddingMatrix q;
  q.dim = 2;
  q.rows = Matrix<float>(1, 2);
  q.rows(0, 0) = 1;
  q.rows(0, 1) = 1;
  q.index.emplace(RowKey{"a", 0}, 0);
  const auto c = apply_center_mode(CenterMode::question, m, ds, &q);
  EXPECT_EQ(row(c, "a", 1), (std::vector<float>{0, 1}));
  EXPECT_EQ(row(c, "a", 2), (std::vector<float>{2, 3}));
  EXPECT_EQ(apply_center_mode(CenterMode::raw, m, ds), m);
}

TEST(EmbeddingFile, RoundTrip) {
  testutil::TempDir dir;
  const auto ds = dataset_of({{"a,b", 2}, {"c", 1}});
  auto m = matrix_of(ds, {{1.5f, -2}, {0.25f, 3}, {7, 8}});
  m.centered = true;
  write_embedding_file(m, dir / "e.emb");
  EXPECT_EQ(read_embedding_file(dir / "e.emb"), m);
  const auto bytes = read_file_bytes(dir / "e.emb");
  EXPECT_EQ(encode_embedding_file(read_embedding_file(dir / "e.emb")), bytes);
}

TEST(EmbeddingFile, HeaderLayout) {
  const auto ds = dataset_of({{"a", 2}});
  const auto bytes = encode_embedding_file(matrix_of(ds, {{1, 2, 3}, {4, 5, 6}}));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "CIRFEMB1");
  auto u32 = [&](std::size_t off) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + off, 4);
    return v;
  };
  EXPECT_EQ(u32(8), 1u);
  EXPECT_EQ(u32(12), 2u);
  EXPECT_EQ(u32(16), 3u);
  EXPECT_EQ(bytes[20], 0);
  float first;
  std::memcpy(&first, bytes.data() + 24, 4);
  EXPECT_EQ(first, 1.0f);
  std::uint64_t crc;
  std::memcpy(&crc, bytes.data() + bytes.size() - 8, 8);
  EXPECT_EQ(crc, crc64(std::span<const std::uint8_t>(bytes.data(), bytes.size() - 8)));
}

TEST(EmbeddingFile, Crc64XzCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(crc64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}), 0x995DC9BBDF1939FAULL);
}

TEST(EmbeddingFile, TruncatedIsChecksumMismatch) {
  const auto ds = dataset_of({{"a", 2}});
  auto bytes = encode_embedding_file(matrix_of(ds, {{1, 2}, {3, 4}}));
  bytes.resize(bytes.size() - 5);
  EXPECT_EQ(kind_of([&] { decode_embedding_file(bytes); }), ErrorKind::ChecksumMismatch);
  bytes.resize(10);
  EXPECT_EQ(kind_of([&] { decode_embedding_file(bytes); }), ErrorKind::ChecksumMismatch);
}

TEST(EmbeddingFile, FlippedBitIsChecksumMismatch) {
  const auto ds = dataset_of({{"a", 2}});
  auto bytes = encode_embedding_file(matrix_of(ds, {{1, 2}, {3, 4}}));
  bytes[30] ^= 0x10;
  EXPECT_EQ(kind_of([&] { decode_embedding_file(bytes); }), ErrorKind::ChecksumMismatch);
}

TEST(EmbeddingFile, WrongMagic) {
  const auto ds = dataset_of({{"a", 1}});
  auto bytes = encode_embedding_file(matrix_of(ds, {{1, 2}}));
  bytes[0] = 'X';
  EXPECT_EQ(kind_of([&] { decode_embedding_file(bytes); }), ErrorKind::BadMagic);
}

TEST(FileStore, FetchesInDatasetOrder) {
  testutil::TempDir dir;
  const auto ds = dataset_of({{"a", 2}, {"b", 1}});
  write_embedding_file(matrix_of(ds, {{1, 0}, {0, 1}, {1, 1}}), dir / "s.emb");
  FileStoreProvider p(dir / "s.emb", 2);
  const auto m = fetch_embeddings(ds, p);
  EXPECT_EQ(m.rows.rows(), 3u);
  EXPECT_EQ(m.dim, 2u);
  EXPECT_EQ(row(m, "b", 1), (std::vector<float>{1, 1}));
}

TEST(FileStore, MissingKey) {
  testutil::TempDir dir;
  write_embedding_file(matrix_of(dataset_of({{"a", 1}}), {{1, 0}}), dir / "s.emb");
  FileStoreProvider p(dir / "s.emb", 2);
  EXPECT_EQ(kind_of([&] { fetch_embeddings(dataset_of({{"a", 2}}), p); }), ErrorKind::MissingEmbedding);
}

TEST(FileStore, DeclaredDimMismatchAndUnavailable) {
  testutil::TempDir dir;
  write_embedding_file(matrix_of(dataset_of({{"a", 1}}), {{1, 0}}), dir / "s.emb");
  EXPECT_EQ(kind_of([&] { FileStoreProvider(dir / "s.emb", 3); }), ErrorKind::DimensionMismatch);
  EXPECT_EQ(kind_of([&] { FileStoreProvider(dir / "missing.emb", 2); }), ErrorKind::ProviderUnavailable);
}

TEST(FileStore, NonFiniteRejected) {
  testutil::TempDir dir;
  const auto ds = dataset_of({{"a", 1}});
  write_embedding_file(matrix_of(ds, {{1, std::nanf("")}}), dir / "s.emb");
  FileStoreProvider p(dir / "s.emb", 2);
  EXPECT_EQ(kind_of([&] { fetch_embeddings(ds, p); }), ErrorKind::NonFiniteInput);
}

TEST(RemoteProvider, BatchesAndReturnsVectors) {
  testutil::StubServer stub;
  int calls = 0;
  stub.server().Post("/embed", [&](const httplib::Request& req, httplib::Response& res) {
    ++calls;
    const auto body = nlohmann::json::parse(req.body);
    nlohmann::json vectors = nlohmann::json::array();
    for (const auto& t : body["texts"]) vectors.push_back({static_cast<double>(t.get<std::string>().size()), 1.0});
    res.set_content(nlohmann::json{{"vectors", vectors}}.dump(), "application/json");
  });
  const auto url = stub.start();
  RemoteProvider p(url, 2, 2);
  const auto ds = dataset_of({{"a", 3}});
  const auto m = fetch_embeddings(ds, p);
  EXPECT_EQ(calls, 2);
  EXPECT_EQ(row(m, "a", 3)[0], static_cast<float>(ds.traces[0].segments[2].text.size()));
}

TEST(RemoteProvider, WrongDimension) {
  testutil::StubServer stub;
  stub.server().Post("/embed", [](const httplib::Request& req, httplib::Response& res) {
    const auto n = nlohmann::json::parse(req.body)["texts"].size();
    nlohmann::json vectors = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) vectors.push_back(std::vector<double>(8, 0.5));
    res.set_content(nlohmann::json{{"vectors", vectors}}.dump(), "application/json");
  });
  RemoteProvider p(stub.start(), 16);
  EXPECT_EQ(kind_of([&] { fetch_embeddings(dataset_of({{"a", 2}}), p); }), ErrorKind::DimensionMismatch);
}

TEST(RemoteProvider, ServerErrorAndNoServer) {
  testutil::StubServer stub;
  stub.server().Post("/embed", [](const httplib::Request&, httplib::Response& res) { res.status = 503; });
  RemoteProvider p(stub.start(), 2);
  EXPECT_EQ(kind_of([&] { fetch_embeddings(dataset_of({{"a", 1}}), p); }), ErrorKind::ProviderUnavailable);
  stub.stop();
  RemoteProvider gone("http://127.0.0.1:1", 2);
  EXPECT_EQ(kind_of([&] { fetch_embeddings(dataset_of({{"a", 1}}), gone); }), ErrorKind::ProviderUnavailable);
}

TEST(RowKey, FormatAndParse) {
  EXPECT_EQ(format_row_key({"x,y", 3}), "(x,y,3)");
  EXPECT_EQ(parse_row_key("(x,y,3)"), (RowKey{"x,y", 3}));
  EXPECT_EQ(kind_of([] { parse_row_key("x,3"); }), ErrorKind::ChecksumMismatch);
}
