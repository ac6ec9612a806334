#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cirf/container.hpp"
#include "cirf/error.hpp"
#include "cirf/http.hpp"
#include "cirf/matrix.hpp"
#include "cirf/trace.hpp"

namespace cirf {

inline constexpr std::string_view kEmbeddingMagic = "CIRFEMB1";
inline constexpr std::uint32_t kContainerVersion = 1;

using RowKey = std::pair<std::string, int>;  // (trace_id, step_index); step 0 is the question

inline std::string format_row_key(const RowKey& key) {
  return "(" + key.first + "," + std::to_string(key.second) + ")";
}

inline RowKey parse_row_key(std::string_view text) {
  const auto comma = text.rfind(',');
  if (text.size() < 4 || text.front() != '(' || text.back() != ')' || comma == std::string_view::npos)
    throw Error(ErrorKind::ChecksumMismatch, "malformed index key " + std::string(text));
  return {std::string(text.substr(1, comma - 1)), std::stoi(std::string(text.substr(comma + 1, text.size() - comma - 2)))};
}

struct EmbeddingMatrix {
  std::size_t dim = 0;
  Matrix<float> rows;
  std::map<RowKey, std::size_t> index;
  bool centered = false;

  std::span<const float> at(const RowKey& key) const {
    auto it = index.find(key);
    if (it == index.end())
      throw Error(ErrorKind::MissingEmbedding, "no row for " + format_row_key(key));
    return rows.row(it->second);
  }

  bool operator==(const EmbeddingMatrix&) const = default;
};

// ---------------------------------------------------------------------------
// Container I/O

/// Serializes rows, index and a JSON blob into the sealed container layout.
/// For the embedding file the blob is the index itself.
inline std::vector<std::uint8_t> encode_container(std::string_view magic, const Matrix<float>& rows, bool flag,
                                                  const nlohmann::json& blob) {
  ByteWriter w;
  w.magic(magic);
  w.u32(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(rows.rows()));
  w.u32(static_cast<std::uint32_t>(rows.cols()));
  w.u8(flag ? 1 : 0);
  w.pad(3);
  w.f32_values(std::span<const float>(rows.data()));
  w.text(blob.dump());
  w.seal();
  return w.bytes();
}

struct DecodedContainer {
  Matrix<float> rows;
  bool flag = false;
  nlohmann::json blob;
};

inline DecodedContainer decode_container(std::span<const std::uint8_t> bytes, std::string_view magic) {
  ByteReader r = open_sealed(bytes, magic);
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) throw Error(ErrorKind::BadMagic, "unsupported version " + std::to_string(version));
  const std::uint32_t n_rows = r.u32();
  const std::uint32_t n_cols = r.u32();
  DecodedContainer out;
  out.flag = r.u8() != 0;
  r.skip(3);
  const std::uint64_t count = static_cast<std::uint64_t>(n_rows) * n_cols;
  if (count * sizeof(float) > r.remaining()) throw Error(ErrorKind::ChecksumMismatch, "row data truncated");
  out.rows = Matrix<float>(n_rows, n_cols);
  for (auto& v : out.rows.data()) v = r.f32();
  try {
    out.blob = nlohmann::json::parse(r.text(r.remaining()));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::ChecksumMismatch, std::string("index blob unreadable: ") + e.what());
  }
  return out;
}

inline std::vector<std::uint8_t> encode_embedding_file(const EmbeddingMatrix& m) {
  nlohmann::json index = nlohmann::json::object();
  for (const auto& [key, row] : m.index) index[format_row_key(key)] = row;
  return encode_container(kEmbeddingMagic, m.rows, m.centered, index);
}

inline EmbeddingMatrix decode_embedding_file(std::span<const std::uint8_t> bytes) {
  DecodedContainer c = decode_container(bytes, kEmbeddingMagic);
  EmbeddingMatrix m;
  m.dim = c.rows.cols();
  m.rows = std::move(c.rows);
  m.centered = c.flag;
  if (!c.blob.is_object()) throw Error(ErrorKind::ChecksumMismatch, "index blob is not an object");
  for (const auto& [key, row] : c.blob.items()) {
    const auto r = row.get<std::size_t>();
    if (r >= m.rows.rows()) throw Error(ErrorKind::ChecksumMismatch, "index row out of range");
    m.index.emplace(parse_row_key(key), r);
  }
  return m;
}

inline void write_embedding_file(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  write_file_bytes(path, encode_embedding_file(m));
}

inline EmbeddingMatrix read_embedding_file(const std::filesystem::path& path) {
  return decode_embedding_file(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Providers

struct EmbeddingRequest {
  RowKey key;
  std::string text;
};

enum class ProviderKind { file_store, remote_service };

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual ProviderKind kind() const = 0;
  virtual std::size_t declared_dim() const = 0;
  /// Returns one vector per request, in request order.
  virtual std::vector<std::vector<float>> embed(std::span<const EmbeddingRequest> requests) = 0;
};

/// Looks vectors up by (trace_id, step) in a precomputed embedding file.
class FileStoreProvider final : public EmbeddingProvider {
 public:
  FileStoreProvider(const std::filesystem::path& path, std::size_t declared_dim) : declared_dim_(declared_dim) {
    if (declared_dim == 0) throw Error(ErrorKind::DimensionMismatch, "declared dimension must be positive");
    try {
      store_ = read_embedding_file(path);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Io) throw Error(ErrorKind::ProviderUnavailable, e.what());
      throw;
    }
    if (store_.dim != declared_dim)
      throw Error(ErrorKind::DimensionMismatch, "file store has dim " + std::to_string(store_.dim) + ", declared " +
                                                    std::to_string(declared_dim));
  }

  ProviderKind kind() const override { return ProviderKind::file_store; }
  std::size_t declared_dim() const override { return declared_dim_; }

  std::vector<std::vector<float>> embed(std::span<const EmbeddingRequest> requests) override {
    std::vector<std::vector<float>> out;
    out.reserve(requests.size());
    for (const auto& req : requests) {
      auto row = store_.at(req.key);
      out.emplace_back(row.begin(), row.end());
    }
    return out;
  }

 private:
  std::size_t declared_dim_;
  EmbeddingMatrix store_;
};

/// POST {url}/embed with {"texts": [...]} -> {"vectors": [[...]]}, batched.
class RemoteProvider final : public EmbeddingProvider {
 public:
  RemoteProvider(std::string url, std::size_t declared_dim, std::size_t batch_size = 64)
      : url_(std::move(url)), declared_dim_(declared_dim), batch_size_(batch_size) {
    if (declared_dim == 0) throw Error(ErrorKind::DimensionMismatch, "declared dimension must be positive");
    if (batch_size_ == 0) batch_size_ = 1;
  }

  ProviderKind kind() const override { return ProviderKind::remote_service; }
  std::size_t declared_dim() const override { return declared_dim_; }

  std::vector<std::vector<float>> embed(std::span<const EmbeddingRequest> requests) override {
    std::vector<std::vector<float>> out;
    out.reserve(requests.size());
    for (std::size_t start = 0; start < requests.size(); start += batch_size_) {
      const std::size_t stop = std::min(requests.size(), start + batch_size_);
      nlohmann::json body;
      body["texts"] = nlohmann::json::array();
      for (std::size_t i = start; i < stop; ++i) body["texts"].push_back(requests[i].text);
      auto reply = post_json(url_, "/embed", body);
      if (!reply) throw Error(ErrorKind::ProviderUnavailable, "no response from " + url_);
      if (reply->status != 200)
        throw Error(ErrorKind::ProviderUnavailable, "HTTP " + std::to_string(reply->status) + " from " + url_);
      nlohmann::json parsed;
      try {
        parsed = nlohmann::json::parse(reply->body);
      } catch (const nlohmann::json::parse_error&) {
        throw Error(ErrorKind::ProviderUnavailable, "unparseable response from " + url_);
      }
      if (!parsed.contains("vectors") || !parsed["vectors"].is_array() || parsed["vectors"].size() != stop - start)
        throw Error(ErrorKind::ProviderUnavailable, "response does not hold one vector per text");
      for (const auto& v : parsed["vectors"]) {
        if (!v.is_array()) throw Error(ErrorKind::ProviderUnavailable, "vector is not an array");
        if (v.size() != declared_dim_)
          throw Error(ErrorKind::DimensionMismatch, "service returned dim " + std::to_string(v.size()) +
                                                        ", declared " + std::to_string(declared_dim_));
        out.push_back(v.get<std::vector<float>>());
      }
    }
    return out;
  }

 private:
  std::string url_;
  std::size_t declared_dim_;
  std::size_t batch_size_;
};

namespace detail {

inline EmbeddingMatrix assemble(std::span<const EmbeddingRequest> requests, EmbeddingProvider& provider) {
  const std::size_t dim = provider.declared_dim();
  auto vectors = provider.embed(requests);
  if (vectors.size() != requests.size())
    throw Error(ErrorKind::ProviderUnavailable, "provider returned a wrong number of vectors");
  EmbeddingMatrix m;
  m.dim = dim;
  m.rows = Matrix<float>(requests.size(), dim);
  for (std::size_t i = 0; i < requests.size(); ++i) {
    if (vectors[i].size() != dim)
      throw Error(ErrorKind::DimensionMismatch, "vector for " + format_row_key(requests[i].key) + " has dim " +
                                                    std::to_string(vectors[i].size()));
    if (!all_finite(std::span<const float>(vectors[i])))
      throw Error(ErrorKind::NonFiniteInput, "non-finite vector for " + format_row_key(requests[i].key));
    std::copy(vectors[i].begin(), vectors[i].end(), m.rows.row(i).begin());
    m.index.emplace(requests[i].key, i);
  }
  return m;
}

}  // namespace detail

/// One row per segment, rows ordered by dataset order then step.
inline EmbeddingMatrix fetch_embeddings(const TraceDataset& dataset, EmbeddingProvider& provider) {
  std::vector<EmbeddingRequest> requests;
  requests.reserve(dataset.segment_count());
  for (const auto& t : dataset.traces)
    for (const auto& s : t.segments) {
      if (s.text.empty()) throw Error(ErrorKind::MissingEmbedding, "empty segment text in " + t.trace_id);
      requests.push_back({{t.trace_id, s.step_index}, s.text});
    }
  return detail::assemble(requests, provider);
}

/// Question-text embeddings keyed (trace_id, 0), used by question centering.
inline EmbeddingMatrix fetch_question_embeddings(const TraceDataset& dataset, EmbeddingProvider& provider) {
  std::vector<EmbeddingRequest> requests;
  requests.reserve(dataset.traces.size());
  for (const auto& t : dataset.traces) requests.push_back({{t.trace_id, 0}, t.question});
  return detail::assemble(requests, provider);
}

// ---------------------------------------------------------------------------
// Centering

enum class CenterMode { raw, question, mean };

inline std::string_view to_string(CenterMode mode) {
  switch (mode) {
    case CenterMode::raw: return "raw";
    case CenterMode::question: return "question";
    case CenterMode::mean: return "mean";
  }
  return "unknown";
}

inline std::optional<CenterMode> parse_center_mode(std::string_view s) {
  if (s == "raw") return CenterMode::raw;
  if (s == "question") return CenterMode::question;
  if (s == "mean") return CenterMode::mean;
  return std::nullopt;
}

/// Per-trace mean-centered rows in 64-bit. The trace mean is rounded to f32
/// before subtraction, so every subtraction of two f32 inputs is exact and
/// within-trace differences equal the raw differences bit for bit.
inline Matrix<double> mean_center_f64(const EmbeddingMatrix& matrix, const TraceDataset& dataset) {
  Matrix<double> out(matrix.rows.rows(), matrix.dim, 0.0);
  std::vector<double> sum(matrix.dim);
  std::vector<std::size_t> rows;
  for (const auto& t : dataset.traces) {
    rows.clear();
    for (const auto& s : t.segments) {
      auto it = matrix.index.find({t.trace_id, s.step_index});
      if (it == matrix.index.end())
        throw Error(ErrorKind::IncompleteTrace, "trace " + t.trace_id + " lacks step " + std::to_string(s.step_index));
      rows.push_back(it->second);
    }
    if (rows.empty()) continue;
    std::fill(sum.begin(), sum.end(), 0.0);
    for (const auto r : rows)
      for (std::size_t c = 0; c < matrix.dim; ++c) sum[c] += matrix.rows(r, c);
    for (std::size_t c = 0; c < matrix.dim; ++c) {
      const double mean = static_cast<float>(sum[c] / static_cast<double>(rows.size()));
      for (const auto r : rows) out(r, c) = static_cast<double>(matrix.rows(r, c)) - mean;
    }
  }
  return out;
}

inline EmbeddingMatrix mean_center(const EmbeddingMatrix& matrix, const TraceDataset& dataset) {
  if (matrix.centered) throw Error(ErrorKind::AlreadyCentered, "matrix is already centered");
  EmbeddingMatrix out = matrix;
  out.rows = mean_center_f64(matrix, dataset).cast<float>();
  out.centered = true;
  return out;
}

/// Subtracts the embedding of each trace's question text from its segments.
inline EmbeddingMatrix question_center(const EmbeddingMatrix& matrix, const TraceDataset& dataset,
                                       const EmbeddingMatrix& questions) {
  if (matrix.centered) throw Error(ErrorKind::AlreadyCentered, "matrix is already centered");
  if (questions.dim != matrix.dim) throw Error(ErrorKind::DimensionMismatch, "question embeddings differ in dim");
  EmbeddingMatrix out = matrix;
  for (const auto& t : dataset.traces) {
    auto it_q = questions.index.find({t.trace_id, 0});
    if (it_q == questions.index.end()) throw Error(ErrorKind::IncompleteTrace, "no question row for " + t.trace_id);
    auto q = questions.rows.row(it_q->second);
    for (const auto& s : t.segments) {
      auto it = matrix.index.find({t.trace_id, s.step_index});
      if (it == matrix.index.end())
        throw Error(ErrorKind::IncompleteTrace, "trace " + t.trace_id + " lacks step " + std::to_string(s.step_index));
      auto row = out.rows.row(it->second);
      for (std::size_t c = 0; c < matrix.dim; ++c)
        row[c] = static_cast<float>(static_cast<double>(row[c]) - static_cast<double>(q[c]));
    }
  }
  out.centered = true;
  return out;
}

inline EmbeddingMatrix apply_center_mode(CenterMode mode, const EmbeddingMatrix& matrix, const TraceDataset& dataset,
                                         const EmbeddingMatrix* questions = nullptr) {
  switch (mode) {
    case CenterMode::raw: return matrix;
    case CenterMode::mean: return mean_center(matrix, dataset);
    case CenterMode::question:
      if (!questions) throw Error(ErrorKind::IncompleteTrace, "question centering needs question embeddings");
      return question_center(matrix, dataset, *questions);
  }
  return matrix;
}

/// Rows of `matrix` in dataset order (trace, then step).
inline std::vector<std::size_t> dataset_row_order(const EmbeddingMatrix& matrix, const TraceDataset& dataset) {
  std::vector<std::size_t> order;
  order.reserve(dataset.segment_count());
  for (const auto& t : dataset.traces)
    for (const auto& s : t.segments) {
      auto it = matrix.index.find({t.trace_id, s.step_index});
      if (it == matrix.index.end())
        throw Error(ErrorKind::IncompleteTrace, "trace " + t.trace_id + " lacks step " + std::to_string(s.step_index));
      order.push_back(it->second);
    }
  return order;
}

}  // namespace cirf
