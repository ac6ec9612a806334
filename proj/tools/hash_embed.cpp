// hash_embed: deterministic bag-of-words embeddings for a corpus, written as
// a file store keyed by (trace_id, step); step 0 holds the question.
//
// Each row is offset + normalized signed hashing of lowercase word tokens, so
// every vector shares a common component the way real sentence encoders do.

#include <cctype>
#include <cmath>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cirf/container.hpp"
#include "cirf/embedding.hpp"
#include "cirf/trace.hpp"

namespace {

std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalpha(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<float> embed_text(std::string_view text, std::size_t dim, double offset) {
  std::vector<double> v(dim, 0.0);
  for (const auto& w : words(text)) {
    const auto h = cirf::crc64({reinterpret_cast<const std::uint8_t*>(w.data()), w.size()});
    v[h % dim] += (h >> 63) ? -1.0 : 1.0;
  }
  double norm = 0.0;
  for (const double x : v) norm += x * x;
  norm = std::sqrt(norm);
  std::vector<float> out(dim);
  const double common = offset / std::sqrt(static_cast<double>(dim));
  for (std::size_t c = 0; c < dim; ++c) out[c] = static_cast<float>((norm > 0 ? v[c] / norm : 0.0) + common);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hashing embedder for fixture corpora"};
  std::string corpus, out;
  std::size_t dim = 64;
  double offset = 1.0;
  app.add_option("--corpus", corpus)->required();
  app.add_option("--out", out)->required();
  app.add_option("--dim", dim);
  app.add_option("--offset", offset, "norm of the shared component");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto ds = cirf::load_dataset(corpus);
    cirf::EmbeddingMatrix m;
    m.dim = dim;
    std::vector<std::pair<cirf::RowKey, std::vector<float>>> rows;
    for (const auto& t : ds.traces) {
      rows.emplace_back(cirf::RowKey{t.trace_id, 0}, embed_text(t.question, dim, offset));
      for (const auto& s : t.segments)
        rows.emplace_back(cirf::RowKey{t.trace_id, s.step_index}, embed_text(s.text, dim, offset));
    }
    m.rows = cirf::Matrix<float>(rows.size(), dim);
    for (std::size_t n = 0; n < rows.size(); ++n) {
      std::copy(rows[n].second.begin(), rows[n].second.end(), m.rows.row(n).begin());
      m.index.emplace(rows[n].first, n);
    }
    cirf::write_embedding_file(m, out);
    std::cout << "rows=" << rows.size() << " dim=" << dim << "\n";
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
