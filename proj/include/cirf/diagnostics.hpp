#pragma once

// Intrinsic diagnostics for functional representations: embedding geometry
// (bias share, pairwise cosine) and code-vs-question clustering statistics.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cirf/error.hpp"
#include "cirf/matrix.hpp"
#include "cirf/trace.hpp"

namespace cirf {

struct GeometryReport {
  double bias_share = 0.0;
  double avg_cosine = 0.0;
  double max_cosine = 0.0;
  std::size_t n_vectors = 0;
};

struct CosineStats {
  double avg = 0.0;
  double max = 0.0;
};

struct UsageStats {
  double used_fraction = 0.0;
  std::size_t min_code_count = 0;
  std::vector<std::size_t> counts;
};

struct ClusterReport {
  double used_fraction = 0.0;
  std::size_t min_code_count = 0;
  double ami = 0.0;
  double purity = 0.0;
  double collapse_fraction = 0.0;
  double uniqueness_mean = 0.0;
  bool all_single_segment = false;
};

/// ||mean vector|| / mean ||vector||.
template <typename T>
double bias_share(const Matrix<T>& vectors) {
  if (vectors.rows() == 0) throw Error(ErrorKind::AllZeroNorm, "no vectors");
  std::vector<double> mean(vectors.cols(), 0.0);
  double norm_sum = 0.0;
  for (std::size_t n = 0; n < vectors.rows(); ++n) {
    const auto row = vectors.row(n);
    for (std::size_t c = 0; c < row.size(); ++c) mean[c] += static_cast<double>(row[c]);
    norm_sum += l2_norm(row);
  }
  if (!(norm_sum > 0.0)) throw Error(ErrorKind::AllZeroNorm, "every vector has zero norm");
  const double inv = 1.0 / static_cast<double>(vectors.rows());
  for (double& v : mean) v *= inv;
  return l2_norm(std::span<const double>(mean)) / (norm_sum * inv);
}

/// Average and maximum cosine over unordered pairs.
template <typename T>
CosineStats pairwise_cosine_stats(const Matrix<T>& vectors) {
  const std::size_t n = vectors.rows();
  if (n < 2) throw Error(ErrorKind::TooFewVectors, "need at least two vectors");
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = l2_norm(vectors.row(i));
    if (!(norms[i] > 0.0)) throw Error(ErrorKind::ZeroNormVector, "vector " + std::to_string(i) + " has zero norm");
  }
  CosineStats s;
  s.max = -1.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = std::clamp(dot(vectors.row(i), vectors.row(j)) / (norms[i] * norms[j]), -1.0, 1.0);
      sum += c;
      s.max = std::max(s.max, c);
    }
  s.avg = sum / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
  return s;
}

template <typename T>
GeometryReport geometry_report(const Matrix<T>& vectors) {
  GeometryReport r;
  r.n_vectors = vectors.rows();
  r.bias_share = bias_share(vectors);
  const auto cs = pairwise_cosine_stats(vectors);
  r.avg_cosine = cs.avg;
  r.max_cosine = cs.max;
  return r;
}

inline UsageStats usage_stats(std::span<const int> labels, std::size_t k) {
  UsageStats s;
  s.counts.assign(k, 0);
  if (labels.empty()) return s;
  for (const int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k)
      throw Error(ErrorKind::LabelOutOfRange, "label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    ++s.counts[static_cast<std::size_t>(l)];
  }
  std::size_t used = 0;
  for (const auto c : s.counts)
    if (c > 0) ++used;
  s.used_fraction = k ? static_cast<double>(used) / static_cast<double>(k) : 0.0;
  s.min_code_count = k ? *std::min_element(s.counts.begin(), s.counts.end()) : 0;
  return s;
}

namespace detail {

struct Contingency {
  std::vector<std::size_t> row_sums;
  std::vector<std::size_t> col_sums;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> cells;
  std::size_t total = 0;
};

template <typename A, typename B>
Contingency contingency(std::span<const A> a, std::span<const B> b) {
  std::map<A, std::size_t> ida;
  std::map<B, std::size_t> idb;
  for (const auto& v : a) ida.emplace(v, ida.size());
  for (const auto& v : b) idb.emplace(v, idb.size());
  Contingency t;
  t.row_sums.assign(ida.size(), 0);
  t.col_sums.assign(idb.size(), 0);
  t.total = a.size();
  for (std::size_t n = 0; n < a.size(); ++n) {
    const std::size_t i = ida[a[n]], j = idb[b[n]];
    ++t.row_sums[i];
    ++t.col_sums[j];
    ++t.cells[{i, j}];
  }
  return t;
}

inline double entropy(const std::vector<std::size_t>& sums, std::size_t total) {
  double h = 0.0;
  const double n = static_cast<double>(total);
  for (const auto s : sums)
    if (s > 0) {
      const double p = static_cast<double>(s) / n;
      h -= p * std::log(p);
    }
  return h;
}

inline double mutual_information(const Contingency& t) {
  const double n = static_cast<double>(t.total);
  double mi = 0.0;
  for (const auto& [ij, count] : t.cells) {
    const double c = static_cast<double>(count);
    mi += (c / n) * std::log(n * c / (static_cast<double>(t.row_sums[ij.first]) * static_cast<double>(t.col_sums[ij.second])));
  }
  return std::max(mi, 0.0);
}

/// Expected mutual information under the hypergeometric (permutation) model.
inline double expected_mutual_information(const Contingency& t) {
  const double n = static_cast<double>(t.total);
  const double lg_n = std::lgamma(n + 1.0);
  double emi = 0.0;
  for (const auto ai_s : t.row_sums) {
    const double ai = static_cast<double>(ai_s);
    for (const auto bj_s : t.col_sums) {
      const double bj = static_cast<double>(bj_s);
      const double lo = std::max(1.0, ai + bj - n);
      const double hi = std::min(ai, bj);
      const double fixed = std::lgamma(ai + 1.0) + std::lgamma(bj + 1.0) + std::lgamma(n - ai + 1.0) +
                           std::lgamma(n - bj + 1.0) - lg_n;
      for (double nij = lo; nij <= hi; nij += 1.0) {
        const double log_p = fixed - std::lgamma(nij + 1.0) - std::lgamma(ai - nij + 1.0) -
                             std::lgamma(bj - nij + 1.0) - std::lgamma(n - ai - bj + nij + 1.0);
        emi += (nij / n) * std::log(n * nij / (ai * bj)) * std::exp(log_p);
      }
    }
  }
  return emi;
}

}  // namespace detail

/// Adjusted mutual information, arithmetic-mean normalization. A partition
/// with a single cluster carries no information and scores 0.
template <typename A, typename B>
double ami(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::LengthMismatch, "label lists differ in length");
  if (a.size() < 2) throw Error(ErrorKind::LengthMismatch, "AMI needs at least two labels");
  const auto t = detail::contingency(a, b);
  if (t.row_sums.size() < 2 || t.col_sums.size() < 2) return 0.0;
  const double mi = detail::mutual_information(t);
  const double emi = detail::expected_mutual_information(t);
  const double mean_h = 0.5 * (detail::entropy(t.row_sums, t.total) + detail::entropy(t.col_sums, t.total));
  const double denom = mean_h - emi;
  if (std::abs(denom) < 1e-15) return 0.0;
  return (mi - emi) / denom;
}

template <typename A, typename B>
double ami(const std::vector<A>& a, const std::vector<B>& b) {
  return ami(std::span<const A>(a), std::span<const B>(b));
}

/// (1/M) * sum over codes of the largest single-question count.
template <typename Q>
double purity(std::span<const int> codes, std::span<const Q> questions) {
  if (codes.size() != questions.size()) throw Error(ErrorKind::LengthMismatch, "label lists differ in length");
  if (codes.empty()) throw Error(ErrorKind::LengthMismatch, "purity needs at least one label");
  std::map<int, std::map<Q, std::size_t>> table;
  for (std::size_t n = 0; n < codes.size(); ++n) ++table[codes[n]][questions[n]];
  std::size_t hit = 0;
  for (const auto& [code, by_q] : table) {
    std::size_t best = 0;
    for (const auto& [q, c] : by_q) best = std::max(best, c);
    hit += best;
  }
  return static_cast<double>(hit) / static_cast<double>(codes.size());
}

template <typename Q>
double purity(const std::vector<int>& codes, const std::vector<Q>& questions) {
  return purity(std::span<const int>(codes), std::span<const Q>(questions));
}

struct CollapseStats {
  double collapse_fraction = 0.0;
  double uniqueness_mean = 0.0;
  bool all_single_segment = false;
};

/// `labels` holds one code per segment in dataset order.
inline CollapseStats collapse_and_uniqueness(const TraceDataset& dataset, std::span<const int> labels) {
  CollapseStats s;
  if (labels.size() < dataset.segment_count())
    throw Error(ErrorKind::MissingLabel, std::to_string(labels.size()) + " labels for " +
                                             std::to_string(dataset.segment_count()) + " segments");
  if (dataset.traces.empty()) return s;
  std::size_t pos = 0, collapsed = 0, distinct_sum = 0;
  bool all_single = true;
  for (const auto& t : dataset.traces) {
    const std::size_t m = t.segments.size();
    std::set<int> distinct(labels.begin() + static_cast<std::ptrdiff_t>(pos),
                           labels.begin() + static_cast<std::ptrdiff_t>(pos + m));
    pos += m;
    if (distinct.size() <= 1) ++collapsed;
    if (m > 1) all_single = false;
    distinct_sum += distinct.size();
  }
  const double n = static_cast<double>(dataset.traces.size());
  s.collapse_fraction = static_cast<double>(collapsed) / n;
  s.uniqueness_mean = static_cast<double>(distinct_sum) / n;
  s.all_single_segment = all_single;
  return s;
}

inline ClusterReport cluster_report(const TraceDataset& dataset, std::span<const int> labels, std::size_t k) {
  ClusterReport r;
  const auto usage = usage_stats(labels, k);
  r.used_fraction = usage.used_fraction;
  r.min_code_count = usage.min_code_count;
  std::vector<std::string> questions;
  questions.reserve(labels.size());
  for (const auto& t : dataset.traces)
    for (std::size_t j = 0; j < t.segments.size(); ++j) questions.push_back(t.trace_id);
  if (questions.size() != labels.size())
    throw Error(ErrorKind::MissingLabel, "labels do not cover the dataset segments");
  if (labels.size() >= 2) r.ami = ami(labels, std::span<const std::string>(questions));
  if (!labels.empty()) r.purity = purity(labels, std::span<const std::string>(questions));
  const auto cu = collapse_and_uniqueness(dataset, labels);
  r.collapse_fraction = cu.collapse_fraction;
  r.uniqueness_mean = cu.uniqueness_mean;
  r.all_single_segment = cu.all_single_segment;
  return r;
}

// ---------------------------------------------------------------------------
// Report rendering

struct DiagnosticsReport {
  std::string center_mode;
  std::size_t k = 0;
  std::vector<std::pair<std::string, GeometryReport>> geometry;  // row label -> metrics
  ClusterReport clustering;
  double mean_functional_tokens = 0.0;
};

inline nlohmann::json report_to_json(const DiagnosticsReport& r) {
  nlohmann::json geometry = nlohmann::json::array();
  for (const auto& [name, g] : r.geometry)
    geometry.push_back({{"set", name},
                        {"bias_share", g.bias_share},
                        {"avg_cosine", g.avg_cosine},
                        {"max_cosine", g.max_cosine},
                        {"n_vectors", g.n_vectors}});
  const auto& c = r.clustering;
  return {{"center_mode", r.center_mode},
          {"k", r.k},
          {"geometry", std::move(geometry)},
          {"geometry_note", "boundary tokens <SOF>/<EOF> excluded; functional token vectors only"},
          {"clustering",
           {{"used", c.used_fraction},
            {"min_code_count", c.min_code_count},
            {"ami", c.ami},
            {"purity", c.purity},
            {"collapse", c.collapse_fraction},
            {"uniqueness", c.uniqueness_mean},
            {"all_single_segment", c.all_single_segment}}},
          {"mean_functional_tokens", r.mean_functional_tokens}};
}

inline std::string report_to_text(const DiagnosticsReport& r) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-22s %8s %10s %10s\n", "Set", "Bias", "Avg Cos.", "Max Cos.");
  out += buf;
  for (const auto& [name, g] : r.geometry) {
    std::snprintf(buf, sizeof buf, "%-22s %8.3f %10.3f %10.3f\n", name.c_str(), g.bias_share, g.avg_cosine,
                  g.max_cosine);
    out += buf;
  }
  out += "\n";
  std::snprintf(buf, sizeof buf, "%-22s %7s %7s %7s %7s %7s %6s\n", "Method", "Used", "AMI", "Puri.", "Coll.", "Uniq.",
                "Min");
  out += buf;
  const auto& c = r.clustering;
  std::snprintf(buf, sizeof buf, "%-22s %7.3f %7.3f %7.3f %7.3f %7.2f %6zu\n", r.center_mode.c_str(), c.used_fraction,
                c.ami, c.purity, c.collapse_fraction, c.uniqueness_mean, c.min_code_count);
  out += buf;
  if (c.all_single_segment) out += "note: every trace has one segment, collapse is 1 by definition\n";
  out += "note: boundary tokens excluded from geometry\n";
  return out;
}

inline std::string report_to_csv(const DiagnosticsReport& r) {
  char buf[256];
  std::string out = "kind,set,bias_share,avg_cosine,max_cosine,used,min_code_count,ami,purity,collapse,uniqueness\n";
  for (const auto& [name, g] : r.geometry) {
    std::snprintf(buf, sizeof buf, "geometry,%s,%.9g,%.9g,%.9g,,,,,,\n", name.c_str(), g.bias_share, g.avg_cosine,
                  g.max_cosine);
    out += buf;
  }
  const auto& c = r.clustering;
  std::snprintf(buf, sizeof buf, "clustering,%s,,,,%.9g,%zu,%.9g,%.9g,%.9g,%.9g\n", r.center_mode.c_str(),
                c.used_fraction, c.min_code_count, c.ami, c.purity, c.collapse_fraction, c.uniqueness_mean);
  out += buf;
  return out;
}

}  // namespace cirf
