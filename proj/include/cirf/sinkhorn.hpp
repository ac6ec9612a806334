#pragma once

// Balanced code assignment: Gaussian affinities to K anchors, Sinkhorn-Knopp
// rescaling onto {row sums = 1, column sums = M/K}, then a row-wise argmax.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cirf/container.hpp"
#include "cirf/embedding.hpp"
#include "cirf/error.hpp"
#include "cirf/matrix.hpp"

namespace cirf {

inline constexpr double kAffinityFloor = 1e-300;
inline constexpr double kLogDomainThreshold = 1e-100;

struct AffinityMatrix {
  Matrix<double> values;      // exp(-d^2 / lambda), floored at kAffinityFloor
  Matrix<double> log_values;  // -d^2 / lambda, unfloored
  double lambda = 0.05;
};

struct BalancedAssignment {
  Matrix<double> q;
  std::vector<int> hard;
  int iterations_run = 0;
  bool log_domain = false;
};

enum class AnchorMethod { uniform, kmeanspp };

inline std::string_view to_string(AnchorMethod m) { return m == AnchorMethod::uniform ? "uniform" : "kmeans++"; }

/// K distinct rows by seeded uniform sampling without replacement. M == K
/// returns every row in index order.
template <typename T>
std::vector<std::size_t> select_anchor_rows(const Matrix<T>& points, std::size_t k, std::uint64_t seed) {
  const std::size_t m = points.rows();
  if (k == 0) throw Error(ErrorKind::TooFewPoints, "K must be at least 1");
  if (m < k) throw Error(ErrorKind::TooFewPoints, std::to_string(m) + " points for " + std::to_string(k) + " anchors");
  std::vector<std::size_t> ids(m);
  std::iota(ids.begin(), ids.end(), 0);
  if (m == k) return ids;
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, m - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  return ids;
}

/// Greedy k-means++ seeding: first row uniform; each later step draws
/// 2 + floor(ln K) candidates with probability proportional to squared distance
/// from the nearest chosen anchor and keeps the one that lowers the total
/// potential most.
template <typename T>
std::vector<std::size_t> select_anchor_rows_kmeanspp(const Matrix<T>& points, std::size_t k, std::uint64_t seed) {
  const std::size_t m = points.rows();
  if (k == 0) throw Error(ErrorKind::TooFewPoints, "K must be at least 1");
  if (m < k) throw Error(ErrorKind::TooFewPoints, std::to_string(m) + " points for " + std::to_string(k) + " anchors");
  std::vector<std::size_t> ids(m);
  std::iota(ids.begin(), ids.end(), 0);
  if (m == k) return ids;

  std::mt19937_64 rng(seed);
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  std::vector<std::size_t> chosen;
  std::vector<char> taken(m, 0);
  std::vector<double> nearest(m, std::numeric_limits<double>::infinity());
  auto take = [&](std::size_t idx) {
    chosen.push_back(idx);
    taken[idx] = 1;
    for (std::size_t n = 0; n < m; ++n)
      nearest[n] = std::min(nearest[n], squared_distance(points.row(n), points.row(idx)));
  };
  auto draw = [&](double total) {
    double target = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t pick = m;
    for (std::size_t n = 0; n < m; ++n) {
      if (taken[n] || nearest[n] <= 0.0) continue;
      pick = n;
      target -= nearest[n];
      if (target < 0.0) break;
    }
    return pick;
  };
  take(std::uniform_int_distribution<std::size_t>(0, m - 1)(rng));
  while (chosen.size() < k) {
    double total = 0.0;
    for (std::size_t n = 0; n < m; ++n)
      if (!taken[n]) total += nearest[n];
    std::size_t next = m;
    if (total > 0.0) {
      double best_potential = std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t cand = draw(total);
        if (cand == m) continue;
        double potential = 0.0;
        for (std::size_t n = 0; n < m; ++n)
          potential += std::min(nearest[n], squared_distance(points.row(n), points.row(cand)));
        if (potential < best_potential) {
          best_potential = potential;
          next = cand;
        }
      }
    }
    if (next == m) {  // only duplicates of chosen rows remain
      std::vector<std::size_t> free;
      for (std::size_t n = 0; n < m; ++n)
        if (!taken[n]) free.push_back(n);
      next = free[std::uniform_int_distribution<std::size_t>(0, free.size() - 1)(rng)];
    }
    take(next);
  }
  return chosen;
}

template <typename T>
Matrix<double> gather_rows(const Matrix<T>& points, std::span<const std::size_t> ids) {
  Matrix<double> out(ids.size(), points.cols());
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t c = 0; c < points.cols(); ++c) out(i, c) = static_cast<double>(points(ids[i], c));
  return out;
}

template <typename T>
Matrix<double> select_anchors(const Matrix<T>& points, std::size_t k, std::uint64_t seed,
                              AnchorMethod method = AnchorMethod::uniform) {
  const auto ids = method == AnchorMethod::uniform ? select_anchor_rows(points, k, seed)
                                                   : select_anchor_rows_kmeanspp(points, k, seed);
  return gather_rows(points, std::span<const std::size_t>(ids));
}

inline AffinityMatrix affinity(const Matrix<double>& points, const Matrix<double>& anchors, double lambda) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw Error(ErrorKind::NonFiniteInput, "lambda must be positive");
  if (points.cols() != anchors.cols()) throw Error(ErrorKind::ShapeMismatch, "points and anchors differ in dim");
  if (!all_finite(std::span<const double>(points.data())) || !all_finite(std::span<const double>(anchors.data())))
    throw Error(ErrorKind::NonFiniteInput, "non-finite point or anchor");
  AffinityMatrix a;
  a.lambda = lambda;
  a.values = Matrix<double>(points.rows(), anchors.rows());
  a.log_values = Matrix<double>(points.rows(), anchors.rows());
  for (std::size_t n = 0; n < points.rows(); ++n)
    for (std::size_t k = 0; k < anchors.rows(); ++k) {
      const double logv = -squared_distance(points.row(n), anchors.row(k)) / lambda;
      a.log_values(n, k) = logv;
      a.values(n, k) = std::max(std::exp(logv), kAffinityFloor);
    }
  return a;
}

/// Row-wise argmax, lowest index on ties.
inline std::vector<int> hard_assign(const Matrix<double>& q) {
  std::vector<int> labels(q.rows(), 0);
  for (std::size_t n = 0; n < q.rows(); ++n) {
    auto row = q.row(n);
    std::size_t best = 0;
    for (std::size_t k = 1; k < row.size(); ++k)
      if (row[k] > row[best]) best = k;
    labels[n] = static_cast<int>(best);
  }
  return labels;
}

namespace detail {

inline double log_sum_exp(const double* values, std::size_t n, std::size_t stride) {
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) hi = std::max(hi, values[i * stride]);
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::exp(values[i * stride] - hi);
  return hi + std::log(acc);
}

inline void sinkhorn_linear(Matrix<double>& q, int iterations) {
  const std::size_t m = q.rows(), k = q.cols();
  const double col_target = static_cast<double>(m) / static_cast<double>(k);
  std::vector<double> col(k);
  for (int it = 0; it < iterations; ++it) {
    std::fill(col.begin(), col.end(), 0.0);
    for (std::size_t n = 0; n < m; ++n)
      for (std::size_t c = 0; c < k; ++c) col[c] += q(n, c);
    for (std::size_t c = 0; c < k; ++c) {
      if (!(col[c] > 0.0) || !std::isfinite(col[c]))
        throw Error(ErrorKind::NumericalUnderflow, "column " + std::to_string(c) + " collapsed");
      col[c] = col_target / col[c];
    }
    for (std::size_t n = 0; n < m; ++n) {
      auto row = q.row(n);
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) {
        row[c] *= col[c];
        sum += row[c];
      }
      if (!(sum > 0.0) || !std::isfinite(sum))
        throw Error(ErrorKind::NumericalUnderflow, "row " + std::to_string(n) + " collapsed");
      for (std::size_t c = 0; c < k; ++c) row[c] /= sum;
    }
  }
}

inline void sinkhorn_log(Matrix<double>& logq, int iterations) {
  const std::size_t m = logq.rows(), k = logq.cols();
  const double log_col_target = std::log(static_cast<double>(m) / static_cast<double>(k));
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t c = 0; c < k; ++c) {
      const double lse = log_sum_exp(logq.data().data() + c, m, k);
      if (!std::isfinite(lse)) throw Error(ErrorKind::NumericalUnderflow, "column " + std::to_string(c) + " collapsed");
      for (std::size_t n = 0; n < m; ++n) logq(n, c) += log_col_target - lse;
    }
    for (std::size_t n = 0; n < m; ++n) {
      const double lse = log_sum_exp(logq.row(n).data(), k, 1);
      if (!std::isfinite(lse)) throw Error(ErrorKind::NumericalUnderflow, "row " + std::to_string(n) + " collapsed");
      for (std::size_t c = 0; c < k; ++c) logq(n, c) -= lse;
    }
  }
}

}  // namespace detail

/// Each iteration rescales columns to M/K, then rows to 1, so row sums are
/// exact on exit. Falls back to log-space when any affinity is below 1e-100.
inline BalancedAssignment sinkhorn_normalize(const AffinityMatrix& a, int iterations) {
  if (iterations < 1) throw Error(ErrorKind::NonFiniteInput, "sinkhorn needs at least one iteration");
  const std::size_t m = a.values.rows(), k = a.values.cols();
  if (m == 0 || k == 0) throw Error(ErrorKind::TooFewPoints, "empty affinity matrix");
  BalancedAssignment out;
  out.iterations_run = iterations;

  const double smallest = *std::min_element(a.values.data().begin(), a.values.data().end());
  if (!all_finite(std::span<const double>(a.values.data())))
    throw Error(ErrorKind::NonFiniteInput, "affinity holds a non-finite entry");
  if (!(smallest > 0.0)) throw Error(ErrorKind::NonFiniteInput, "affinity entries must be positive");

  if (smallest >= kLogDomainThreshold) {
    out.q = a.values;
    detail::sinkhorn_linear(out.q, iterations);
  } else {
    out.log_domain = true;
    Matrix<double> logq = a.log_values;
    if (logq.rows() != m || logq.cols() != k) {
      logq = Matrix<double>(m, k);
      for (std::size_t i = 0; i < logq.data().size(); ++i) logq.data()[i] = std::log(a.values.data()[i]);
    }
    detail::sinkhorn_log(logq, iterations);
    out.q = Matrix<double>(m, k);
    for (std::size_t i = 0; i < logq.data().size(); ++i) out.q.data()[i] = std::exp(logq.data()[i]);
  }
  out.hard = hard_assign(out.q);
  return out;
}

/// Convenience: affinity from raw values (log computed from them).
inline AffinityMatrix affinity_from_values(Matrix<double> values, double lambda = 0.05) {
  AffinityMatrix a;
  a.lambda = lambda;
  a.log_values = Matrix<double>(values.rows(), values.cols());
  for (std::size_t i = 0; i < values.data().size(); ++i) a.log_values.data()[i] = std::log(values.data()[i]);
  a.values = std::move(values);
  return a;
}

inline std::vector<std::size_t> code_counts(std::span<const int> labels, std::size_t k) {
  std::vector<std::size_t> counts(k, 0);
  for (const int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

// ---------------------------------------------------------------------------
// Assignment file (CIRFASN1): Q rows as f32, blob {"index", "labels", "iterations", "log_domain"}

inline constexpr std::string_view kAssignmentMagic = "CIRFASN1";

struct AssignmentFile {
  BalancedAssignment assignment;
  std::vector<RowKey> keys;  // row n of Q belongs to keys[n]
};

inline std::vector<std::uint8_t> encode_assignment_file(const AssignmentFile& file) {
  nlohmann::json blob;
  blob["index"] = nlohmann::json::object();
  for (std::size_t n = 0; n < file.keys.size(); ++n) blob["index"][format_row_key(file.keys[n])] = n;
  blob["labels"] = file.assignment.hard;
  blob["iterations"] = file.assignment.iterations_run;
  blob["log_domain"] = file.assignment.log_domain;
  return encode_container(kAssignmentMagic, file.assignment.q.cast<float>(), false, blob);
}

inline AssignmentFile decode_assignment_file(std::span<const std::uint8_t> bytes) {
  DecodedContainer c = decode_container(bytes, kAssignmentMagic);
  AssignmentFile f;
  f.assignment.q = c.rows.cast<double>();
  try {
    f.assignment.hard = c.blob.at("labels").get<std::vector<int>>();
    f.assignment.iterations_run = c.blob.at("iterations").get<int>();
    f.assignment.log_domain = c.blob.at("log_domain").get<bool>();
    f.keys.resize(c.rows.rows());
    for (const auto& [key, row] : c.blob.at("index").items()) {
      const auto r = row.get<std::size_t>();
      if (r >= f.keys.size()) throw Error(ErrorKind::ChecksumMismatch, "assignment index out of range");
      f.keys[r] = parse_row_key(key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::ChecksumMismatch, std::string("assignment blob unreadable: ") + e.what());
  }
  if (f.assignment.hard.size() != f.keys.size()) throw Error(ErrorKind::ChecksumMismatch, "label count mismatch");
  return f;
}

inline void write_assignment_file(const AssignmentFile& file, const std::filesystem::path& path) {
  write_file_bytes(path, encode_assignment_file(file));
}

inline AssignmentFile read_assignment_file(const std::filesystem::path& path) {
  return decode_assignment_file(read_file_bytes(path));
}

}  // namespace cirf
