#include <random>

#include <gtest/gtest.h>

#include "cirf/diagnostics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cirf;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorKind::Io;
}

Matrix<double> rows(std::initializer_list<std::vector<double>> rs) {
  Matrix<double> m(rs.size(), rs.begin()->size());
  std::size_t r = 0;
  for (const auto& row : rs) {
    for (std::size_t c = 0; c < row.size(); ++c) m(r, c) = row[c];
    ++r;
  }
  return m;
}

TraceDataset dataset_with_lengths(std::initializer_list<int> lengths) {
  TraceDataset ds;
  int i = 0;
  for (int m : lengths) {
    std::string rationale;
    for (int j = 1; j <= m; ++j) rationale += std::to_string(j) + ". s\n";
    ds.traces.push_back(parse_trace(testutil::record("t" + std::to_string(i++), rationale)));
  }
  return ds;
}

}  // namespace

TEST(BiasShare, Examples) {
  EXPECT_DOUBLE_EQ(bias_share(rows({{1, 0}, {1, 0}})), 1.0);
  EXPECT_DOUBLE_EQ(bias_share(rows({{1, 0}, {-1, 0}})), 0.0);
  EXPECT_NEAR(bias_share(rows({{1, 0}, {0, 1}})), std::sqrt(0.5), 1e-15);
  EXPECT_EQ(kind_of([] { bias_share(rows({{0, 0}, {0, 0}})); }), ErrorKind::AllZeroNorm);
}

TEST(PairwiseCosine, Examples) {
  const auto orth = pairwise_cosine_stats(rows({{1, 0}, {0, 2}}));
  EXPECT_DOUBLE_EQ(orth.avg, 0.0);
  EXPECT_DOUBLE_EQ(orth.max, 0.0);
  const auto three = pairwise_cosine_stats(rows({{1, 0}, {2, 0}, {-1, 0}}));
  EXPECT_NEAR(three.avg, -1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(three.max, 1.0);
  EXPECT_EQ(kind_of([] { pairwise_cosine_stats(rows({{1, 0}})); }), ErrorKind::TooFewVectors);
  EXPECT_EQ(kind_of([] { pairwise_cosine_stats(rows({{1, 0}, {0, 0}})); }), ErrorKind::ZeroNormVector);
}

TEST(PairwiseCosine, ShiftedCloudHasHighBias) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  Matrix<double> m(50, 8);
  for (std::size_t r = 0; r < 50; ++r)
    for (std::size_t c = 0; c < 8; ++c) m(r, c) = nd(rng) * 0.1 + (c == 0 ? 3.0 : 0.0);
  const auto g = geometry_report(m);
  EXPECT_GT(g.bias_share, 0.9);
  EXPECT_GT(g.avg_cosine, 0.8);
  EXPECT_EQ(g.n_vectors, 50u);
}

TEST(Usage, Examples) {
  const std::vector<int> labels{0, 0, 1};
  const auto u = usage_stats(labels, 4);
  EXPECT_DOUBLE_EQ(u.used_fraction, 0.5);
  EXPECT_EQ(u.min_code_count, 0u);
  EXPECT_EQ(u.counts, (std::vector<std::size_t>{2, 1, 0, 0}));
  const std::vector<int> bad{0, 4};
  EXPECT_EQ(kind_of([&] { usage_stats(bad, 4); }), ErrorKind::LabelOutOfRange);
}

TEST(Ami, IdenticalAndRelabelledPartitionsScoreOne) {
  const std::vector<int> a{0, 0, 1, 1, 2, 2}, b{5, 5, 3, 3, 9, 9};
  EXPECT_NEAR(ami(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ami(a, b), 1.0, 1e-12);
}

TEST(Ami, SingleClusterIsZero) {
  const std::vector<int> one(6, 0), other{0, 1, 0, 1, 2, 2};
  EXPECT_EQ(ami(one, other), 0.0);
  EXPECT_EQ(ami(other, one), 0.0);
}

TEST(Ami, MatchesDirectSumOracle) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 10 + trial * 3;
    std::uniform_int_distribution<int> la(0, 2 + trial % 4), lb(0, 1 + trial % 6);
    std::vector<int> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = la(rng);
      b[i] = (trial % 3 == 0) ? (a[i] + (i % 5 == 0)) % 4 : lb(rng);
    }
    EXPECT_NEAR(ami(a, b), oracle::ami(a, b), 1e-10) << "trial " << trial;
  }
}

TEST(Ami, StringLabels) {
  const std::vector<int> codes{0, 0, 1, 1};
  const std::vector<std::string> qs{"a", "a", "b", "b"};
  EXPECT_NEAR(ami(codes, qs), 1.0, 1e-12);
}

TEST(Purity, Examples) {
  const std::vector<int> codes{0, 0, 0, 1, 1};
  const std::vector<int> qs{1, 1, 2, 2, 2};
  EXPECT_DOUBLE_EQ(purity(codes, qs), 0.8);
  const std::vector<int> same(4, 0), distinct{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(purity(same, distinct), 0.25);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> d(0, 5);
  std::vector<int> c(40), q(40);
  for (int i = 0; i < 40; ++i) {
    c[i] = d(rng);
    q[i] = d(rng);
  }
  EXPECT_DOUBLE_EQ(purity(c, q), oracle::purity(c, q));
}

TEST(Collapse, CountsTracesWithOneDistinctCode) {
  const auto ds = dataset_with_lengths({3, 2, 1});
  const std::vector<int> labels{4, 4, 4, 1, 2, 0};
  const auto s = collapse_and_uniqueness(ds, labels);
  EXPECT_NEAR(s.collapse_fraction, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.uniqueness_mean, (1.0 + 2.0 + 1.0) / 3.0, 1e-15);
  EXPECT_FALSE(s.all_single_segment);
  EXPECT_TRUE(collapse_and_uniqueness(dataset_with_lengths({1, 1}), std::vector<int>{0, 1}).all_single_segment);
  EXPECT_EQ(kind_of([&] { collapse_and_uniqueness(ds, std::vector<int>{0, 1}); }), ErrorKind::MissingLabel);
}

TEST(Report, ClusterReportAndRenderings) {
  const auto ds = dataset_with_lengths({2, 2});
  const std::vector<int> labels{0, 0, 1, 1};
  DiagnosticsReport r;
  r.center_mode = "mean";
  r.k = 2;
  r.clustering = cluster_report(ds, labels, 2);
  EXPECT_NEAR(r.clustering.ami, 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.clustering.purity, 1.0);
  EXPECT_DOUBLE_EQ(r.clustering.used_fraction, 1.0);
  EXPECT_DOUBLE_EQ(r.clustering.collapse_fraction, 1.0);
  r.geometry.emplace_back("codebook", geometry_report(rows({{1, 0}, {0, 1}})));
  const auto j = report_to_json(r);
  EXPECT_EQ(j["k"], 2);
  EXPECT_NE(report_to_text(r).find("codebook"), std::string::npos);
  const auto csv = report_to_csv(r);
  EXPECT_NE(csv.find("codebook"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n') >= 2, true);
}
