#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cirf/mlp.hpp"
#include "cirf/vq.hpp"
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

// tanh(s x) / s is the identity to within s^2 |x|^3 / 3.
MlpNetwork near_identity(std::size_t d, double s = 1e-3) {
  MlpNetwork net(d, d, d);
  for (std::size_t i = 0; i < d; ++i) {
    net.w1(i, i) = s;
    net.w2(i, i) = 1.0 / s;
  }
  return net;
}

MlpNetwork constant_net(std::size_t in, std::size_t out, double value) {
  MlpNetwork net(in, 1, out);
  for (std::size_t o = 0; o < out; ++o) net.b2(o) = value;
  return net;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

}  // namespace

TEST(Mlp, ZeroNetIsZero) {
  MlpNetwork net(3, 4, 2);
  const std::vector<double> x{1, -2, 3};
  EXPECT_EQ(mlp_forward(net, std::span<const double>(x)), (std::vector<double>{0, 0}));
}

TEST(Mlp, IdentityLikeDerivative) {
  MlpNetwork net(1, 1, 1);
  net.w1(0, 0) = 1;
  net.w2(0, 0) = 1;
  const std::vector<double> x{0.0}, g{1.0};
  EXPECT_EQ(mlp_forward(net, std::span<const double>(x))[0], 0.0);
  const auto grads = mlp_backward(net, std::span<const double>(x), std::span<const double>(g));
  EXPECT_DOUBLE_EQ(grads.input[0], 1.0);
}

TEST(Mlp, FiniteDifferenceGradients) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd(0, 1);
  for (int trial = 0; trial < 5; ++trial) {
    MlpNetwork net = make_mlp(4, 3, 2, rng);
    for (auto& p : net.params) p += 0.1 * nd(rng);  // nonzero biases too
    std::vector<double> x(4), w(2);
    for (auto& v : x) v = nd(rng);
    for (auto& v : w) v = nd(rng);
    // loss = w . f(x)
    auto loss = [&](const MlpNetwork& n, const std::vector<double>& in) {
      const auto y = mlp_forward(n, std::span<const double>(in));
      return w[0] * y[0] + w[1] * y[1];
    };
    const auto g = mlp_backward(net, std::span<const double>(x), std::span<const double>(w));
    const double h = 1e-4;
    for (std::size_t i = 0; i < net.params.size(); ++i) {
      MlpNetwork a = net, b = net;
      a.params[i] += h;
      b.params[i] -= h;
      const double fd = (loss(a, x) - loss(b, x)) / (2 * h);
      EXPECT_LT(rel_err(g.params[i], fd), 1e-4) << "param " << i;
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto xa = x, xb = x;
      xa[i] += h;
      xb[i] -= h;
      EXPECT_LT(rel_err(g.input[i], (loss(net, xa) - loss(net, xb)) / (2 * h)), 1e-4);
    }
  }
}

TEST(Mlp, ShapeMismatch) {
  MlpNetwork net(3, 2, 1);
  const std::vector<double> x{1, 2};
  EXPECT_EQ(kind_of([&] { mlp_forward(net, std::span<const double>(x)); }), ErrorKind::ShapeMismatch);
}

TEST(Adam, MaskSkipsEntriesAndClipScalesJointly) {
  AdamOptimizer opt(3, 0.1);
  std::vector<double> p{1, 1, 1};
  const std::vector<double> g{1, 1, 1};
  const std::vector<char> mask{1, 0, 1};
  opt.step(p, g, mask);
  EXPECT_NEAR(p[0], 0.9, 1e-6);
  EXPECT_EQ(p[1], 1.0);

  std::vector<double> a{3, 0}, b{4};
  std::vector<std::span<double>> groups{a, b};
  EXPECT_DOUBLE_EQ(clip_gradient_norm(groups, 1.0), 5.0);
  EXPECT_NEAR(std::hypot(a[0], b[0]), 1.0, 1e-6);
  EXPECT_NEAR(a[0] / b[0], 0.75, 1e-12);
}

TEST(Pretrain, ZeroEpochsReturnsInitialNets) {
  Matrix<double> pts(4, 3, 0.5);
  VqTrainConfig c;
  c.pretrain_epochs = 0;
  c.hidden = 5;
  c.code_dim = 2;
  c.seed = 4;
  const auto ae = pretrain_autoencoder(pts, c);
  const auto init = make_autoencoder(3, 5, 2, 4);
  EXPECT_EQ(ae.encoder, init.encoder);
  EXPECT_EQ(ae.decoder, init.decoder);
}

TEST(Pretrain, OverfitsRepeatedVector) {
  Matrix<double> pts(16, 4);
  for (std::size_t n = 0; n < 16; ++n) {
    pts(n, 0) = 0.3;
    pts(n, 1) = -0.2;
    pts(n, 2) = 0.1;
    pts(n, 3) = 0.4;
  }
  VqTrainConfig c;
  c.pretrain_epochs = 100;
  c.learning_rate = 1e-2;
  c.batch_size = 4;
  c.hidden = 8;
  c.code_dim = 3;
  std::vector<double> losses;
  pretrain_autoencoder(pts, c, &losses);
  ASSERT_EQ(losses.size(), 100u);
  EXPECT_LT(losses.back(), 1e-3);
}

TEST(Pretrain, DeterministicForSeed) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  Matrix<double> pts(20, 3);
  for (auto& v : pts.data()) v = nd(rng);
  VqTrainConfig c;
  c.pretrain_epochs = 3;
  c.hidden = 4;
  c.code_dim = 2;
  c.batch_size = 6;
  const auto a = pretrain_autoencoder(pts, c);
  const auto b = pretrain_autoencoder(pts, c);
  EXPECT_EQ(a.encoder, b.encoder);
  EXPECT_EQ(a.decoder, b.decoder);
}

TEST(InitCodebook, SingleCodeIsMean) {
  Matrix<double> pts(3, 1);
  pts(0, 0) = 1;
  pts(1, 0) = 2;
  pts(2, 0) = 6;
  VqTrainConfig c;
  const auto [cb, asn] = balanced_codebook_init(pts, 1, c);
  EXPECT_DOUBLE_EQ(cb.vectors(0, 0), 3.0);
  EXPECT_EQ(cb.usage_counts, (std::vector<std::size_t>{3}));
}

TEST(InitCodebook, TwoSeparatedClusters) {
  Matrix<double> pts(8, 1);
  const double xs[] = {-5.01, -4.99, -5.0, -5.002, 5.0, 5.01, 4.99, 5.002};
  for (std::size_t n = 0; n < 8; ++n) pts(n, 0) = xs[n];
  VqTrainConfig c;
  for (auto method : {AnchorMethod::kmeanspp, AnchorMethod::uniform}) {
    c.anchor_method = method;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      c.seed = seed;
      const auto [cb, asn] = init_codebook(near_identity(1), pts, 2, c);
      // brute-force cluster means
      const double lo = (-5.01 - 4.99 - 5.0 - 5.002) / 4, hi = (5.0 + 5.01 + 4.99 + 5.002) / 4;
      std::vector<double> codes{cb.vectors(0, 0), cb.vectors(1, 0)};
      std::sort(codes.begin(), codes.end());
      if (method == AnchorMethod::kmeanspp || codes[0] < 0) {
        EXPECT_NEAR(codes[0], lo, 1e-3);
        EXPECT_NEAR(codes[1], hi, 1e-3);
        EXPECT_EQ(cb.usage_counts, (std::vector<std::size_t>{4, 4}));
      }
    }
  }
}

TEST(InitCodebook, MEqualsKUsesEachPoint) {
  Matrix<double> pts(3, 2);
  pts(0, 0) = 1;
  pts(1, 1) = 1;
  pts(2, 0) = -1;
  VqTrainConfig c;
  const auto [cb, asn] = balanced_codebook_init(pts, 3, c);
  EXPECT_EQ(cb.vectors, pts);
  EXPECT_EQ(asn.hard, (std::vector<int>{0, 1, 2}));
}

TEST(VqLossTerms, ScalarExample) {
  EXPECT_NEAR(vq_sample_loss(0.01, 0.09, 1.0), 0.19, 1e-15);
  VqModel m{constant_net(1, 1, 0.5), constant_net(1, 1, 0.9), {}};
  m.codebook.vectors = Matrix<double>(1, 1, 0.8);
  Matrix<double> z(1, 1, 1.0);
  const std::vector<int> labels{0};
  const std::vector<std::size_t> batch{0};
  const auto l = vq_batch(m, z, labels, batch, 1.0, true, kAllTerms, nullptr);
  EXPECT_NEAR(l.reconstruction, 0.01, 1e-12);
  EXPECT_NEAR(l.codebook, 0.09, 1e-12);
  EXPECT_NEAR(l.commitment, 0.09, 1e-12);
  EXPECT_NEAR(l.total, 0.19, 1e-12);
}

TEST(VqLossTerms, ZeroWhenExact) {
  VqModel m{constant_net(1, 1, 0.8), constant_net(1, 1, 1.0), {}};
  m.codebook.vectors = Matrix<double>(1, 1, 0.8);
  Matrix<double> z(1, 1, 1.0);
  const std::vector<int> labels{0};
  const std::vector<std::size_t> batch{0};
  EXPECT_EQ(vq_batch(m, z, labels, batch, 1.0, true, kAllTerms, nullptr).total, 0.0);
}

namespace {

struct Snapshot {
  std::vector<double> enc, dec, cb;
  explicit Snapshot(const VqModel& m) : enc(m.encoder.params), dec(m.decoder.params), cb(m.codebook.vectors.data()) {}
};

VqModel random_model(std::uint64_t seed) {
  const auto ae = make_autoencoder(3, 4, 2, seed);
  VqModel m{ae.encoder, ae.decoder, {}};
  m.codebook.vectors = Matrix<double>(2, 2);
  m.codebook.vectors(0, 0) = 0.3;
  m.codebook.vectors(1, 1) = -0.4;
  return m;
}

}  // namespace

TEST(VqTrainer, StopGradientRouting) {
  Matrix<double> pts(4, 3);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  for (auto& v : pts.data()) v = nd(rng);
  const std::vector<int> labels{0, 1, 0, 1};
  const std::vector<std::size_t> batch{0, 1, 2, 3};
  VqTrainConfig c;
  c.learning_rate = 1e-2;

  struct Case {
    unsigned terms;
    bool straight_through;
    bool enc, dec, cb;  // which parts are expected to move
  };
  for (const Case k : {Case{kCodebookTerm, true, false, false, true}, Case{kCommitmentTerm, true, true, false, false},
                       Case{kReconstructionTerm, true, true, true, false},
                       Case{kReconstructionTerm, false, false, true, false}}) {
    c.straight_through = k.straight_through;
    VqTrainer t(random_model(5), c);
    const Snapshot before(t.model());
    t.step(pts, labels, batch, k.terms);
    const Snapshot after(t.model());
    EXPECT_EQ(before.enc != after.enc, k.enc) << "terms " << k.terms;
    EXPECT_EQ(before.dec != after.dec, k.dec) << "terms " << k.terms;
    EXPECT_EQ(before.cb != after.cb, k.cb) << "terms " << k.terms;
  }
}

TEST(VqTrainer, FrozenCodesStayPut) {
  Matrix<double> pts(2, 3, 0.2);
  const std::vector<int> labels{0, 1};
  const std::vector<std::size_t> batch{0, 1};
  VqTrainer t(random_model(6), VqTrainConfig{});
  const std::vector<char> frozen{0, 1};
  const auto before = t.model().codebook.vectors;
  t.step(pts, labels, batch, kAllTerms, {}, frozen);
  EXPECT_NE(before.row(0)[0], t.model().codebook.vectors.row(0)[0]);
  EXPECT_EQ(before.row(1)[0], t.model().codebook.vectors.row(1)[0]);
  EXPECT_EQ(before.row(1)[1], t.model().codebook.vectors.row(1)[1]);
}

TEST(TrainVq, DeterministicAndLogsEpochs) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Matrix<double> pts(30, 4);
  for (auto& v : pts.data()) v = nd(rng);
  VqTrainConfig c;
  c.hidden = 5;
  c.code_dim = 3;
  c.vq_epochs = 3;
  c.pretrain_epochs = 2;
  c.batch_size = 8;
  const auto ae = pretrain_autoencoder(pts, c);
  auto [cb, asn] = init_codebook(ae.encoder, pts, 4, c);
  const VqModel m{ae.encoder, ae.decoder, cb};
  const auto a = train_vq(pts, m, c);
  const auto b = train_vq(pts, m, c);
  EXPECT_EQ(a.epochs.size(), 3u);
  EXPECT_EQ(a.model.codebook.vectors, b.model.codebook.vectors);
  EXPECT_EQ(a.model.encoder, b.model.encoder);
  EXPECT_EQ(a.final_assignment.hard, b.final_assignment.hard);
}

TEST(TrainVq, NonFiniteLossAborts) {
  Matrix<double> pts(4, 3, 0.1);
  pts(2, 1) = std::numeric_limits<double>::infinity();
  VqTrainConfig c;
  VqModel m = random_model(1);
  const std::vector<int> labels{0, 1, 0, 1};
  const std::vector<std::size_t> batch{0, 1, 2, 3};
  VqTrainer t(m, c);
  EXPECT_EQ(kind_of([&] { t.step(pts, labels, batch); }), ErrorKind::NonFiniteLoss);
}

TEST(Quantize, NearestAndTieBreak) {
  Codebook cb;
  cb.vectors = Matrix<double>(4, 1);
  cb.vectors(0, 0) = -3;
  cb.vectors(1, 0) = 0;
  cb.vectors(2, 0) = 2;
  cb.vectors(3, 0) = 7;
  const auto enc = near_identity(1, 1e-6);
  const std::vector<double> at3{7.0}, mid{1.0};
  EXPECT_EQ(quantize(enc, cb, std::span<const double>(at3)).code_id, 3);
  EXPECT_EQ(quantize(enc, cb, std::span<const double>(mid)).code_id, 1);
}

TEST(Quantize, MatchesBruteForceOnHeldOutPoints) {
  Matrix<double> pts(8, 1);
  const double xs[] = {-5.01, -4.99, -5.0, -5.002, 5.0, 5.01, 4.99, 5.002};
  for (std::size_t n = 0; n < 8; ++n) pts(n, 0) = xs[n];
  const auto enc = near_identity(1);
  const auto [cb, asn] = init_codebook(enc, pts, 2, VqTrainConfig{});
  for (double x : {-6.0, -4.5, -0.1, 0.1, 3.0, 5.5}) {
    const std::vector<double> z{x};
    const double e = mlp_forward(enc, std::span<const double>(z))[0];
    const int brute = std::abs(e - cb.vectors(0, 0)) <= std::abs(e - cb.vectors(1, 0)) ? 0 : 1;
    EXPECT_EQ(quantize(enc, cb, std::span<const double>(z)).code_id, brute);
  }
}

TEST(Export, ScalesToAlpha) {
  Codebook cb;
  cb.vectors = Matrix<double>(2, 2);
  cb.vectors(0, 0) = 3;
  cb.vectors(0, 1) = 4;
  cb.vectors(1, 0) = 1;
  const auto e = export_token_embeddings(cb, 0.01);
  EXPECT_EQ(e(0, 0), 0.006f);
  EXPECT_EQ(e(0, 1), 0.008f);
  EXPECT_EQ(e(1, 0), 0.01f);
  EXPECT_EQ(e(1, 1), 0.0f);
  cb.vectors(1, 0) = 0;
  EXPECT_EQ(kind_of([&] { export_token_embeddings(cb, 0.01); }), ErrorKind::ZeroNormCode);
}

TEST(CodebookFile, RoundTripAndCorruption) {
  testutil::TempDir dir;
  CodebookArtifact a{random_model(2), 0.01};
  write_codebook_file(a, dir / "c.cbk");
  const auto back = read_codebook_file(dir / "c.cbk");
  EXPECT_EQ(back.model.encoder.params.size(), a.model.encoder.params.size());
  EXPECT_EQ(back.model.codebook.k(), 2u);
  EXPECT_EQ(encode_codebook_file(back), encode_codebook_file(a));
  auto bytes = read_file_bytes(dir / "c.cbk");
  bytes[40] ^= 1;
  EXPECT_EQ(kind_of([&] { decode_codebook_file(bytes); }), ErrorKind::ChecksumMismatch);
}
