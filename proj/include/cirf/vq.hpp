#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "cirf/container.hpp"
#include "cirf/error.hpp"
#include "cirf/log.hpp"
#include "cirf/matrix.hpp"
#include "cirf/mlp.hpp"
#include "cirf/sinkhorn.hpp"

namespace cirf {

struct VqTrainConfig {
  double beta = 1.0;
  double learning_rate = 1e-4;
  std::size_t batch_size = 128;
  int pretrain_epochs = 30;
  int vq_epochs = 10;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  double lambda = 0.05;
  int sinkhorn_iterations = 3;
  std::size_t hidden = 64;
  std::size_t code_dim = 64;
  AnchorMethod anchor_method = AnchorMethod::kmeanspp;
  bool straight_through = true;
  bool reseed_empty = false;
};

struct Codebook {
  Matrix<double> vectors;  // K x d_e
  std::vector<std::size_t> usage_counts;

  std::size_t k() const noexcept { return vectors.rows(); }
  std::size_t dim() const noexcept { return vectors.cols(); }
};

struct Autoencoder {
  MlpNetwork encoder;  // d_s -> h -> d_e
  MlpNetwork decoder;  // d_e -> h -> d_s
};

namespace detail {

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  return seed * 0x9E3779B97F4A7C15ULL + stream * 0xBF58476D1CE4E5B9ULL + 1;
}

inline void check_finite_loss(double loss, std::string_view where) {
  if (!std::isfinite(loss)) throw Error(ErrorKind::NonFiniteLoss, "non-finite loss during " + std::string(where));
}

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t m, std::size_t batch_size, std::mt19937_64& rng) {
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  const std::size_t bs = std::max<std::size_t>(1, batch_size);
  for (std::size_t start = 0; start < m; start += bs)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(m, start + bs)));
  return batches;
}

}  // namespace detail

inline Autoencoder make_autoencoder(std::size_t d_s, std::size_t hidden, std::size_t d_e, std::uint64_t seed) {
  std::mt19937_64 rng(detail::stream_seed(seed, 1));
  Autoencoder ae;
  ae.encoder = make_mlp(d_s, hidden, d_e, rng);
  ae.decoder = make_mlp(d_e, hidden, d_s, rng);
  return ae;
}

template <typename T>
Matrix<double> encode_all(const MlpNetwork& encoder, const Matrix<T>& points) {
  Matrix<double> out(points.rows(), encoder.d_out);
  for (std::size_t n = 0; n < points.rows(); ++n) {
    const auto y = mlp_forward(encoder, points.row(n));
    std::copy(y.begin(), y.end(), out.row(n).begin());
  }
  return out;
}

/// Mini-batch Adam on the mean reconstruction error ||dec(enc(z)) - z||^2.
/// `epoch_losses` receives the mean per-sample loss of each epoch.
inline Autoencoder pretrain_autoencoder(const Matrix<double>& points, const VqTrainConfig& config,
                                        std::vector<double>* epoch_losses = nullptr) {
  Autoencoder ae = make_autoencoder(points.cols(), config.hidden, config.code_dim, config.seed);
  if (config.pretrain_epochs <= 0 || points.rows() == 0) return ae;

  std::mt19937_64 rng(detail::stream_seed(config.seed, 2));
  AdamOptimizer enc_opt(ae.encoder.params.size(), config.learning_rate);
  AdamOptimizer dec_opt(ae.decoder.params.size(), config.learning_rate);
  std::vector<double> g_enc(ae.encoder.params.size()), g_dec(ae.decoder.params.size());
  std::vector<double> out_grad(points.cols()), code_grad(config.code_dim);

  for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (const auto& batch : detail::epoch_batches(points.rows(), config.batch_size, rng)) {
      std::fill(g_enc.begin(), g_enc.end(), 0.0);
      std::fill(g_dec.begin(), g_dec.end(), 0.0);
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (const std::size_t n : batch) {
        const auto z = points.row(n);
        const auto enc_act = mlp_forward_cached(ae.encoder, z);
        const auto dec_act = mlp_forward_cached(ae.decoder, std::span<const double>(enc_act.output));
        double loss = 0.0;
        for (std::size_t c = 0; c < z.size(); ++c) {
          const double d = dec_act.output[c] - z[c];
          loss += d * d;
          out_grad[c] = 2.0 * d * inv_b;
        }
        epoch_loss += loss;
        mlp_backward_accumulate(ae.decoder, std::span<const double>(enc_act.output), dec_act,
                                std::span<const double>(out_grad), std::span<double>(g_dec),
                                std::span<double>(code_grad));
        mlp_backward_accumulate(ae.encoder, z, enc_act, std::span<const double>(code_grad), std::span<double>(g_enc));
      }
      const std::span<double> groups[] = {g_enc, g_dec};
      clip_gradient_norm(groups, config.grad_clip);
      enc_opt.step(ae.encoder.params, g_enc);
      dec_opt.step(ae.decoder.params, g_dec);
    }
    epoch_loss /= static_cast<double>(points.rows());
    detail::check_finite_loss(epoch_loss, "autoencoder pretraining");
    if (epoch_losses) epoch_losses->push_back(epoch_loss);
    log_debug() << "pretrain epoch " << epoch + 1 << " loss " << epoch_loss;
  }
  return ae;
}

/// Balanced clustering of already-encoded points: anchors, affinity,
/// Sinkhorn, argmax; each code becomes the mean of its points (anchor kept
/// when a code receives none).
inline std::pair<Codebook, BalancedAssignment> balanced_codebook_init(const Matrix<double>& encoded, std::size_t k,
                                                                      const VqTrainConfig& config) {
  const Matrix<double> anchors = select_anchors(encoded, k, detail::stream_seed(config.seed, 3), config.anchor_method);
  BalancedAssignment assignment =
      sinkhorn_normalize(affinity(encoded, anchors, config.lambda), config.sinkhorn_iterations);

  Codebook cb;
  cb.vectors = Matrix<double>(k, encoded.cols(), 0.0);
  cb.usage_counts = code_counts(assignment.hard, k);
  for (std::size_t n = 0; n < encoded.rows(); ++n) {
    auto dst = cb.vectors.row(static_cast<std::size_t>(assignment.hard[n]));
    auto src = encoded.row(n);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
  for (std::size_t code = 0; code < k; ++code) {
    auto dst = cb.vectors.row(code);
    if (cb.usage_counts[code] == 0) {
      std::copy(anchors.row(code).begin(), anchors.row(code).end(), dst.begin());
    } else {
      const double inv = 1.0 / static_cast<double>(cb.usage_counts[code]);
      for (double& v : dst) v *= inv;
    }
  }
  return {std::move(cb), std::move(assignment)};
}

inline std::pair<Codebook, BalancedAssignment> init_codebook(const MlpNetwork& encoder, const Matrix<double>& points,
                                                             std::size_t k, const VqTrainConfig& config) {
  return balanced_codebook_init(encode_all(encoder, points), k, config);
}

/// Balanced assignment of encoded points against the current code vectors.
inline BalancedAssignment balanced_reassign(const Matrix<double>& encoded, const Codebook& codebook,
                                            const VqTrainConfig& config) {
  return sinkhorn_normalize(affinity(encoded, codebook.vectors, config.lambda), config.sinkhorn_iterations);
}

// ---------------------------------------------------------------------------
// VQ objective

enum VqTerm : unsigned { kReconstructionTerm = 1u, kCodebookTerm = 2u, kCommitmentTerm = 4u, kAllTerms = 7u };

struct VqModel {
  MlpNetwork encoder;
  MlpNetwork decoder;
  Codebook codebook;
};

struct VqLoss {
  double reconstruction = 0.0;  // mean ||dec(q) - z'||^2
  double codebook = 0.0;        // mean ||sg[x] - q||^2
  double commitment = 0.0;      // mean ||x - sg[q]||^2 (unweighted)
  double total = 0.0;           // reconstruction + codebook + beta * commitment
};

struct VqGradients {
  std::vector<double> encoder;
  std::vector<double> decoder;
  std::vector<double> codebook;  // K x d_e row-major

  explicit VqGradients(const VqModel& m)
      : encoder(m.encoder.params.size(), 0.0),
        decoder(m.decoder.params.size(), 0.0),
        codebook(m.codebook.vectors.data().size(), 0.0) {}
};

/// Per-sample loss with the assigned code vector q.
inline double vq_sample_loss(double reconstruction_sq, double distance_sq, double beta) {
  return reconstruction_sq + distance_sq + beta * distance_sq;
}

/// Mean VQ loss over `batch` and, when `grads` is given, its gradients under
/// the stop-gradient rules: reconstruction reaches the decoder (and the
/// encoder through the straight-through copy of dL/dq), the codebook term
/// reaches only the code vectors, the commitment term only the encoder.
/// `terms` selects which terms contribute gradients.
inline VqLoss vq_batch(const VqModel& model, const Matrix<double>& points, std::span<const int> labels,
                       std::span<const std::size_t> batch, double beta, bool straight_through, unsigned terms,
                       VqGradients* grads) {
  VqLoss loss;
  if (batch.empty()) return loss;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const std::size_t d_e = model.codebook.dim();
  std::vector<double> rec_grad(model.decoder.d_out), dq(d_e), dx(d_e);

  for (const std::size_t n : batch) {
    const auto z = points.row(n);
    const auto code = static_cast<std::size_t>(labels[n]);
    if (code >= model.codebook.k()) throw Error(ErrorKind::LabelOutOfRange, "label beyond codebook size");
    const auto q = model.codebook.vectors.row(code);
    const auto enc_act = mlp_forward_cached(model.encoder, z);
    const auto dec_act = mlp_forward_cached(model.decoder, q);
    const auto& x = enc_act.output;

    double rec = 0.0;
    for (std::size_t c = 0; c < z.size(); ++c) {
      const double d = dec_act.output[c] - z[c];
      rec += d * d;
      rec_grad[c] = 2.0 * d * inv_b;
    }
    const double dist = squared_distance(std::span<const double>(x), q);
    loss.reconstruction += rec * inv_b;
    loss.codebook += dist * inv_b;
    loss.commitment += dist * inv_b;

    if (!grads) continue;
    std::fill(dx.begin(), dx.end(), 0.0);
    bool touch_encoder = false;
    if (terms & kReconstructionTerm) {
      mlp_backward_accumulate(model.decoder, q, dec_act, std::span<const double>(rec_grad),
                              std::span<double>(grads->decoder), std::span<double>(dq));
      if (straight_through) {
        for (std::size_t c = 0; c < d_e; ++c) dx[c] += dq[c];
        touch_encoder = true;
      }
    }
    if (terms & kCodebookTerm) {
      double* g = grads->codebook.data() + code * d_e;
      for (std::size_t c = 0; c < d_e; ++c) g[c] += 2.0 * (q[c] - x[c]) * inv_b;
    }
    if (terms & kCommitmentTerm) {
      for (std::size_t c = 0; c < d_e; ++c) dx[c] += 2.0 * beta * (x[c] - q[c]) * inv_b;
      touch_encoder = true;
    }
    if (touch_encoder)
      mlp_backward_accumulate(model.encoder, z, enc_act, std::span<const double>(dx), std::span<double>(grads->encoder));
  }
  loss.total = loss.reconstruction + loss.codebook + beta * loss.commitment;
  return loss;
}

struct FrozenParts {
  bool encoder = false;
  bool decoder = false;
  bool codebook = false;
};

/// Owns a model and its optimizer state; one step = gradients on a batch,
/// joint norm clipping, Adam update of every non-frozen part.
class VqTrainer {
 public:
  VqTrainer(VqModel model, const VqTrainConfig& config)
      : model_(std::move(model)),
        config_(config),
        enc_opt_(model_.encoder.params.size(), config.learning_rate),
        dec_opt_(model_.decoder.params.size(), config.learning_rate),
        cb_opt_(model_.codebook.vectors.data().size(), config.learning_rate) {}

  VqLoss step(const Matrix<double>& points, std::span<const int> labels, std::span<const std::size_t> batch,
              unsigned terms = kAllTerms, FrozenParts frozen = {}, std::span<const char> frozen_codes = {}) {
    VqGradients g(model_);
    const VqLoss loss = vq_batch(model_, points, labels, batch, config_.beta, config_.straight_through, terms, &g);
    detail::check_finite_loss(loss.total, "vq training");

    std::vector<std::span<double>> groups;
    if (!frozen.encoder) groups.emplace_back(g.encoder);
    if (!frozen.decoder) groups.emplace_back(g.decoder);
    if (!frozen.codebook) groups.emplace_back(g.codebook);
    clip_gradient_norm(groups, config_.grad_clip);

    if (!frozen.encoder) enc_opt_.step(model_.encoder.params, g.encoder);
    if (!frozen.decoder) dec_opt_.step(model_.decoder.params, g.decoder);
    if (!frozen.codebook) {
      std::vector<char> mask;
      if (!frozen_codes.empty()) {
        const std::size_t d_e = model_.codebook.dim();
        mask.assign(g.codebook.size(), 1);
        for (std::size_t k = 0; k < frozen_codes.size(); ++k)
          if (frozen_codes[k]) std::fill(mask.begin() + k * d_e, mask.begin() + (k + 1) * d_e, 0);
      }
      cb_opt_.step(model_.codebook.vectors.data(), g.codebook, mask);
    }
    return loss;
  }

  const VqModel& model() const noexcept { return model_; }
  VqModel& model() noexcept { return model_; }

 private:
  VqModel model_;
  VqTrainConfig config_;
  AdamOptimizer enc_opt_;
  AdamOptimizer dec_opt_;
  AdamOptimizer cb_opt_;
};

struct VqEpochLog {
  int epoch = 0;
  VqLoss loss;
  std::size_t empty_codes = 0;
};

struct VqTrainResult {
  VqModel model;
  std::vector<VqEpochLog> epochs;
  BalancedAssignment final_assignment;
};

namespace detail {

/// Moves each empty code onto the encoded point farthest from its current
/// code, taking that point over.
inline void reseed_empty_codes(const Matrix<double>& encoded, Codebook& codebook, std::vector<int>& labels) {
  const auto counts = code_counts(labels, codebook.k());
  std::vector<char> used(encoded.rows(), 0);
  for (std::size_t k = 0; k < codebook.k(); ++k) {
    if (counts[k] != 0) continue;
    std::size_t far = encoded.rows();
    double far_d = -1.0;
    for (std::size_t n = 0; n < encoded.rows(); ++n) {
      if (used[n]) continue;
      const double d = squared_distance(encoded.row(n), codebook.vectors.row(static_cast<std::size_t>(labels[n])));
      if (d > far_d) {
        far_d = d;
        far = n;
      }
    }
    if (far == encoded.rows()) return;
    used[far] = 1;
    std::copy(encoded.row(far).begin(), encoded.row(far).end(), codebook.vectors.row(k).begin());
    labels[far] = static_cast<int>(k);
  }
}

}  // namespace detail

/// VQ epochs: balanced reassignment against the current codebook at the start
/// of each epoch, then mini-batch updates with assignments held fixed.
/// Codes that receive no points are frozen for that epoch.
inline VqTrainResult train_vq(const Matrix<double>& points, VqModel model, const VqTrainConfig& config) {
  VqTrainResult result;
  VqTrainer trainer(std::move(model), config);
  std::mt19937_64 rng(detail::stream_seed(config.seed, 4));
  const std::size_t k = trainer.model().codebook.k();

  for (int epoch = 0; epoch < config.vq_epochs; ++epoch) {
    const Matrix<double> encoded = encode_all(trainer.model().encoder, points);
    BalancedAssignment assignment = balanced_reassign(encoded, trainer.model().codebook, config);
    if (config.reseed_empty) detail::reseed_empty_codes(encoded, trainer.model().codebook, assignment.hard);
    const auto counts = code_counts(assignment.hard, k);
    std::vector<char> frozen_codes(k, 0);
    std::size_t empty = 0;
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] == 0) {
        frozen_codes[c] = 1;
        ++empty;
      }
    if (empty) log_warn() << "EmptyCode: " << empty << " code(s) received no points in epoch " << epoch + 1 << "; frozen";

    VqEpochLog log;
    log.epoch = epoch + 1;
    log.empty_codes = empty;
    for (const auto& batch : detail::epoch_batches(points.rows(), config.batch_size, rng)) {
      const VqLoss l = trainer.step(points, assignment.hard, batch, kAllTerms, {}, frozen_codes);
      const double w = static_cast<double>(batch.size()) / static_cast<double>(points.rows());
      log.loss.reconstruction += l.reconstruction * w;
      log.loss.codebook += l.codebook * w;
      log.loss.commitment += l.commitment * w;
      log.loss.total += l.total * w;
    }
    log_debug() << "vq epoch " << log.epoch << " loss " << log.loss.total;
    result.epochs.push_back(log);
  }

  result.model = trainer.model();
  const Matrix<double> encoded = encode_all(result.model.encoder, points);
  result.final_assignment = balanced_reassign(encoded, result.model.codebook, config);
  result.model.codebook.usage_counts = code_counts(result.final_assignment.hard, k);
  return result;
}

struct QuantizedCode {
  int code_id = 0;
  std::vector<double> vector;
};

/// Nearest code to enc(z) under squared L2, lowest index on ties.
template <typename T>
QuantizedCode quantize(const MlpNetwork& encoder, const Codebook& codebook, std::span<const T> z) {
  const auto x = mlp_forward(encoder, z);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < codebook.k(); ++k) {
    const double d = squared_distance(std::span<const double>(x), codebook.vectors.row(k));
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  const auto row = codebook.vectors.row(best);
  return {static_cast<int>(best), std::vector<double>(row.begin(), row.end())};
}

/// Token-embedding initialization: alpha * e_k / ||e_k||.
inline Matrix<float> export_token_embeddings(const Codebook& codebook, double alpha) {
  Matrix<float> out(codebook.k(), codebook.dim());
  for (std::size_t k = 0; k < codebook.k(); ++k) {
    const auto e = codebook.vectors.row(k);
    const double norm = l2_norm(e);
    if (!(norm > 0.0) || !std::isfinite(norm))
      throw Error(ErrorKind::ZeroNormCode, "code " + std::to_string(k) + " has zero norm");
    for (std::size_t c = 0; c < e.size(); ++c) out(k, c) = static_cast<float>(alpha * e[c] / norm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Codebook file (CIRFCBK1)

inline constexpr std::string_view kCodebookMagic = "CIRFCBK1";

struct CodebookArtifact {
  VqModel model;
  double alpha = 0.01;
};

inline std::vector<std::uint8_t> encode_codebook_file(const CodebookArtifact& a) {
  const auto& m = a.model;
  ByteWriter w;
  w.magic(kCodebookMagic);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(m.codebook.k()));
  w.u32(static_cast<std::uint32_t>(m.codebook.dim()));
  w.u32(static_cast<std::uint32_t>(m.encoder.d_in));
  w.u32(static_cast<std::uint32_t>(m.encoder.hidden));
  w.f32(static_cast<float>(a.alpha));
  w.f32_values(std::span<const double>(m.codebook.vectors.data()));
  w.f32_values(std::span<const double>(m.encoder.params));
  w.f32_values(std::span<const double>(m.decoder.params));
  w.seal();
  return w.bytes();
}

inline CodebookArtifact decode_codebook_file(std::span<const std::uint8_t> bytes) {
  ByteReader r = open_sealed(bytes, kCodebookMagic);
  if (r.u32() != 1) throw Error(ErrorKind::BadMagic, "unsupported codebook version");
  const std::size_t k = r.u32(), d_e = r.u32(), d_s = r.u32(), h = r.u32();
  CodebookArtifact a;
  a.alpha = r.f32();
  auto& m = a.model;
  m.codebook.vectors = Matrix<double>(k, d_e);
  m.encoder = MlpNetwork(d_s, h, d_e);
  m.decoder = MlpNetwork(d_e, h, d_s);
  const std::size_t expected =
      (m.codebook.vectors.data().size() + m.encoder.params.size() + m.decoder.params.size()) * sizeof(float);
  if (r.remaining() != expected) throw Error(ErrorKind::ChecksumMismatch, "codebook payload size mismatch");
  for (auto& v : m.codebook.vectors.data()) v = r.f32();
  for (auto& v : m.encoder.params) v = r.f32();
  for (auto& v : m.decoder.params) v = r.f32();
  m.codebook.usage_counts.assign(k, 0);
  return a;
}

inline void write_codebook_file(const CodebookArtifact& a, const std::filesystem::path& path) {
  write_file_bytes(path, encode_codebook_file(a));
}

inline CodebookArtifact read_codebook_file(const std::filesystem::path& path) {
  return decode_codebook_file(read_file_bytes(path));
}

}  // namespace cirf
