#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "cirf/error.hpp"

namespace cirf {

/// Two-layer perceptron: out = W2^T tanh(W1^T x + b1) + b2.
/// Parameters live in one flat vector laid out as [W1 (d_in x h), b1, W2 (h x d_out), b2],
/// both weight matrices row-major.
struct MlpNetwork {
  std::size_t d_in = 0;
  std::size_t hidden = 0;
  std::size_t d_out = 0;
  std::vector<double> params;

  MlpNetwork() = default;
  MlpNetwork(std::size_t in, std::size_t h, std::size_t out)
      : d_in(in), hidden(h), d_out(out), params(parameter_count(in, h, out), 0.0) {}

  static std::size_t parameter_count(std::size_t in, std::size_t h, std::size_t out) {
    return in * h + h + h * out + out;
  }

  std::size_t w1_offset() const noexcept { return 0; }
  std::size_t b1_offset() const noexcept { return d_in * hidden; }
  std::size_t w2_offset() const noexcept { return b1_offset() + hidden; }
  std::size_t b2_offset() const noexcept { return w2_offset() + hidden * d_out; }

  double& w1(std::size_t i, std::size_t j) { return params[w1_offset() + i * hidden + j]; }
  double& b1(std::size_t j) { return params[b1_offset() + j]; }
  double& w2(std::size_t j, std::size_t o) { return params[w2_offset() + j * d_out + o]; }
  double& b2(std::size_t o) { return params[b2_offset() + o]; }
  double w1(std::size_t i, std::size_t j) const { return params[w1_offset() + i * hidden + j]; }
  double b1(std::size_t j) const { return params[b1_offset() + j]; }
  double w2(std::size_t j, std::size_t o) const { return params[w2_offset() + j * d_out + o]; }
  double b2(std::size_t o) const { return params[b2_offset() + o]; }

  bool operator==(const MlpNetwork&) const = default;
};

/// Glorot-uniform weights, zero biases.
inline MlpNetwork make_mlp(std::size_t in, std::size_t h, std::size_t out, std::mt19937_64& rng) {
  MlpNetwork net(in, h, out);
  const double r1 = std::sqrt(6.0 / static_cast<double>(in + h));
  const double r2 = std::sqrt(6.0 / static_cast<double>(h + out));
  std::uniform_real_distribution<double> u1(-r1, r1), u2(-r2, r2);
  for (std::size_t i = 0; i < in * h; ++i) net.params[net.w1_offset() + i] = u1(rng);
  for (std::size_t i = 0; i < h * out; ++i) net.params[net.w2_offset() + i] = u2(rng);
  return net;
}

struct MlpActivations {
  std::vector<double> hidden;  // tanh outputs
  std::vector<double> output;
};

template <typename T>
MlpActivations mlp_forward_cached(const MlpNetwork& net, std::span<const T> x) {
  if (x.size() != net.d_in)
    throw Error(ErrorKind::ShapeMismatch, "input has " + std::to_string(x.size()) + " entries, net expects " +
                                              std::to_string(net.d_in));
  MlpActivations act;
  act.hidden.resize(net.hidden);
  for (std::size_t j = 0; j < net.hidden; ++j) act.hidden[j] = net.b1(j);
  const double* w1 = net.params.data() + net.w1_offset();
  for (std::size_t i = 0; i < net.d_in; ++i) {
    const double xi = static_cast<double>(x[i]);
    const double* wrow = w1 + i * net.hidden;
    for (std::size_t j = 0; j < net.hidden; ++j) act.hidden[j] += wrow[j] * xi;
  }
  for (auto& h : act.hidden) h = std::tanh(h);

  act.output.resize(net.d_out);
  for (std::size_t o = 0; o < net.d_out; ++o) act.output[o] = net.b2(o);
  const double* w2 = net.params.data() + net.w2_offset();
  for (std::size_t j = 0; j < net.hidden; ++j) {
    const double hj = act.hidden[j];
    const double* wrow = w2 + j * net.d_out;
    for (std::size_t o = 0; o < net.d_out; ++o) act.output[o] += wrow[o] * hj;
  }
  return act;
}

template <typename T>
std::vector<double> mlp_forward(const MlpNetwork& net, std::span<const T> x) {
  return mlp_forward_cached(net, x).output;
}

/// Accumulates d(loss)/d(params) into `param_grad` and, when non-empty,
/// writes d(loss)/d(x) into `input_grad`.
template <typename T>
void mlp_backward_accumulate(const MlpNetwork& net, std::span<const T> x, const MlpActivations& act,
                             std::span<const double> output_grad, std::span<double> param_grad,
                             std::span<double> input_grad = {}) {
  if (output_grad.size() != net.d_out || param_grad.size() != net.params.size() || x.size() != net.d_in ||
      (!input_grad.empty() && input_grad.size() != net.d_in))
    throw Error(ErrorKind::ShapeMismatch, "backward shapes do not match the network");

  double* gw2 = param_grad.data() + net.w2_offset();
  double* gb2 = param_grad.data() + net.b2_offset();
  std::vector<double> pre_grad(net.hidden, 0.0);  // d/d(pre-activation)
  const double* w2 = net.params.data() + net.w2_offset();
  for (std::size_t j = 0; j < net.hidden; ++j) {
    double acc = 0.0;
    for (std::size_t o = 0; o < net.d_out; ++o) {
      gw2[j * net.d_out + o] += act.hidden[j] * output_grad[o];
      acc += w2[j * net.d_out + o] * output_grad[o];
    }
    pre_grad[j] = acc * (1.0 - act.hidden[j] * act.hidden[j]);
  }
  for (std::size_t o = 0; o < net.d_out; ++o) gb2[o] += output_grad[o];

  double* gw1 = param_grad.data() + net.w1_offset();
  double* gb1 = param_grad.data() + net.b1_offset();
  const double* w1 = net.params.data() + net.w1_offset();
  for (std::size_t i = 0; i < net.d_in; ++i) {
    const double xi = static_cast<double>(x[i]);
    double acc = 0.0;
    for (std::size_t j = 0; j < net.hidden; ++j) {
      gw1[i * net.hidden + j] += xi * pre_grad[j];
      acc += w1[i * net.hidden + j] * pre_grad[j];
    }
    if (!input_grad.empty()) input_grad[i] = acc;
  }
  for (std::size_t j = 0; j < net.hidden; ++j) gb1[j] += pre_grad[j];
}

struct MlpGradients {
  std::vector<double> params;
  std::vector<double> input;
};

template <typename T>
MlpGradients mlp_backward(const MlpNetwork& net, std::span<const T> x, std::span<const double> output_grad) {
  const auto act = mlp_forward_cached(net, x);
  MlpGradients g{std::vector<double>(net.params.size(), 0.0), std::vector<double>(net.d_in, 0.0)};
  mlp_backward_accumulate(net, x, act, output_grad, std::span<double>(g.params), std::span<double>(g.input));
  return g;
}

/// Adam with bias correction; entries whose mask byte is zero are left
/// untouched, including their moment estimates.
class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  AdamOptimizer(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grads, std::span<const char> mask = {}) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!mask.empty() && !mask[i]) continue;
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

  double learning_rate() const noexcept { return lr_; }

 private:
  double lr_ = 1e-4;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long t_ = 0;
  std::vector<double> m_;
  std::vector<double> v_;
};

/// Scales all gradient groups together so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_gradient_norm(std::span<const std::span<double>> groups, double max_norm) {
  double sq = 0.0;
  for (const auto& g : groups)
    for (const double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (const auto& g : groups)
      for (double& v : g) v *= scale;
  }
  return norm;
}

}  // namespace cirf
