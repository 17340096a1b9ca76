#pragma once

// Two-hidden-layer ReLU perceptron with a scalar pre-activation output, inverted
// dropout on the hidden layers, a batched cross-entropy gradient, and Adam.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>

#include "probcoll/common.hpp"

namespace probcoll::nn {

inline double logistic(double y) {
  if (y >= 0.0) return 1.0 / (1.0 + std::exp(-y));
  const double e = std::exp(y);
  return e / (1.0 + e);
}

/// log(1 + exp(y)) without overflow.
inline double softplus(double y) {
  return y > 0.0 ? y + std::log1p(std::exp(-y)) : std::log1p(std::exp(y));
}

struct Layer {
  Eigen::MatrixXd weight;  // rows = fan_out, cols = fan_in
  Eigen::VectorXd bias;
};

/// Parameters of input -> h1 -> h2 -> 1. Gradients and Adam moments reuse this type.
struct MlpParams {
  std::array<Layer, 3> layers;

  static MlpParams zeros(int input_dim, int hidden1, int hidden2) {
    require(input_dim >= 1 && hidden1 >= 1 && hidden2 >= 1, "MlpParams: widths must be positive");
    MlpParams p;
    const std::array<int, 4> dims{input_dim, hidden1, hidden2, 1};
    for (int k = 0; k < 3; ++k) {
      p.layers[k].weight = Eigen::MatrixXd::Zero(dims[k + 1], dims[k]);
      p.layers[k].bias = Eigen::VectorXd::Zero(dims[k + 1]);
    }
    return p;
  }

  int input_dim() const { return static_cast<int>(layers[0].weight.cols()); }
  std::array<int, 2> hidden_widths() const {
    return {static_cast<int>(layers[0].weight.rows()), static_cast<int>(layers[1].weight.rows())};
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  bool same_shape(const MlpParams& o) const {
    for (int k = 0; k < 3; ++k) {
      if (layers[k].weight.rows() != o.layers[k].weight.rows() ||
          layers[k].weight.cols() != o.layers[k].weight.cols() ||
          layers[k].bias.size() != o.layers[k].bias.size())
        return false;
    }
    return true;
  }

  /// Shape-consistency of a hand-built parameter set.
  bool well_formed() const {
    if (layers[2].weight.rows() != 1) return false;
    for (int k = 0; k < 3; ++k) {
      if (layers[k].bias.size() != layers[k].weight.rows()) return false;
      if (k > 0 && layers[k].weight.cols() != layers[k - 1].weight.rows()) return false;
    }
    return true;
  }

  friend bool operator==(const MlpParams& a, const MlpParams& b) {
    if (!a.same_shape(b)) return false;
    for (int k = 0; k < 3; ++k)
      if (a.layers[k].weight != b.layers[k].weight || a.layers[k].bias != b.layers[k].bias) return false;
    return true;
  }
};

/// Calls f on corresponding weight blocks, then bias blocks, of each layer.
template <class F, class... P>
void zip_blocks(F&& f, P&... params) {
  for (int k = 0; k < 3; ++k) {
    f(params.layers[k].weight...);
    f(params.layers[k].bias...);
  }
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)); biases zero.
inline MlpParams glorot_init(int input_dim, int hidden1, int hidden2, Rng& rng) {
  MlpParams p = MlpParams::zeros(input_dim, hidden1, hidden2);
  for (auto& layer : p.layers) {
    auto& w = layer.weight;
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = uniform(rng, -limit, limit);
  }
  return p;
}

/// Per-hidden-unit keep flags (0 or 1) for both hidden layers.
struct DropoutMask {
  std::array<Eigen::VectorXd, 2> keep;
  double keep_prob = 1.0;

  static DropoutMask all_keep(std::array<int, 2> widths) {
    return {{Eigen::VectorXd::Ones(widths[0]), Eigen::VectorXd::Ones(widths[1])}, 1.0};
  }
};

/// Draws one bit per unit. A 32-bit uniform per unit keeps mask sampling cheap on
/// the planner's hot path; keep_prob is therefore resolved to 2^-32.
inline void fill_bernoulli(Rng& rng, double keep_prob, double* out, Eigen::Index n) {
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(keep_prob, 32));
  Eigen::Index i = 0;
  for (; i + 1 < n; i += 2) {
    const std::uint64_t r = rng();
    out[i] = (r >> 32) < threshold ? 1.0 : 0.0;
    out[i + 1] = (r & 0xFFFFFFFFULL) < threshold ? 1.0 : 0.0;
  }
  if (i < n) out[i] = (rng() >> 32) < threshold ? 1.0 : 0.0;
}

inline DropoutMask sample_dropout_mask(Rng& rng, double keep_prob, std::array<int, 2> widths) {
  require(keep_prob > 0.0 && keep_prob <= 1.0, "sample_dropout_mask: keep_prob must lie in (0, 1]");
  DropoutMask m{{Eigen::VectorXd(widths[0]), Eigen::VectorXd(widths[1])}, keep_prob};
  for (auto& v : m.keep) fill_bernoulli(rng, keep_prob, v.data(), v.size());
  return m;
}

struct ForwardCache {
  Eigen::VectorXd input, z1, a1, z2, a2;  // a* are post-ReLU, post-mask, post-scaling
};

struct ForwardResult {
  double f = 0.0;
  ForwardCache cache;
};

namespace detail {

inline void check_input(const MlpParams& p, Eigen::Index rows) {
  require(p.well_formed(), "nn: malformed parameters");
  require(rows == p.input_dim(), "nn: input length does not match first layer");
}

inline void check_mask(const MlpParams& p, const DropoutMask& m) {
  const auto w = p.hidden_widths();
  require(m.keep[0].size() == w[0] && m.keep[1].size() == w[1], "nn: dropout mask shape mismatch");
  require(m.keep_prob > 0.0 && m.keep_prob <= 1.0, "nn: keep_prob must lie in (0, 1]");
}

}  // namespace detail

inline ForwardResult forward(const MlpParams& p, const Eigen::Ref<const Eigen::VectorXd>& input,
                             const DropoutMask& mask) {
  detail::check_input(p, input.size());
  detail::check_mask(p, mask);
  const double scale = 1.0 / mask.keep_prob;
  ForwardResult r;
  auto& c = r.cache;
  c.input = input;
  c.z1 = p.layers[0].weight * input + p.layers[0].bias;
  c.a1 = c.z1.cwiseMax(0.0).cwiseProduct(mask.keep[0]) * scale;
  c.z2 = p.layers[1].weight * c.a1 + p.layers[1].bias;
  c.a2 = c.z2.cwiseMax(0.0).cwiseProduct(mask.keep[1]) * scale;
  r.f = p.layers[2].weight.row(0).dot(c.a2) + p.layers[2].bias(0);
  return r;
}

/// Dropout-free pass.
inline ForwardResult forward(const MlpParams& p, const Eigen::Ref<const Eigen::VectorXd>& input) {
  return forward(p, input, DropoutMask::all_keep(p.hidden_widths()));
}

/// Masks for a whole minibatch, one column per example.
struct BatchMasks {
  Eigen::MatrixXd hidden1, hidden2;
  double keep_prob = 1.0;
};

inline BatchMasks sample_batch_masks(Rng& rng, double keep_prob, std::array<int, 2> widths, Eigen::Index n) {
  require(keep_prob > 0.0 && keep_prob <= 1.0, "sample_batch_masks: keep_prob must lie in (0, 1]");
  BatchMasks m{Eigen::MatrixXd(widths[0], n), Eigen::MatrixXd(widths[1], n), keep_prob};
  for (Eigen::Index j = 0; j < n; ++j) {
    fill_bernoulli(rng, keep_prob, m.hidden1.col(j).data(), widths[0]);
    fill_bernoulli(rng, keep_prob, m.hidden2.col(j).data(), widths[1]);
  }
  return m;
}

struct LossAndGradient {
  double loss = 0.0;
  MlpParams grad;
};

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] inside the log.
inline constexpr double kProbClamp = 1e-7;

namespace detail {

/// Pre-activation beyond which the clamp binds.
inline double clamp_logit() {
  static const double v = std::log((1.0 - kProbClamp) / kProbClamp);
  return v;
}

inline LossAndGradient loss_and_gradient_impl(const MlpParams& p, const Eigen::Ref<const Eigen::MatrixXd>& x,
                                              std::span<const double> labels, const BatchMasks* masks) {
  const Eigen::Index n = x.cols();
  require(n >= 1, "loss_and_gradient: batch must be nonempty");
  require(static_cast<Eigen::Index>(labels.size()) == n, "loss_and_gradient: one label per example");
  check_input(p, x.rows());
  for (double y : labels) require(y == 0.0 || y == 1.0, "loss_and_gradient: labels must be 0 or 1");
  const auto widths = p.hidden_widths();
  if (masks) {
    require(masks->hidden1.rows() == widths[0] && masks->hidden1.cols() == n &&
                masks->hidden2.rows() == widths[1] && masks->hidden2.cols() == n,
            "loss_and_gradient: mask shape mismatch");
    require(masks->keep_prob > 0.0 && masks->keep_prob <= 1.0, "loss_and_gradient: bad keep_prob");
  }
  const double scale = masks ? 1.0 / masks->keep_prob : 1.0;

  const Eigen::MatrixXd z1 = (p.layers[0].weight * x).colwise() + p.layers[0].bias;
  Eigen::MatrixXd a1 = z1.cwiseMax(0.0);
  if (masks) a1 = a1.cwiseProduct(masks->hidden1) * scale;
  const Eigen::MatrixXd z2 = (p.layers[1].weight * a1).colwise() + p.layers[1].bias;
  Eigen::MatrixXd a2 = z2.cwiseMax(0.0);
  if (masks) a2 = a2.cwiseProduct(masks->hidden2) * scale;
  const Eigen::RowVectorXd f = (p.layers[2].weight * a2).array() + p.layers[2].bias(0);

  const double bound = clamp_logit();
  double loss = 0.0;
  Eigen::RowVectorXd df(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double y = labels[static_cast<std::size_t>(i)];
    const double fc = std::clamp(f(i), -bound, bound);
    loss += y * softplus(-fc) + (1.0 - y) * softplus(fc);
    df(i) = std::abs(f(i)) < bound ? (logistic(f(i)) - y) / static_cast<double>(n) : 0.0;
  }

  LossAndGradient out;
  out.loss = loss / static_cast<double>(n);
  auto& g = out.grad;
  g.layers[2].weight = df * a2.transpose();
  g.layers[2].bias = Eigen::VectorXd::Constant(1, df.sum());

  Eigen::MatrixXd dz2 = p.layers[2].weight.transpose() * df;
  if (masks) dz2 = dz2.cwiseProduct(masks->hidden2) * scale;
  dz2 = dz2.cwiseProduct((z2.array() > 0.0).cast<double>().matrix());
  g.layers[1].weight = dz2 * a1.transpose();
  g.layers[1].bias = dz2.rowwise().sum();

  Eigen::MatrixXd dz1 = p.layers[1].weight.transpose() * dz2;
  if (masks) dz1 = dz1.cwiseProduct(masks->hidden1) * scale;
  dz1 = dz1.cwiseProduct((z1.array() > 0.0).cast<double>().matrix());
  g.layers[0].weight = dz1 * x.transpose();
  g.layers[0].bias = dz1.rowwise().sum();
  return out;
}

}  // namespace detail

/// Mean binary cross-entropy of logistic(f) over a batch (one input per column) and its
/// exact gradient under the given per-example masks.
inline LossAndGradient loss_and_gradient(const MlpParams& p, const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                                         std::span<const double> labels, const BatchMasks& masks) {
  return detail::loss_and_gradient_impl(p, inputs, labels, &masks);
}

inline LossAndGradient loss_and_gradient(const MlpParams& p, const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                                         std::span<const double> labels, std::span<const DropoutMask> masks) {
  require(static_cast<Eigen::Index>(masks.size()) == inputs.cols(), "loss_and_gradient: one mask per example");
  const auto widths = p.hidden_widths();
  BatchMasks packed{Eigen::MatrixXd(widths[0], inputs.cols()), Eigen::MatrixXd(widths[1], inputs.cols()),
                    masks.empty() ? 1.0 : masks[0].keep_prob};
  for (std::size_t j = 0; j < masks.size(); ++j) {
    detail::check_mask(p, masks[j]);
    require(masks[j].keep_prob == packed.keep_prob, "loss_and_gradient: masks must share keep_prob");
    packed.hidden1.col(static_cast<Eigen::Index>(j)) = masks[j].keep[0];
    packed.hidden2.col(static_cast<Eigen::Index>(j)) = masks[j].keep[1];
  }
  return detail::loss_and_gradient_impl(p, inputs, labels, &packed);
}

/// Dropout-free loss.
inline LossAndGradient loss_and_gradient(const MlpParams& p, const Eigen::Ref<const Eigen::MatrixXd>& inputs,
                                         std::span<const double> labels) {
  return detail::loss_and_gradient_impl(p, inputs, labels, nullptr);
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  MlpParams first_moment;
  MlpParams second_moment;
  std::int64_t step = 0;
  AdamConfig config;

  static AdamState fresh(const MlpParams& like, AdamConfig config = {}) {
    const auto w = like.hidden_widths();
    return {MlpParams::zeros(like.input_dim(), w[0], w[1]), MlpParams::zeros(like.input_dim(), w[0], w[1]), 0,
            config};
  }
};

/// Adam with bias correction. Updates params and state in place.
inline void adam_step(AdamState& state, MlpParams& params, const MlpParams& grads) {
  require(params.same_shape(grads) && params.same_shape(state.first_moment) &&
              params.same_shape(state.second_moment),
          "adam_step: shape mismatch");
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  zip_blocks(
      [&](auto& theta, const auto& g, auto& m, auto& v) {
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseAbs2();
        theta.array() -= c.learning_rate * (m.array() / correct1) / ((v.array() / correct2).sqrt() + c.epsilon);
      },
      params, grads, state.first_moment, state.second_moment);
}

}  // namespace probcoll::nn
