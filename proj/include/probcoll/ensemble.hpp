#pragma once

// Bootstrap ensemble of dropout networks: resampled training, pooled mean/std of
// the pre-activation over models x dropout passes, and the estimators built on it.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "probcoll/common.hpp"
#include "probcoll/nn.hpp"

namespace probcoll {

struct PredictionStats {
  double mean = 0.0;
  double std = 0.0;
  std::size_t sample_count = 0;
};

/// Collision probability with uncertainty inflation: logistic(mean + lambda_std * std).
inline double risk_averse_prob(const PredictionStats& stats, double lambda_std) {
  require(lambda_std >= 0.0, "risk_averse_prob: lambda_std must be non-negative");
  return nn::logistic(stats.mean + lambda_std * stats.std);
}

/// Conservative baseline: the std term replaced by a constant shift.
inline double const_penalty_prob(const PredictionStats& stats, double lambda_const) {
  require(lambda_const >= 0.0, "const_penalty_prob: lambda_const must be non-negative");
  return nn::logistic(stats.mean + lambda_const);
}

/// n draws with replacement from [0, n).
inline std::vector<std::size_t> bootstrap_indices(std::size_t n, Rng& rng) {
  require(n >= 1, "resample: dataset must be nonempty");
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = uniform_index(rng, n);
  return idx;
}

template <class T>
std::vector<T> resample(std::span<const T> data, Rng& rng) {
  const auto idx = bootstrap_indices(data.size(), rng);
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

struct EnsembleConfig {
  int bootstraps = 50;
  double keep_prob = 0.8;  // 1 - dropout ratio
  int eval_passes = 10;    // dropout passes per model per query
  int hidden_width = 40;
  nn::AdamConfig adam{};
  int batch_size = 32;
  bool warm_start = true;
};

enum class EnsembleStatus { untrained, random_prior, trained };

/// Inputs stored one example per column.
struct TrainingSet {
  Eigen::MatrixXd inputs;
  std::vector<double> labels;

  std::size_t size() const { return labels.size(); }
};

/// Mean minibatch loss of each model over the first and last windows of a training round.
struct TrainReport {
  std::vector<double> early_loss;
  std::vector<double> late_loss;
};

class BootstrapEnsemble;
TrainReport train(BootstrapEnsemble&, const TrainingSet&, int, Rng&);
void save_checkpoint(std::ostream&, const BootstrapEnsemble&, std::int64_t);
BootstrapEnsemble load_checkpoint(std::istream&, std::int64_t* iteration = nullptr);

class BootstrapEnsemble {
 public:
  BootstrapEnsemble() = default;

  /// Randomly initialized models; predictions are refused until training or
  /// accept_random_prior().
  BootstrapEnsemble(int input_dim, EnsembleConfig config, std::uint64_t init_seed)
      : config_(config), input_dim_(input_dim), init_seed_(init_seed) {
    require(config.bootstraps >= 1, "BootstrapEnsemble: need at least one bootstrap");
    require(config.keep_prob > 0.0 && config.keep_prob <= 1.0, "BootstrapEnsemble: keep_prob must lie in (0, 1]");
    require(config.eval_passes >= 1, "BootstrapEnsemble: eval_passes must be >= 1");
    require(config.batch_size >= 1, "BootstrapEnsemble: batch_size must be >= 1");
    models_.reserve(static_cast<std::size_t>(config.bootstraps));
    optimizers_.reserve(static_cast<std::size_t>(config.bootstraps));
    for (int b = 0; b < config.bootstraps; ++b) reinitialize(static_cast<std::size_t>(b), 0);
  }

  const EnsembleConfig& config() const { return config_; }
  int input_dim() const { return input_dim_; }
  std::size_t size() const { return models_.size(); }
  EnsembleStatus status() const { return status_; }
  int rounds_trained() const { return rounds_; }
  bool ready() const { return status_ != EnsembleStatus::untrained; }

  /// Allows querying the randomly initialized networks before any data exists.
  void accept_random_prior() {
    if (status_ == EnsembleStatus::untrained) status_ = EnsembleStatus::random_prior;
  }

  const std::vector<nn::MlpParams>& models() const { return models_; }
  const std::vector<nn::AdamState>& optimizers() const { return optimizers_; }

  /// Direct parameter replacement (tests, checkpoint restore). Marks the ensemble trained.
  void set_models(std::vector<nn::MlpParams> models) {
    require(!models.empty(), "set_models: need at least one model");
    for (const auto& m : models)
      require(m.well_formed() && m.same_shape(models.front()), "set_models: inconsistent architectures");
    input_dim_ = models.front().input_dim();
    config_.bootstraps = static_cast<int>(models.size());
    config_.hidden_width = models.front().hidden_widths()[0];
    optimizers_.clear();
    for (const auto& m : models) optimizers_.push_back(nn::AdamState::fresh(m, config_.adam));
    models_ = std::move(models);
    status_ = EnsembleStatus::trained;
  }

  void set_eval_passes(int passes) {
    require(passes >= 1, "set_eval_passes: must be >= 1");
    config_.eval_passes = passes;
  }

 private:
  friend TrainReport train(BootstrapEnsemble&, const TrainingSet&, int, Rng&);
  friend void save_checkpoint(std::ostream&, const BootstrapEnsemble&, std::int64_t);
  friend BootstrapEnsemble load_checkpoint(std::istream&, std::int64_t*);

  void reinitialize(std::size_t b, std::uint64_t generation) {
    Rng rng = make_rng(init_seed_, {b, generation});
    auto params = nn::glorot_init(input_dim_, config_.hidden_width, config_.hidden_width, rng);
    auto opt = nn::AdamState::fresh(params, config_.adam);
    if (b < models_.size()) {
      models_[b] = std::move(params);
      optimizers_[b] = std::move(opt);
    } else {
      models_.push_back(std::move(params));
      optimizers_.push_back(std::move(opt));
    }
  }

  EnsembleConfig config_{};
  int input_dim_ = 0;
  std::uint64_t init_seed_ = 0;
  std::vector<nn::MlpParams> models_;
  std::vector<nn::AdamState> optimizers_;
  EnsembleStatus status_ = EnsembleStatus::untrained;
  int rounds_ = 0;
};

/// One round of bootstrap-and-dropout training over all models. Each model b
/// draws its own resample of the data and its own minibatches and masks from a
/// substream seeded by (rng draw, b), so models never share mutable state.
inline TrainReport train(BootstrapEnsemble& ens, const TrainingSet& data, int sgd_iters, Rng& rng) {
  require(data.size() >= 1, "train: dataset must be nonempty");
  require(data.inputs.cols() == static_cast<Eigen::Index>(data.size()), "train: one input column per label");
  require(data.inputs.rows() == ens.input_dim_, "train: input dimension mismatch");
  require(sgd_iters >= 1, "train: sgd_iters must be >= 1");
  require(!ens.models_.empty(), "train: ensemble not initialized");

  const std::uint64_t round_seed = rng();
  const auto& cfg = ens.config_;
  const auto n = data.size();
  const auto batch = static_cast<Eigen::Index>(cfg.batch_size);
  const int window = std::max(1, sgd_iters / 10);

  TrainReport report;
  report.early_loss.assign(ens.models_.size(), 0.0);
  report.late_loss.assign(ens.models_.size(), 0.0);

  Eigen::MatrixXd x(data.inputs.rows(), batch);
  std::vector<double> y(static_cast<std::size_t>(batch));
  for (std::size_t b = 0; b < ens.models_.size(); ++b) {
    Rng model_rng = make_rng(round_seed, {b});
    if (!cfg.warm_start) ens.reinitialize(b, static_cast<std::uint64_t>(ens.rounds_) + 1);
    const auto sample = bootstrap_indices(n, model_rng);
    auto& params = ens.models_[b];
    auto& opt = ens.optimizers_[b];
    for (int it = 0; it < sgd_iters; ++it) {
      for (Eigen::Index j = 0; j < batch; ++j) {
        const auto i = sample[uniform_index(model_rng, n)];
        x.col(j) = data.inputs.col(static_cast<Eigen::Index>(i));
        y[static_cast<std::size_t>(j)] = data.labels[i];
      }
      const auto masks = nn::sample_batch_masks(model_rng, cfg.keep_prob, params.hidden_widths(), batch);
      const auto lg = nn::loss_and_gradient(params, x, y, masks);
      if (it < window) report.early_loss[b] += lg.loss / window;
      if (it >= sgd_iters - window) report.late_loss[b] += lg.loss / window;
      nn::adam_step(opt, params, lg.grad);
    }
  }
  ++ens.rounds_;
  ens.status_ = EnsembleStatus::trained;
  return report;
}

/// Query with the input split as [varying ; shared]. The shared block's first-layer
/// contribution is computed once per model, so scoring many control sequences
/// against one observation costs one small product per candidate.
class EnsembleQuery {
 public:
  EnsembleQuery(const BootstrapEnsemble& ens, const Eigen::Ref<const Eigen::VectorXd>& shared) : ens_(&ens) {
    require(ens.ready(), "predict_stats: ensemble has not been trained");
    require(shared.size() <= ens.input_dim(), "predict_stats: shared block larger than input");
    varying_dim_ = ens.input_dim() - shared.size();
    shared_pre_.reserve(ens.size());
    for (const auto& m : ens.models()) {
      const auto& w = m.layers[0].weight;
      shared_pre_.push_back(w.rightCols(shared.size()) * shared + m.layers[0].bias);
    }
  }

  Eigen::Index varying_dim() const { return varying_dim_; }

  PredictionStats stats(const Eigen::Ref<const Eigen::VectorXd>& varying, Rng& rng) const {
    require(varying.size() == varying_dim_, "predict_stats: input dimension mismatch");
    const auto& cfg = ens_->config();
    const double keep = cfg.keep_prob;
    const double scale = 1.0 / keep;
    const int passes = cfg.eval_passes;
    // Welford keeps std exactly zero when every sample is identical.
    double mean = 0.0, m2 = 0.0;
    std::size_t count = 0;
    const auto widths = ens_->models().front().hidden_widths();
    Eigen::VectorXd mask1(widths[0]), mask2(widths[1]), a1(widths[0]), a2(widths[1]);
    for (std::size_t b = 0; b < ens_->size(); ++b) {
      const auto& m = ens_->models()[b];
      const Eigen::VectorXd h1 = (shared_pre_[b] + m.layers[0].weight.leftCols(varying_dim_) * varying).cwiseMax(0.0);
      for (int d = 0; d < passes; ++d) {
        nn::fill_bernoulli(rng, keep, mask1.data(), mask1.size());
        nn::fill_bernoulli(rng, keep, mask2.data(), mask2.size());
        a1 = h1.cwiseProduct(mask1) * scale;
        a2 = ((m.layers[1].weight * a1 + m.layers[1].bias).cwiseMax(0.0)).cwiseProduct(mask2) * scale;
        const double f = m.layers[2].weight.row(0).dot(a2) + m.layers[2].bias(0);
        ++count;
        const double delta = f - mean;
        mean += delta / static_cast<double>(count);
        m2 += delta * (f - mean);
      }
    }
    return {mean, std::sqrt(std::max(0.0, m2 / static_cast<double>(count))), count};
  }

 private:
  const BootstrapEnsemble* ens_;
  Eigen::Index varying_dim_ = 0;
  std::vector<Eigen::VectorXd> shared_pre_;
};

/// Pooled sample mean and population std of f over models x dropout passes.
inline PredictionStats predict_stats(const BootstrapEnsemble& ens, const Eigen::Ref<const Eigen::VectorXd>& input,
                                     Rng& rng) {
  require(input.size() == ens.input_dim(), "predict_stats: input dimension mismatch");
  return EnsembleQuery(ens, Eigen::VectorXd()).stats(input, rng);
}

// ---------------------------------------------------------------------------
// Checkpoint container (text, version 1). Reals are written as C99 hex floats so
// a reload is bit-exact:
//
//   probcoll-ensemble 1
//   input_dim <n> hidden <h>
//   bootstraps <B> keep_prob <p> eval_passes <D> batch_size <m> warm_start <0|1>
//   adam <lr> <beta1> <beta2> <eps>
//   init_seed <u64> status <0|1|2> rounds <r> iteration <i>
//   model <b> step <t>
//   params <values...>
//   first_moment <values...>
//   second_moment <values...>
//   ... (one model block per bootstrap)
//   end
//
// Parameter values are listed layer by layer, weight column-major then bias.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline void write_params(std::ostream& os, const char* tag, const nn::MlpParams& p) {
  os << tag;
  nn::zip_blocks(
      [&](const auto& block) {
        for (Eigen::Index i = 0; i < block.size(); ++i) os << ' ' << hexfloat(block.data()[i]);
      },
      p);
  os << '\n';
}

inline std::string next_token(std::istream& is) {
  std::string t;
  if (!(is >> t)) throw std::runtime_error("checkpoint: unexpected end of file");
  return t;
}

inline void expect(std::istream& is, const char* word) {
  const auto t = next_token(is);
  if (t != word) throw std::runtime_error("checkpoint: expected '" + std::string(word) + "', got '" + t + "'");
}

inline double read_real(std::istream& is) {
  const auto t = next_token(is);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end == t.c_str() || *end != '\0') throw std::runtime_error("checkpoint: bad number '" + t + "'");
  return v;
}

inline std::int64_t read_int(std::istream& is) {
  const auto t = next_token(is);
  char* end = nullptr;
  const long long v = std::strtoll(t.c_str(), &end, 10);
  if (end == t.c_str() || *end != '\0') throw std::runtime_error("checkpoint: bad integer '" + t + "'");
  return v;
}

inline void read_params(std::istream& is, const char* tag, nn::MlpParams& p) {
  expect(is, tag);
  nn::zip_blocks(
      [&](auto& block) {
        for (Eigen::Index i = 0; i < block.size(); ++i) block.data()[i] = read_real(is);
      },
      p);
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const BootstrapEnsemble& ens, std::int64_t iteration) {
  const auto& c = ens.config_;
  using detail::hexfloat;
  os << "probcoll-ensemble 1\n";
  os << "input_dim " << ens.input_dim_ << " hidden " << c.hidden_width << '\n';
  os << "bootstraps " << ens.models_.size() << " keep_prob " << hexfloat(c.keep_prob) << " eval_passes "
     << c.eval_passes << " batch_size " << c.batch_size << " warm_start " << (c.warm_start ? 1 : 0) << '\n';
  os << "adam " << hexfloat(c.adam.learning_rate) << ' ' << hexfloat(c.adam.beta1) << ' '
     << hexfloat(c.adam.beta2) << ' ' << hexfloat(c.adam.epsilon) << '\n';
  os << "init_seed " << ens.init_seed_ << " status " << static_cast<int>(ens.status_) << " rounds " << ens.rounds_
     << " iteration " << iteration << '\n';
  for (std::size_t b = 0; b < ens.models_.size(); ++b) {
    os << "model " << b << " step " << ens.optimizers_[b].step << '\n';
    detail::write_params(os, "params", ens.models_[b]);
    detail::write_params(os, "first_moment", ens.optimizers_[b].first_moment);
    detail::write_params(os, "second_moment", ens.optimizers_[b].second_moment);
  }
  os << "end\n";
}

/// Restores an ensemble written by save_checkpoint; the stored iteration counter is
/// returned through `iteration` when non-null.
inline BootstrapEnsemble load_checkpoint(std::istream& is, std::int64_t* iteration) {
  using namespace detail;
  expect(is, "probcoll-ensemble");
  if (read_int(is) != 1) throw std::runtime_error("checkpoint: unsupported version");
  BootstrapEnsemble ens;
  auto& c = ens.config_;
  expect(is, "input_dim");
  ens.input_dim_ = static_cast<int>(read_int(is));
  expect(is, "hidden");
  c.hidden_width = static_cast<int>(read_int(is));
  expect(is, "bootstraps");
  c.bootstraps = static_cast<int>(read_int(is));
  expect(is, "keep_prob");
  c.keep_prob = read_real(is);
  expect(is, "eval_passes");
  c.eval_passes = static_cast<int>(read_int(is));
  expect(is, "batch_size");
  c.batch_size = static_cast<int>(read_int(is));
  expect(is, "warm_start");
  c.warm_start = read_int(is) != 0;
  expect(is, "adam");
  c.adam.learning_rate = read_real(is);
  c.adam.beta1 = read_real(is);
  c.adam.beta2 = read_real(is);
  c.adam.epsilon = read_real(is);
  expect(is, "init_seed");
  ens.init_seed_ = std::stoull(next_token(is));
  expect(is, "status");
  const auto status = read_int(is);
  if (status < 0 || status > 2) throw std::runtime_error("checkpoint: bad status");
  ens.status_ = static_cast<EnsembleStatus>(status);
  expect(is, "rounds");
  ens.rounds_ = static_cast<int>(read_int(is));
  expect(is, "iteration");
  const auto iter = read_int(is);
  if (ens.input_dim_ < 1 || c.hidden_width < 1 || c.bootstraps < 1 || !(c.keep_prob > 0.0 && c.keep_prob <= 1.0))
    throw std::runtime_error("checkpoint: invalid header values");
  for (int b = 0; b < c.bootstraps; ++b) {
    expect(is, "model");
    if (read_int(is) != b) throw std::runtime_error("checkpoint: model blocks out of order");
    expect(is, "step");
    auto params = nn::MlpParams::zeros(ens.input_dim_, c.hidden_width, c.hidden_width);
    auto opt = nn::AdamState::fresh(params, c.adam);
    opt.step = read_int(is);
    read_params(is, "params", params);
    read_params(is, "first_moment", opt.first_moment);
    read_params(is, "second_moment", opt.second_moment);
    ens.models_.push_back(std::move(params));
    ens.optimizers_.push_back(std::move(opt));
  }
  expect(is, "end");
  if (iteration) *iteration = iter;
  return ens;
}

}  // namespace probcoll
