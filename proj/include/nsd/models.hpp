#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nsd/numerics.hpp"
#include "nsd/schedule.hpp"

namespace nsd {

/// Diagonal-covariance Gaussian mixture in R^d.
class GaussianMixture {
 public:
  GaussianMixture(SimplexRow weights, std::vector<Vec> means,
                  std::vector<Vec> variances);

  /// Equal-weight mixture with isotropic variance `variance`.
  static GaussianMixture isotropic(std::vector<Vec> means, double variance);

  std::size_t dim() const { return means_.front().size(); }
  std::size_t components() const { return means_.size(); }
  const SimplexRow& weights() const { return weights_; }
  const std::vector<Vec>& means() const { return means_; }
  const std::vector<Vec>& variances() const { return variances_; }

  /// log density of the mixture after forward corruption at level beta:
  /// component k becomes N(sqrt(1 - beta) mu_k, (1 - beta) var_k + beta).
  double log_density(std::span<const double> x, double beta) const;
  /// Gradient of log_density with respect to x.
  Vec score(std::span<const double> x, double beta) const;

  Vec sample(SeededRng& rng) const;

 private:
  SimplexRow weights_;
  std::vector<Vec> means_;
  std::vector<Vec> variances_;
};

/// Estimator of grad_x log p_t(x) at reverse step t.
class ScoreModel {
 public:
  virtual ~ScoreModel() = default;
  virtual std::size_t dim() const = 0;
  virtual Vec score(std::span<const double> x, int t) const = 0;
};

/// Closed-form score of a Gaussian mixture smoothed by the schedule's
/// forward corruption.
class GmmScoreModel final : public ScoreModel {
 public:
  GmmScoreModel(GaussianMixture mixture, NoiseSchedule schedule)
      : mixture_(std::move(mixture)), schedule_(schedule) {}

  std::size_t dim() const override { return mixture_.dim(); }
  Vec score(std::span<const double> x, int t) const override;

  const GaussianMixture& mixture() const { return mixture_; }
  const NoiseSchedule& schedule() const { return schedule_; }

 private:
  GaussianMixture mixture_;
  NoiseSchedule schedule_;
};

/// gmm_score: exact score of the smoothed mixture at step t.
Vec gmm_score(const GaussianMixture& mixture, const NoiseSchedule& schedule,
              std::span<const double> x, int t);

struct TrainConfig {
  double learning_rate = 2e-3;
  int epochs = 200;
  int batch_size = 64;
  std::uint64_t seed = 0;
  std::vector<int> hidden = {64, 64};
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One denoising-score-matching example: x_t = sqrt(1-beta) x0 + sqrt(beta) eps.
struct NoisyExample {
  Vec noisy;
  double beta;
  Vec noise;
};

/// Fully connected tanh network that predicts the noise added at level
/// beta. Input is [x, beta]; the score is -eps_hat / sqrt(beta).
class DenoiserMlp final : public ScoreModel {
 public:
  DenoiserMlp(std::size_t dim, std::vector<int> hidden, NoiseSchedule schedule,
              std::uint64_t init_seed);

  std::size_t dim() const override { return dim_; }
  Vec score(std::span<const double> x, int t) const override;
  Vec predict_noise(std::span<const double> x, double beta) const;

  /// Mean over the batch of ||eps_hat - eps||^2 / dim. If `grad` is
  /// non-empty it receives d loss / d params.
  double loss(std::span<const NoisyExample> batch, std::span<double> grad) const;

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  const std::vector<int>& layer_sizes() const { return sizes_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  /// Per-epoch mean training loss recorded by train_denoiser.
  const std::vector<double>& loss_history() const { return loss_history_; }
  void set_loss_history(std::vector<double> h) { loss_history_ = std::move(h); }

  /// Checkpoint I/O (format documented in README): versioned header line,
  /// then one tensor per line as `name rank dims... values...`.
  void save(std::ostream& out) const;
  static DenoiserMlp load(std::istream& in);

 private:
  struct Layer {
    int in;
    int out;
    std::size_t weight_offset;
    std::size_t bias_offset;
  };

  DenoiserMlp(std::size_t dim, std::vector<int> sizes, NoiseSchedule schedule);
  void build_layers();
  // Forward pass; activations[l] holds the input of layer l.
  Vec forward(std::span<const double> input,
              std::vector<Vec>* activations) const;

  std::size_t dim_;
  std::vector<int> sizes_;
  NoiseSchedule schedule_;
  std::vector<Layer> layers_;
  Vec params_;
  std::vector<double> loss_history_;
};

/// Denoising score matching with Adam. Each epoch visits every data point
/// once, drawing a fresh step t and noise for it. Throws TrainingDiverged on a
/// non-finite loss and std::invalid_argument on bad input.
DenoiserMlp train_denoiser(std::span<const Vec> data,
                           const NoiseSchedule& schedule,
                           const TrainConfig& cfg);

}  // namespace nsd
