#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "calikd/calib_metrics.hpp"
#include "calikd/error.hpp"
#include "calikd/kd_config.hpp"
#include "calikd/matrix.hpp"
#include "calikd/prob_core.hpp"

namespace calikd {

/// Dense ReLU network. weights[l] is dims[l] x dims[l+1] and maps a row
/// vector x to x * W + b; the last layer has no activation.
struct MlpModel {
  std::vector<std::size_t> layer_dims;
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;

  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t num_classes() const { return layer_dims.back(); }
  std::size_t num_parameters() const;

  /// Throws InvalidConfig when shapes disagree or a parameter is non-finite.
  void validate() const;

  bool operator==(const MlpModel&) const = default;
};

/// Parameter-shaped gradient buffer.
struct Gradients {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;

  static Gradients zeros_like(const MlpModel& model);
};

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double lr0 = 0.1;
  std::vector<std::size_t> lr_decay_epochs{35, 50};
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-5;
  std::uint64_t seed = 0;
  double mixup_alpha = 0.0;

  void validate() const;
  double learning_rate(std::size_t epoch) const;

  bool operator==(const TrainConfig&) const = default;
};

enum class Split : std::uint8_t { Train, Val, Test };

std::string_view to_string(Split split) noexcept;

struct Dataset {
  Matrix features;
  LabelVec labels;
  std::vector<Split> splits;
  /// Labels before any training-label noise; empty when unknown.
  std::vector<std::size_t> clean_labels;

  std::size_t size() const noexcept { return features.rows(); }
  std::vector<std::size_t> indices(Split split) const;
  Matrix features_of(Split split) const;
  LabelVec labels_of(Split split) const;
  /// Largest label + 1, at least 2.
  std::size_t num_classes() const;

  void validate(std::size_t num_classes) const;
};

MlpModel init_model(const std::vector<std::size_t>& layer_dims, std::uint64_t seed);

LogitMatrix forward(const MlpModel& model, const Matrix& features);

struct HardCE {};
struct SoftCE {
  ProbMatrix targets;
};
struct KdComposite {
  LogitMatrix teacher_logits;
  KdConfig cfg;
};
using LossSpec = std::variant<HardCE, SoftCE, KdComposite>;

struct LossAndGrads {
  double loss = 0.0;
  Gradients grads;
};

/// Batch-mean loss plus 0.5 * weight_decay * ||theta||^2, with exact gradients.
LossAndGrads loss_and_grads(const MlpModel& model, const Matrix& features, const LabelVec& labels,
                            const LossSpec& spec, double weight_decay = 0.0);

/// Training objectives bound to whole-dataset rows (indexed like Dataset).
struct HardLabelObjective {};
struct SoftTargetObjective {
  Matrix targets;
};
struct DistillObjective {
  /// Teacher probabilities already tempered at t_cal * t_kd, one row per dataset row.
  Matrix teacher_probs;
  double lambda = 0.9;
  double t_kd = 4.0;
  bool scale_kd_by_t_squared = true;
};
using TrainObjective = std::variant<HardLabelObjective, SoftTargetObjective, DistillObjective>;

struct TrainLog {
  std::vector<double> train_loss;
  std::vector<double> val_accuracy;
  std::optional<CalibrationReport> test_report;
};

struct TrainResult {
  MlpModel model;
  TrainLog log;
};

/// Thrown when a loss or gradient goes non-finite; keeps the last finite model.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, MlpModel last_finite, TrainLog log)
      : Error(ErrorKind::NumericalError, what),
        last_finite_(std::move(last_finite)),
        log_(std::move(log)) {}

  const MlpModel& last_finite() const noexcept { return last_finite_; }
  const TrainLog& log() const noexcept { return log_; }

 private:
  MlpModel last_finite_;
  TrainLog log_;
};

/// SGD with momentum (v <- mu * v + g; theta <- theta - lr * v), per-epoch
/// seeded shuffling, step LR decay and optional mixup. Trains on the Train
/// split and logs accuracy on the Val split.
TrainResult train(const MlpModel& init, const Dataset& data, const TrainConfig& config,
                  const TrainObjective& objective = HardLabelObjective{});

struct MixupResult {
  Matrix features;
  Matrix soft_labels;
};

/// Convex combination of each row with a partner row:
/// x_i' = lam * x_i + (1 - lam) * x_partner(i), likewise for the labels.
MixupResult mixup_combine(const Matrix& features, const Matrix& soft_labels, double lam,
                          std::span<const std::size_t> partners);

/// Draws lam ~ Beta(alpha, alpha) and uniform partners, then mixes.
MixupResult mixup_batch(const Matrix& features, const Matrix& labels_onehot, double alpha,
                        std::mt19937_64& rng);

Matrix one_hot(std::span<const std::size_t> labels, std::size_t k);

}  // namespace calikd
