#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "calikd/prob_core.hpp"

namespace calikd {

inline constexpr double kDefaultCalibrationTemperature = 1.5;

struct FitMetadata {
  double nll_before = 0.0;
  double nll_after = 0.0;
  std::uint64_t split_seed = 0;
  std::vector<std::string> warnings;

  bool operator==(const FitMetadata&) const = default;
};

struct FixedTemperature {
  double t = kDefaultCalibrationTemperature;
  bool operator==(const FixedTemperature&) const = default;
};

struct FittedTemperature {
  double t = 1.0;
  FitMetadata fit;
  bool operator==(const FittedTemperature&) const = default;
};

struct VectorScaling {
  std::vector<double> w;
  std::vector<double> b;
  FitMetadata fit;
  bool operator==(const VectorScaling&) const = default;
};

/// Post-hoc calibrator for a frozen model's logits.
class Calibrator {
 public:
  using Kind = std::variant<FixedTemperature, FittedTemperature, VectorScaling>;

  explicit Calibrator(Kind kind);

  static Calibrator fixed(double t) { return Calibrator(FixedTemperature{t}); }
  static Calibrator identity_vector(std::size_t k);

  const Kind& kind() const noexcept { return kind_; }
  std::string kind_name() const;
  /// Short human-readable label, e.g. "fixed-T(1.5)".
  std::string describe() const;

  /// Temperature for the temperature kinds, 1 for vector scaling.
  double temperature() const noexcept;

  /// Logits after the calibrator's affine map (unchanged for the temperature kinds).
  LogitMatrix transform_logits(const LogitMatrix& logits) const;

  ProbMatrix apply(const LogitMatrix& logits) const;

  bool operator==(const Calibrator&) const = default;

 private:
  Kind kind_;
};

struct TemperatureSearch {
  double lo = 0.05;
  double hi = 10.0;
  double tol = 1e-4;
};

struct VectorScalingOptions {
  std::size_t steps = 2000;
  double lr = 0.05;
};

/// Mean negative log-likelihood of tempered_softmax(logits, t) (no clamping).
double temperature_nll(const LogitMatrix& logits, const LabelVec& labels, double t);

Calibrator fit_temperature(const LogitMatrix& logits, const LabelVec& labels,
                           TemperatureSearch search = {}, std::uint64_t split_seed = 0);

Calibrator fit_vector_scaling(const LogitMatrix& logits, const LabelVec& labels,
                              VectorScalingOptions options = {}, std::uint64_t split_seed = 0);

}  // namespace calikd
