#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "calikd/matrix.hpp"

namespace calikd {

/// N x K matrix of raw, finite scores. N >= 1, K >= 2.
class LogitMatrix {
 public:
  explicit LogitMatrix(Matrix values);

  const Matrix& values() const noexcept { return values_; }
  std::size_t n() const noexcept { return values_.rows(); }
  std::size_t k() const noexcept { return values_.cols(); }
  std::span<const double> row(std::size_t i) const noexcept { return values_.row(i); }

 private:
  Matrix values_;
};

/// N x K row-stochastic matrix. Rows must already sum to one within 1e-9;
/// nothing is renormalized on construction.
class ProbMatrix {
 public:
  static constexpr double kRowSumTolerance = 1e-9;

  explicit ProbMatrix(Matrix values);

  const Matrix& values() const noexcept { return values_; }
  std::size_t n() const noexcept { return values_.rows(); }
  std::size_t k() const noexcept { return values_.cols(); }
  std::span<const double> row(std::size_t i) const noexcept { return values_.row(i); }
  double operator()(std::size_t i, std::size_t j) const noexcept { return values_(i, j); }

 private:
  Matrix values_;
};

/// Integer class labels. Range against K is checked when paired with a matrix.
class LabelVec {
 public:
  LabelVec() = default;
  explicit LabelVec(std::vector<std::size_t> labels) : labels_(std::move(labels)) {}

  std::size_t size() const noexcept { return labels_.size(); }
  std::size_t operator[](std::size_t i) const noexcept { return labels_[i]; }
  std::span<const std::size_t> values() const noexcept { return labels_; }

  LabelVec gather(std::span<const std::size_t> indices) const;

  /// Throws ShapeError unless size() == n and every label is < k.
  void check_against(std::size_t n, std::size_t k) const;

  bool operator==(const LabelVec&) const = default;

 private:
  std::vector<std::size_t> labels_;
};

/// Positive, finite softmax temperature.
class Temperature {
 public:
  explicit Temperature(double t);
  double value() const noexcept { return t_; }

 private:
  double t_;
};

/// exp(z_ij / t) / sum_l exp(z_il / t), with per-row max subtraction.
ProbMatrix tempered_softmax(const LogitMatrix& logits, Temperature t = Temperature{1.0});

/// Entrywise log of tempered_softmax, via log-sum-exp.
Matrix log_tempered_softmax(const LogitMatrix& logits, Temperature t = Temperature{1.0});

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> row) noexcept;
std::vector<std::size_t> argmax_rows(const Matrix& m);

double accuracy(const ProbMatrix& probs, const LabelVec& labels);

namespace detail {

// Unchecked row kernels shared by the losses and the training loop.
void softmax_row(std::span<const double> z, double inv_t, std::span<double> out) noexcept;
void log_softmax_row(std::span<const double> z, double inv_t, std::span<double> out) noexcept;

}  // namespace detail

}  // namespace calikd
