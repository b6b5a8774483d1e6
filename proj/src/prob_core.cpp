#include "calikd/prob_core.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "calikd/error.hpp"

namespace calikd {

LogitMatrix::LogitMatrix(Matrix values) : values_(std::move(values)) {
  if (values_.rows() < 1 || values_.cols() < 2) {
    throw Error(ErrorKind::ShapeError, "logit matrix needs N >= 1 rows and K >= 2 columns");
  }
  if (!values_.all_finite()) {
    throw Error(ErrorKind::InvalidInput, "logit matrix contains a non-finite entry");
  }
}

ProbMatrix::ProbMatrix(Matrix values) : values_(std::move(values)) {
  if (values_.rows() < 1 || values_.cols() < 2) {
    throw Error(ErrorKind::ShapeError, "probability matrix needs N >= 1 rows and K >= 2 columns");
  }
  for (std::size_t i = 0; i < values_.rows(); ++i) {
    double sum = 0.0;
    for (double v : values_.row(i)) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw Error(ErrorKind::InvalidInput,
                    "probability entry outside [0,1] in row " + std::to_string(i));
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > kRowSumTolerance) {
      throw Error(ErrorKind::InvalidInput,
                  "probability row " + std::to_string(i) + " does not sum to 1");
    }
  }
}

LabelVec LabelVec::gather(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels_[i]);
  return LabelVec(std::move(out));
}

void LabelVec::check_against(std::size_t n, std::size_t k) const {
  if (labels_.size() != n) {
    throw Error(ErrorKind::ShapeError, "label count " + std::to_string(labels_.size()) +
                                           " does not match " + std::to_string(n) + " rows");
  }
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] >= k) {
      throw Error(ErrorKind::ShapeError, "label " + std::to_string(labels_[i]) + " at row " +
                                             std::to_string(i) + " is not below K=" +
                                             std::to_string(k));
    }
  }
}

Temperature::Temperature(double t) : t_(t) {
  if (!(std::isfinite(t) && t > 0.0)) {
    throw Error(ErrorKind::InvalidTemperature, "temperature must be positive and finite");
  }
}

namespace detail {

void softmax_row(std::span<const double> z, double inv_t, std::span<double> out) noexcept {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    out[j] = std::exp((z[j] - mx) * inv_t);
    sum += out[j];
  }
  const double inv_sum = 1.0 / sum;
  for (auto& v : out) v *= inv_sum;
}

void log_softmax_row(std::span<const double> z, double inv_t, std::span<double> out) noexcept {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    out[j] = (z[j] - mx) * inv_t;
    sum += std::exp(out[j]);
  }
  const double lse = std::log(sum);
  for (auto& v : out) v -= lse;
}

}  // namespace detail

ProbMatrix tempered_softmax(const LogitMatrix& logits, Temperature t) {
  Matrix out(logits.n(), logits.k());
  const double inv_t = 1.0 / t.value();
  for (std::size_t i = 0; i < logits.n(); ++i) detail::softmax_row(logits.row(i), inv_t, out.row(i));
  return ProbMatrix(std::move(out));
}

Matrix log_tempered_softmax(const LogitMatrix& logits, Temperature t) {
  Matrix out(logits.n(), logits.k());
  const double inv_t = 1.0 / t.value();
  for (std::size_t i = 0; i < logits.n(); ++i) {
    detail::log_softmax_row(logits.row(i), inv_t, out.row(i));
  }
  return out;
}

std::size_t argmax(std::span<const double> row) noexcept {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

std::vector<std::size_t> argmax_rows(const Matrix& m) {
  std::vector<std::size_t> out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = argmax(m.row(i));
  return out;
}

double accuracy(const ProbMatrix& probs, const LabelVec& labels) {
  labels.check_against(probs.n(), probs.k());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < probs.n(); ++i) {
    if (argmax(probs.row(i)) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(probs.n());
}

}  // namespace calikd
