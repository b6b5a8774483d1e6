#include "calikd/losses.hpp"

#include <cmath>
#include <vector>

#include "calikd/error.hpp"
#include "calikd/prob_core.hpp"

namespace calikd {
namespace {

void check_rows(const Matrix& logits, std::size_t n) {
  if (logits.rows() != n) throw Error(ErrorKind::ShapeError, "loss target rows do not match logits");
  if (logits.rows() == 0) throw Error(ErrorKind::ShapeError, "empty batch");
}

}  // namespace

LogitLoss hard_ce_loss(const Matrix& logits, std::span<const std::size_t> labels) {
  check_rows(logits, labels.size());
  const std::size_t k = logits.cols();
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  LogitLoss out{0.0, Matrix(logits.rows(), k)};
  std::vector<double> logp(k);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (labels[i] >= k) throw Error(ErrorKind::ShapeError, "label out of range");
    detail::log_softmax_row(logits.row(i), 1.0, logp);
    out.loss -= logp[labels[i]];
    auto g = out.grad.row(i);
    for (std::size_t j = 0; j < k; ++j) g[j] = std::exp(logp[j]) * inv_n;
    g[labels[i]] -= inv_n;
  }
  out.loss *= inv_n;
  return out;
}

LogitLoss soft_ce_loss(const Matrix& logits, const Matrix& targets) {
  check_rows(logits, targets.rows());
  if (targets.cols() != logits.cols()) throw Error(ErrorKind::ShapeError, "target width mismatch");
  const std::size_t k = logits.cols();
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  LogitLoss out{0.0, Matrix(logits.rows(), k)};
  std::vector<double> logp(k);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    detail::log_softmax_row(logits.row(i), 1.0, logp);
    auto s = targets.row(i);
    auto g = out.grad.row(i);
    double mass = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out.loss -= s[j] * logp[j];
      mass += s[j];
    }
    for (std::size_t j = 0; j < k; ++j) g[j] = (mass * std::exp(logp[j]) - s[j]) * inv_n;
  }
  out.loss *= inv_n;
  return out;
}

LogitLoss kd_composite_loss(const Matrix& student_logits, const Matrix& teacher_probs,
                            std::span<const std::size_t> labels, double lambda, double t_kd,
                            bool scale_by_t_squared, KdTerms* terms) {
  check_rows(student_logits, labels.size());
  check_rows(student_logits, teacher_probs.rows());
  if (teacher_probs.cols() != student_logits.cols()) {
    throw Error(ErrorKind::ShapeError, "teacher and student class counts differ");
  }
  const std::size_t k = student_logits.cols();
  const double inv_n = 1.0 / static_cast<double>(student_logits.rows());
  const double inv_t = 1.0 / t_kd;
  const double scale = scale_by_t_squared ? t_kd * t_kd : 1.0;

  LogitLoss out{0.0, Matrix(student_logits.rows(), k)};
  std::vector<double> logp1(k), logpt(k);
  double ce = 0.0, kd = 0.0;
  for (std::size_t i = 0; i < student_logits.rows(); ++i) {
    if (labels[i] >= k) throw Error(ErrorKind::ShapeError, "label out of range");
    auto z = student_logits.row(i);
    auto p = teacher_probs.row(i);
    detail::log_softmax_row(z, 1.0, logp1);
    detail::log_softmax_row(z, inv_t, logpt);
    ce -= logp1[labels[i]];
    for (std::size_t j = 0; j < k; ++j) {
      if (p[j] > 0.0) kd += p[j] * (std::log(p[j]) - logpt[j]);
    }
    // d/dz of KL(p || softmax(z/t)) is (softmax(z/t) - p) / t.
    auto g = out.grad.row(i);
    for (std::size_t j = 0; j < k; ++j) {
      g[j] = ((1.0 - lambda) * std::exp(logp1[j]) +
              lambda * scale * inv_t * (std::exp(logpt[j]) - p[j])) *
             inv_n;
    }
    g[labels[i]] -= (1.0 - lambda) * inv_n;
  }
  ce *= inv_n;
  kd *= inv_n * scale;
  out.loss = (1.0 - lambda) * ce + lambda * kd;
  if (terms != nullptr) *terms = {ce, kd};
  return out;
}

}  // namespace calikd
