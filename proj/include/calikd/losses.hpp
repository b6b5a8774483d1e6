#pragma once

#include <cstddef>
#include <span>

#include "calikd/matrix.hpp"

namespace calikd {

/// A batch-mean loss and its gradient with respect to the logits.
struct LogitLoss {
  double loss = 0.0;
  Matrix grad;
};

/// Mean -log softmax(z)[y].
LogitLoss hard_ce_loss(const Matrix& logits, std::span<const std::size_t> labels);

/// Mean -sum_j s_j log softmax(z)_j for row-stochastic targets s.
LogitLoss soft_ce_loss(const Matrix& logits, const Matrix& targets);

struct KdTerms {
  double ce = 0.0;
  double kd = 0.0;
};

/// (1 - lambda) * CE(y, softmax(z)) + lambda * s * KL(p || softmax(z / t_kd)),
/// where `teacher_probs` is p (already tempered on the teacher side) and
/// s = t_kd^2 when `scale_by_t_squared`, else 1.
LogitLoss kd_composite_loss(const Matrix& student_logits, const Matrix& teacher_probs,
                            std::span<const std::size_t> labels, double lambda, double t_kd,
                            bool scale_by_t_squared, KdTerms* terms = nullptr);

}  // namespace calikd
