#pragma once

#include <cstddef>

#include "calikd/calib_metrics.hpp"
#include "calikd/calibrators.hpp"
#include "calikd/kd_config.hpp"
#include "calikd/nn_engine.hpp"
#include "calikd/prob_core.hpp"

namespace calikd {

struct KdLossValue {
  double loss = 0.0;
  double ce = 0.0;
  double kd = 0.0;
};

/// loss = (1 - lambda) * CE(y, softmax(s)) + lambda * [t_kd^2] * KL(p || softmax(s / t_kd)),
/// with p = softmax(teacher / (t_cal * t_kd)).
KdLossValue kd_loss(const LogitMatrix& student_logits, const LogitMatrix& teacher_logits,
                    const LabelVec& labels, const KdConfig& cfg);

/// Teacher output written as (1 - k) * p_cal + k * onehot(y).
struct DecompositionSpec {
  double k_over = 0.0;
  ProbMatrix p_cal;
  LabelVec labels;
};

struct LossDecomposition {
  /// (1 - lambda) CE(y, q) + lambda CE(p, q)
  double direct = 0.0;
  /// (1 - lambda + lambda k) CE(y, q) + lambda (1 - k) CE(p_cal, q)
  double decomposed = 0.0;
  Matrix grad_direct;
  Matrix grad_decomposed;
  /// -lambda * mean H(p): the KL form of the loss equals direct + kl_constant.
  double kl_constant = 0.0;
  double kl_form = 0.0;
  double one_hot_coefficient = 0.0;
  double kd_coefficient = 0.0;
};

/// Evaluates the distillation loss at unit temperature both directly and in
/// its one-hot/KD split. Gradients are with respect to the student logits.
LossDecomposition decompose_loss(const LogitMatrix& student_logits, const DecompositionSpec& spec,
                                 double lambda);

/// KdConfig as seen by the training loop once a calibrator is chosen: the
/// calibrator's temperature replaces t_cal (1 when there is none or it is
/// vector scaling).
KdConfig effective_kd_config(const Calibrator* calibrator, KdConfig cfg);

/// Teacher soft targets for every dataset row: softmax of the (calibrated)
/// teacher logits at t_cal * t_kd.
Matrix teacher_soft_targets(const MlpModel& teacher, const Calibrator* calibrator,
                            const Matrix& features, const KdConfig& cfg);

struct DistillResult {
  MlpModel student;
  TrainLog log;
  CalibrationReport test_report;
};

/// Trains `student_init` against the frozen teacher. The calibrator, if any,
/// must already be fitted on the validation split.
DistillResult distill_student(const MlpModel& student_init, const MlpModel& teacher,
                              const Calibrator* calibrator, const Dataset& data,
                              const TrainConfig& train_cfg, const KdConfig& kd_cfg,
                              std::size_t m_bins = kDefaultEceBins,
                              std::size_t r_bins = kDefaultAceBins);

/// Test-split report of a trained model.
CalibrationReport evaluate_model(const MlpModel& model, const Dataset& data, Split split,
                                 std::size_t m_bins = kDefaultEceBins,
                                 std::size_t r_bins = kDefaultAceBins);

}  // namespace calikd
