#include "calikd/distill.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "calikd/error.hpp"
#include "calikd/losses.hpp"

namespace calikd {

void KdConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "lambda must lie in [0,1]");
  }
  (void)Temperature{t_kd};
  (void)Temperature{t_cal};
}

KdLossValue kd_loss(const LogitMatrix& student_logits, const LogitMatrix& teacher_logits,
                    const LabelVec& labels, const KdConfig& cfg) {
  cfg.validate();
  if (student_logits.n() != teacher_logits.n() || student_logits.k() != teacher_logits.k()) {
    throw Error(ErrorKind::ShapeError, "student and teacher logits differ in shape");
  }
  labels.check_against(student_logits.n(), student_logits.k());
  const auto p = tempered_softmax(teacher_logits, Temperature{cfg.t_cal * cfg.t_kd});
  KdTerms terms;
  const auto ll = kd_composite_loss(student_logits.values(), p.values(), labels.values(), cfg.lambda,
                                    cfg.t_kd, cfg.scale_kd_by_t_squared, &terms);
  if (!std::isfinite(ll.loss)) throw Error(ErrorKind::NumericalError, "non-finite distillation loss");
  return {ll.loss, terms.ce, terms.kd};
}

LossDecomposition decompose_loss(const LogitMatrix& student_logits, const DecompositionSpec& spec,
                                 double lambda) {
  if (!(spec.k_over >= 0.0 && spec.k_over <= 1.0)) {
    throw Error(ErrorKind::InvalidInput, "overconfidence intensity k must lie in [0,1]");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error(ErrorKind::InvalidInput, "lambda must lie in [0,1]");
  const std::size_t n = student_logits.n();
  const std::size_t k = student_logits.k();
  if (spec.p_cal.n() != n || spec.p_cal.k() != k) {
    throw Error(ErrorKind::ShapeError, "p_cal shape does not match the student logits");
  }
  spec.labels.check_against(n, k);

  const double kk = spec.k_over;
  Matrix composed(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      composed(i, j) = (1.0 - kk) * spec.p_cal(i, j) + (spec.labels[i] == j ? kk : 0.0);
    }
  }
  const ProbMatrix p(std::move(composed));
  const Matrix onehot = one_hot(spec.labels.values(), k);

  const auto ce_y = soft_ce_loss(student_logits.values(), onehot);
  const auto ce_p = soft_ce_loss(student_logits.values(), p.values());
  const auto ce_cal = soft_ce_loss(student_logits.values(), spec.p_cal.values());

  LossDecomposition out;
  out.one_hot_coefficient = 1.0 - lambda + lambda * kk;
  out.kd_coefficient = lambda * (1.0 - kk);
  out.direct = (1.0 - lambda) * ce_y.loss + lambda * ce_p.loss;
  out.decomposed = out.one_hot_coefficient * ce_y.loss + out.kd_coefficient * ce_cal.loss;
  out.grad_direct = Matrix(n, k);
  out.grad_decomposed = Matrix(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      out.grad_direct(i, j) = (1.0 - lambda) * ce_y.grad(i, j) + lambda * ce_p.grad(i, j);
      out.grad_decomposed(i, j) =
          out.one_hot_coefficient * ce_y.grad(i, j) + out.kd_coefficient * ce_cal.grad(i, j);
    }
  }

  double entropy = 0.0;
  for (double v : p.values().data()) {
    if (v > 0.0) entropy -= v * std::log(v);
  }
  entropy /= static_cast<double>(n);
  out.kl_constant = -lambda * entropy;
  out.kl_form = (1.0 - lambda) * ce_y.loss + lambda * (ce_p.loss - entropy);
  return out;
}

KdConfig effective_kd_config(const Calibrator* calibrator, KdConfig cfg) {
  cfg.t_cal = calibrator != nullptr ? calibrator->temperature() : 1.0;
  cfg.validate();
  return cfg;
}

Matrix teacher_soft_targets(const MlpModel& teacher, const Calibrator* calibrator,
                            const Matrix& features, const KdConfig& cfg) {
  LogitMatrix logits = forward(teacher, features);
  if (calibrator != nullptr) logits = calibrator->transform_logits(logits);
  return tempered_softmax(logits, Temperature{cfg.t_cal * cfg.t_kd}).values();
}

CalibrationReport evaluate_model(const MlpModel& model, const Dataset& data, Split split,
                                 std::size_t m_bins, std::size_t r_bins) {
  const auto rows = data.indices(split);
  if (rows.empty()) {
    throw Error(ErrorKind::InvalidInput, "dataset has no rows in split " + std::string(to_string(split)));
  }
  const auto probs = tempered_softmax(forward(model, data.features.gather_rows(rows)));
  return full_report(probs, data.labels.gather(rows), m_bins, r_bins);
}

DistillResult distill_student(const MlpModel& student_init, const MlpModel& teacher,
                              const Calibrator* calibrator, const Dataset& data,
                              const TrainConfig& train_cfg, const KdConfig& kd_cfg,
                              std::size_t m_bins, std::size_t r_bins) {
  teacher.validate();
  if (teacher.num_classes() != student_init.num_classes()) {
    throw Error(ErrorKind::ShapeError, "teacher and student class counts differ");
  }
  const KdConfig cfg = effective_kd_config(calibrator, kd_cfg);
  DistillObjective objective;
  objective.teacher_probs = teacher_soft_targets(teacher, calibrator, data.features, cfg);
  objective.lambda = cfg.lambda;
  objective.t_kd = cfg.t_kd;
  objective.scale_kd_by_t_squared = cfg.scale_kd_by_t_squared;

  auto trained = train(student_init, data, train_cfg, objective);
  DistillResult out{std::move(trained.model), std::move(trained.log), {}};
  out.test_report = evaluate_model(out.student, data, Split::Test, m_bins, r_bins);
  out.log.test_report = out.test_report;
  return out;
}

}  // namespace calikd
