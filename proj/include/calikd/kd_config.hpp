#pragma once

namespace calikd {

/// Knobs of calibrated distillation. The student sees only t_kd; the teacher
/// is softened by t_cal * t_kd.
struct KdConfig {
  double lambda = 0.9;
  double t_kd = 4.0;
  double t_cal = 1.5;
  bool scale_kd_by_t_squared = true;

  /// Throws InvalidConfig / InvalidTemperature.
  void validate() const;

  bool operator==(const KdConfig&) const = default;
};

}  // namespace calikd
