#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "calikd/calib_metrics.hpp"
#include "calikd/calibrators.hpp"
#include "calikd/io.hpp"
#include "calikd/kd_config.hpp"
#include "calikd/nn_engine.hpp"

namespace calikd {

struct SyntheticSpec {
  std::size_t n_train = 5000;
  std::size_t n_val = 1000;
  std::size_t n_test = 2000;
  std::size_t d = 32;
  std::size_t k = 10;
  double class_separation = 3.2;
  double label_noise = 0.0;
  std::uint64_t seed = 2024;

  void validate() const;
};

/// K unit-covariance Gaussian clusters whose means sit at pairwise distance
/// `class_separation` (orthonormal directions when d >= k). Rows are ordered
/// train, val, test; label noise touches the train rows only.
Dataset gen_dataset(const SyntheticSpec& spec);

/// Architecture and recipe of one trained model (teacher or student).
struct ModelSpec {
  std::string id;
  std::vector<std::size_t> hidden;
  TrainConfig train;
  std::uint64_t init_seed = 0;

  std::vector<std::size_t> layer_dims(std::size_t d, std::size_t k) const;
};

struct TrainedModel {
  ModelSpec spec;
  MlpModel model;
  CalibrationReport test_report;
  double final_val_accuracy = 0.0;
  /// Set when training failed; the run continues without this model.
  std::optional<std::string> error;
};

struct EvalOptions {
  std::size_t m_bins = kDefaultEceBins;
  std::size_t r_bins = kDefaultAceBins;
  /// 0 means: CALIKD_THREADS, else the hardware concurrency.
  std::size_t threads = 0;
};

std::size_t resolve_threads(std::size_t requested);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
/// written to per-index slots; exceptions propagate after all workers join.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

TrainedModel train_model(const Dataset& data, const ModelSpec& spec, const EvalOptions& opts);

std::vector<TrainedModel> run_teacher_zoo(const Dataset& data, const std::vector<ModelSpec>& zoo,
                                          const EvalOptions& opts);

/// The fixed student; per-record seeds override the init and shuffle seeds.
struct StudentSpec {
  std::vector<std::size_t> hidden{24};
  TrainConfig train;
};

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept;

struct ExperimentRecord {
  std::string teacher_id;
  std::string calibrator;
  std::uint64_t seed = 0;
  /// Teacher as the student sees it: after the calibrator, on the test split.
  CalibrationReport teacher;
  CalibrationReport student;
  double wall_time = 0.0;
  /// Not serialized into records.csv.
  MlpModel student_model;
};

/// One distillation cell. `calibrator_label` is used verbatim in the record.
ExperimentRecord run_kd_cell(const Dataset& data, const TrainedModel& teacher,
                             const std::optional<Calibrator>& calibrator,
                             const std::string& calibrator_label, const StudentSpec& student,
                             const KdConfig& kd, std::uint64_t seed, const EvalOptions& opts);

struct CorrelationStudy {
  std::vector<ExperimentRecord> records;
  /// Per-teacher series (mean student accuracy over seeds).
  std::vector<std::string> teacher_ids;
  std::vector<double> teacher_accuracy;
  std::vector<double> teacher_ace;
  std::vector<double> student_accuracy;
  std::optional<double> r2_acc;
  std::optional<double> r2_ace;
  std::optional<double> spearman_ace;
  std::optional<double> spearman_acc;
  std::vector<std::string> notes;
};

CorrelationStudy run_correlation_study(const Dataset& data, const std::vector<TrainedModel>& zoo,
                                       const StudentSpec& student, const KdConfig& kd,
                                       const std::vector<std::uint64_t>& seeds,
                                       const EvalOptions& opts);

struct AblationRow {
  double t_cal = 1.0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::vector<double> accuracies;
  double mean_student_ece_over = 0.0;
  double teacher_ece_over = 0.0;
  double teacher_ece_under = 0.0;
};

std::vector<AblationRow> run_temperature_ablation(const Dataset& data, const TrainedModel& teacher,
                                                  const StudentSpec& student,
                                                  const KdConfig& kd_base,
                                                  const std::vector<double>& t_cal_grid,
                                                  const std::vector<std::uint64_t>& seeds,
                                                  const EvalOptions& opts);

inline const std::vector<std::string>& known_calibrators() {
  static const std::vector<std::string> names{"none", "fixed-T", "fitted-T", "vector-scaling",
                                              "mixup-teacher"};
  return names;
}

struct CalibratorComparisonOptions {
  std::vector<std::string> calibrators = known_calibrators();
  double mixup_alpha = 0.4;
  VectorScalingOptions vector_scaling;
  TemperatureSearch temperature_search;
  /// Seed of the data split the calibrators are fitted on, recorded in fit metadata.
  std::uint64_t split_seed = 0;
};

/// One record per (teacher, calibrator, seed). Calibrators are fitted on the
/// validation split; the mixup variant retrains the teacher with mixup.
std::vector<ExperimentRecord> run_calibrator_comparison(
    const Dataset& data, const std::vector<TrainedModel>& teachers, const StudentSpec& student,
    const KdConfig& kd, const std::vector<std::uint64_t>& seeds, const EvalOptions& opts,
    const CalibratorComparisonOptions& cal_opts = {});

/// Teacher/student property table comparing uncalibrated and fixed-T KD.
struct PropertyRow {
  std::string teacher_id;
  CalibrationReport teacher_plain;
  CalibrationReport teacher_calibrated;
  /// Student metrics averaged over seeds.
  CalibrationReport student_plain;
  CalibrationReport student_calibrated;
  double teacher_ece_over_ratio = 0.0;
};

std::vector<PropertyRow> property_table(const std::vector<ExperimentRecord>& records,
                                        const std::string& calibrated_label);

// ---------------------------------------------------------------------------
// Manifest-driven runs.

struct AblationSpec {
  std::string teacher_id;
  std::vector<double> t_cal_grid{1.0, 1.5, 2.0, 3.0};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct Manifest {
  SyntheticSpec dataset;
  std::vector<ModelSpec> zoo;
  StudentSpec student;
  KdConfig kd;
  std::vector<std::uint64_t> seeds{1, 2};
  AblationSpec ablation;
  std::vector<std::string> calibrators = known_calibrators();
  /// Teachers used by the calibrator comparison; empty means the whole zoo.
  std::vector<std::string> calibrator_teachers;
  double mixup_alpha = 0.4;
  std::size_t m_bins = kDefaultEceBins;
  std::size_t r_bins = kDefaultAceBins;

  void validate() const;
};

Manifest default_manifest();
Manifest manifest_from_json(const Json& j);
Json to_json(const Manifest& m);

struct Stages {
  bool correlation = true;
  bool ablation = true;
  bool calibrators = true;
};

struct RunSummary {
  std::vector<TrainedModel> zoo;
  std::optional<CorrelationStudy> correlation;
  std::vector<AblationRow> ablation;
  std::vector<ExperimentRecord> calibrator_records;
  std::vector<PropertyRow> properties;
  Json summary;
};

/// Trains the zoo and runs the selected stages, writing records.csv,
/// calibrators.csv, ablation.csv, summary.json, timings.json and
/// checkpoints/ under `out_dir`. Progress lines go to `log` when given.
RunSummary run_manifest(const Manifest& manifest, const std::filesystem::path& out_dir,
                        Stages stages, std::ostream* log = nullptr);

std::string records_csv(const std::vector<ExperimentRecord>& records);
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string student_checkpoint_name(const ExperimentRecord& record);

void write_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace calikd
