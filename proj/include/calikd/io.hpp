#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "calikd/calib_metrics.hpp"
#include "calikd/calibrators.hpp"
#include "calikd/kd_config.hpp"
#include "calikd/matrix.hpp"
#include "calikd/nn_engine.hpp"
#include "calikd/prob_core.hpp"

namespace calikd {

using Json = nlohmann::ordered_json;

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

// Headerless numeric CSV: one sample per row.
Matrix read_matrix_csv(const std::filesystem::path& path);
void write_matrix_csv(const std::filesystem::path& path, const Matrix& m);
LabelVec read_labels_csv(const std::filesystem::path& path);
void write_labels_csv(const std::filesystem::path& path, const LabelVec& labels);

Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& j);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

Json to_json(const CalibrationReport& r);
CalibrationReport report_from_json(const Json& j);

Json to_json(const Calibrator& c);
Calibrator calibrator_from_json(const Json& j);

Json to_json(const KdConfig& c);
KdConfig kd_config_from_json(const Json& j);

Json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const Json& j, const TrainConfig& defaults = {});

/// Checkpoint: layer_dims, weights (row-major nested arrays), biases,
/// activation, train_config, seed, final_val_accuracy.
Json checkpoint_json(const MlpModel& model, const TrainConfig& config, std::uint64_t init_seed,
                     double final_val_accuracy);
MlpModel model_from_checkpoint(const Json& j);

}  // namespace calikd
