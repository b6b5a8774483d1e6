#include "calikd/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "calikd/error.hpp"

namespace calikd {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

double parse_double(const std::string& cell, const std::filesystem::path& path, std::size_t line) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  while (pos < cell.size() && std::isspace(static_cast<unsigned char>(cell[pos]))) ++pos;
  if (pos == 0 || pos != cell.size()) {
    throw Error(ErrorKind::IoError, path.string() + ":" + std::to_string(line) +
                                        ": not a number: '" + cell + "'");
  }
  return v;
}

Json fit_json(const FitMetadata& m) {
  Json j;
  j["nll_before"] = m.nll_before;
  j["nll_after"] = m.nll_after;
  j["split_seed"] = m.split_seed;
  j["warnings"] = m.warnings;
  return j;
}

FitMetadata fit_from_json(const Json& j) {
  FitMetadata m;
  if (j.is_null()) return m;
  m.nll_before = j.value("nll_before", 0.0);
  m.nll_after = j.value("nll_after", 0.0);
  m.split_seed = j.value("split_seed", std::uint64_t{0});
  if (j.contains("warnings")) m.warnings = j.at("warnings").get<std::vector<std::string>>();
  return m;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw Error(ErrorKind::IoError, "could not format number");
  return std::string(buf, ptr);
}

Matrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<double> data;
  std::size_t rows = 0, cols = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (rows == 0) cols = cells.size();
    if (cells.size() != cols) {
      throw Error(ErrorKind::IoError, path.string() + ":" + std::to_string(line_no) +
                                          ": expected " + std::to_string(cols) + " columns");
    }
    for (const auto& c : cells) data.push_back(parse_double(c, path, line_no));
    ++rows;
  }
  if (rows == 0) throw Error(ErrorKind::IoError, path.string() + " is empty");
  return Matrix(rows, cols, std::move(data));
}

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m) {
  std::string out;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j > 0) out += ',';
      out += format_double(row[j]);
    }
    out += '\n';
  }
  write_text(path, out);
}

LabelVec read_labels_csv(const std::filesystem::path& path) {
  const Matrix m = read_matrix_csv(path);
  if (m.cols() != 1) throw Error(ErrorKind::IoError, path.string() + ": labels need a single column");
  std::vector<std::size_t> labels;
  labels.reserve(m.rows());
  for (double v : m.data()) {
    if (v < 0.0 || v != std::floor(v)) {
      throw Error(ErrorKind::IoError, path.string() + ": labels must be non-negative integers");
    }
    labels.push_back(static_cast<std::size_t>(v));
  }
  return LabelVec(std::move(labels));
}

void write_labels_csv(const std::filesystem::path& path, const LabelVec& labels) {
  std::string out;
  for (auto v : labels.values()) {
    out += std::to_string(v);
    out += '\n';
  }
  write_text(path, out);
}

Json read_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::IoError, path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json to_json(const CalibrationReport& r) {
  Json j;
  j["ece"] = r.ece;
  j["ece_over"] = r.ece_over;
  j["ece_under"] = r.ece_under;
  j["ace"] = r.ace;
  j["accuracy"] = r.accuracy;
  j["nll"] = r.nll;
  j["n"] = r.n;
  j["k"] = r.k;
  j["m_bins"] = r.m_bins;
  j["r_bins"] = r.r_bins;
  return j;
}

CalibrationReport report_from_json(const Json& j) {
  CalibrationReport r;
  r.ece = j.at("ece").get<double>();
  r.ece_over = j.at("ece_over").get<double>();
  r.ece_under = j.at("ece_under").get<double>();
  r.ace = j.at("ace").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.nll = j.at("nll").get<double>();
  r.n = j.at("n").get<std::size_t>();
  r.k = j.at("k").get<std::size_t>();
  r.m_bins = j.at("m_bins").get<std::size_t>();
  r.r_bins = j.at("r_bins").get<std::size_t>();
  return r;
}

Json to_json(const Calibrator& c) {
  Json j;
  j["kind"] = c.kind_name();
  std::visit(overloaded{
                 [&](const FixedTemperature& f) {
                   j["t"] = f.t;
                   j["fit_metadata"] = nullptr;
                 },
                 [&](const FittedTemperature& f) {
                   j["t"] = f.t;
                   j["fit_metadata"] = fit_json(f.fit);
                 },
                 [&](const VectorScaling& v) {
                   j["w"] = v.w;
                   j["b"] = v.b;
                   j["fit_metadata"] = fit_json(v.fit);
                 },
             },
             c.kind());
  return j;
}

Calibrator calibrator_from_json(const Json& j) {
  try {
    const auto kind = j.at("kind").get<std::string>();
    const Json meta = j.contains("fit_metadata") ? j.at("fit_metadata") : Json();
    if (kind == "FixedTemperature") return Calibrator(FixedTemperature{j.at("t").get<double>()});
    if (kind == "FittedTemperature") {
      return Calibrator(FittedTemperature{j.at("t").get<double>(), fit_from_json(meta)});
    }
    if (kind == "VectorScaling") {
      return Calibrator(VectorScaling{j.at("w").get<std::vector<double>>(),
                                      j.at("b").get<std::vector<double>>(), fit_from_json(meta)});
    }
    throw Error(ErrorKind::InvalidInput, "unknown calibrator kind '" + kind + "'");
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::InvalidInput, std::string("malformed calibrator: ") + e.what());
  }
}

Json to_json(const KdConfig& c) {
  Json j;
  j["lambda"] = c.lambda;
  j["t_kd"] = c.t_kd;
  j["t_cal"] = c.t_cal;
  j["scale_kd_by_t_squared"] = c.scale_kd_by_t_squared;
  return j;
}

KdConfig kd_config_from_json(const Json& j) {
  KdConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.t_kd = j.value("t_kd", c.t_kd);
  c.t_cal = j.value("t_cal", c.t_cal);
  c.scale_kd_by_t_squared = j.value("scale_kd_by_t_squared", c.scale_kd_by_t_squared);
  c.validate();
  return c;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr0"] = c.lr0;
  j["lr_decay_epochs"] = c.lr_decay_epochs;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["seed"] = c.seed;
  j["mixup_alpha"] = c.mixup_alpha;
  return j;
}

TrainConfig train_config_from_json(const Json& j, const TrainConfig& defaults) {
  TrainConfig c = defaults;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr0 = j.value("lr0", c.lr0);
    if (j.contains("lr_decay_epochs")) {
      c.lr_decay_epochs = j.at("lr_decay_epochs").get<std::vector<std::size_t>>();
    }
    c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.mixup_alpha = j.value("mixup_alpha", c.mixup_alpha);
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

Json checkpoint_json(const MlpModel& model, const TrainConfig& config, std::uint64_t init_seed,
                     double final_val_accuracy) {
  Json j;
  j["layer_dims"] = model.layer_dims;
  Json weights = Json::array();
  for (const auto& w : model.weights) weights.push_back(w.to_rows());
  j["weights"] = std::move(weights);
  j["biases"] = model.biases;
  j["activation"] = "relu";
  j["train_config"] = to_json(config);
  j["seed"] = init_seed;
  j["final_val_accuracy"] = final_val_accuracy;
  return j;
}

MlpModel model_from_checkpoint(const Json& j) {
  MlpModel model;
  try {
    model.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
    for (const auto& w : j.at("weights")) {
      model.weights.push_back(Matrix::from_rows(w.get<std::vector<std::vector<double>>>()));
    }
    model.biases = j.at("biases").get<std::vector<std::vector<double>>>();
    if (j.value("activation", std::string("relu")) != "relu") {
      throw Error(ErrorKind::InvalidInput, "only relu checkpoints are supported");
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::InvalidInput, std::string("malformed checkpoint: ") + e.what());
  }
  model.validate();
  return model;
}

}  // namespace calikd
