#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "calikd/error.hpp"
#include "calikd/harness.hpp"
#include "calikd/io.hpp"
#include "helpers.hpp"

using namespace calikd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("calikd_io_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an exception");
  return ErrorKind::InvalidInput;
}

}  // namespace

TEST_CASE("format_double round-trips") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double v = g(rng) * std::pow(10.0, (i % 40) - 20);
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1.0) == "1");
}

TEST_CASE("matrix and label csv round-trip") {
  TempDir dir("csv");
  std::mt19937_64 rng(2);
  const Matrix m = testing::random_matrix(rng, 17, 5, 10.0);
  write_matrix_csv(dir.path / "m.csv", m);
  CHECK(read_matrix_csv(dir.path / "m.csv") == m);

  const LabelVec y(testing::random_labels(rng, 17, 5));
  write_labels_csv(dir.path / "y.csv", y);
  CHECK(read_labels_csv(dir.path / "y.csv") == y);
}

TEST_CASE("malformed csv is rejected") {
  TempDir dir("bad");
  write_text(dir.path / "ragged.csv", "1,2\n3\n");
  CHECK(kind_of([&] { read_matrix_csv(dir.path / "ragged.csv"); }) == ErrorKind::IoError);
  write_text(dir.path / "word.csv", "1,x\n");
  CHECK(kind_of([&] { read_matrix_csv(dir.path / "word.csv"); }) == ErrorKind::IoError);
  write_text(dir.path / "empty.csv", "");
  CHECK(kind_of([&] { read_matrix_csv(dir.path / "empty.csv"); }) == ErrorKind::IoError);
  write_text(dir.path / "frac.csv", "0\n1.5\n");
  CHECK(kind_of([&] { read_labels_csv(dir.path / "frac.csv"); }) == ErrorKind::IoError);
  write_text(dir.path / "neg.csv", "-1\n");
  CHECK(kind_of([&] { read_labels_csv(dir.path / "neg.csv"); }) == ErrorKind::IoError);
  CHECK(kind_of([&] { read_matrix_csv(dir.path / "missing.csv"); }) == ErrorKind::IoError);
}

TEST_CASE("report json has exactly the report keys") {
  CalibrationReport r;
  r.ece = 0.1, r.ece_over = 0.07, r.ece_under = 0.03, r.ace = 0.05, r.accuracy = 0.8, r.nll = 0.6;
  r.n = 100, r.k = 10, r.m_bins = 15, r.r_bins = 15;
  const Json j = to_json(r);
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  CHECK(keys == std::vector<std::string>{"ece", "ece_over", "ece_under", "ace", "accuracy", "nll", "n",
                                         "k", "m_bins", "r_bins"});
  CHECK(report_from_json(j) == r);
  CHECK(report_from_json(Json::parse(j.dump())) == r);
}

TEST_CASE("calibrator json round-trip") {
  const Calibrator fixed = Calibrator::fixed(1.5);
  CHECK(calibrator_from_json(to_json(fixed)) == fixed);
  CHECK(to_json(fixed)["kind"] == "FixedTemperature");
  CHECK(to_json(fixed)["fit_metadata"].is_null());

  const Calibrator fitted(FittedTemperature{2.25, {1.2, 0.9, 7, {"FitWarning: x"}}});
  CHECK(calibrator_from_json(Json::parse(to_json(fitted).dump())) == fitted);

  const Calibrator vs(VectorScaling{{1.1, 0.9, 1.0}, {0.3, -0.2, 0.0}, {0.8, 0.7, 3, {}}});
  const Json j = to_json(vs);
  CHECK(j["w"].size() == 3);
  CHECK(calibrator_from_json(Json::parse(j.dump())) == vs);

  CHECK(kind_of([] { calibrator_from_json(Json{{"kind", "Platt"}}); }) == ErrorKind::InvalidInput);
  CHECK(kind_of([] { calibrator_from_json(Json{{"kind", "FixedTemperature"}}); }) == ErrorKind::InvalidInput);
}

TEST_CASE("config json round-trip") {
  KdConfig kd;
  kd.lambda = 0.3, kd.t_kd = 2.0, kd.t_cal = 1.25, kd.scale_kd_by_t_squared = false;
  CHECK(kd_config_from_json(to_json(kd)) == kd);

  TrainConfig tc;
  tc.epochs = 7, tc.lr_decay_epochs = {3, 5}, tc.weight_decay = 0.0, tc.seed = 99, tc.mixup_alpha = 0.4;
  CHECK(train_config_from_json(Json::parse(to_json(tc).dump())) == tc);
}

TEST_CASE("checkpoint round-trip") {
  const MlpModel model = init_model({6, 5, 4, 3}, 17);
  TrainConfig tc;
  tc.seed = 3;
  const Json j = checkpoint_json(model, tc, 17, 0.75);
  for (const char* key : {"layer_dims", "weights", "biases", "activation", "train_config", "seed",
                          "final_val_accuracy"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["activation"] == "relu");
  CHECK(model_from_checkpoint(Json::parse(j.dump())) == model);

  Json broken = j;
  broken["weights"][0][0].erase(0);
  CHECK_THROWS_AS(model_from_checkpoint(broken), Error);
}

TEST_CASE("manifest json round-trip") {
  const Manifest m = default_manifest();
  const Json j = to_json(m);
  const Manifest back = manifest_from_json(Json::parse(j.dump()));
  CHECK(to_json(back) == j);
  CHECK(back.zoo.size() == m.zoo.size());
  CHECK(back.kd == m.kd);

  const Json shipped = read_json(fs::path(CALIKD_SOURCE_DIR) / "configs" / "default.json");
  CHECK(shipped == j);

  Json bad = j;
  bad["zoo"][1]["id"] = bad["zoo"][0]["id"];
  CHECK(kind_of([&] { manifest_from_json(bad).validate(); }) == ErrorKind::InvalidConfig);
}

TEST_CASE("dataset directory round-trip") {
  TempDir dir("data");
  SyntheticSpec spec;
  spec.n_train = 50, spec.n_val = 20, spec.n_test = 30, spec.d = 4, spec.k = 3, spec.label_noise = 0.1;
  const Dataset d = gen_dataset(spec);
  write_dataset(dir.path, d);
  const Dataset back = read_dataset(dir.path);
  CHECK(back.features == d.features);
  CHECK(back.labels == d.labels);
  CHECK(back.splits == d.splits);
  CHECK(back.clean_labels == d.clean_labels);
}
