#include "calikd/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <thread>

#include "calikd/distill.hpp"
#include "calikd/error.hpp"
#include "calikd/stats.hpp"

namespace calikd {
namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

CalibrationReport average_reports(const std::vector<const CalibrationReport*>& reps) {
  CalibrationReport out = *reps.front();
  const double n = static_cast<double>(reps.size());
  out.ece = out.ece_over = out.ece_under = out.ace = out.accuracy = out.nll = 0.0;
  for (const auto* r : reps) {
    out.ece += r->ece / n;
    out.ece_over += r->ece_over / n;
    out.ece_under += r->ece_under / n;
    out.ace += r->ace / n;
    out.accuracy += r->accuracy / n;
    out.nll += r->nll / n;
  }
  return out;
}

Json series_json(const CorrelationStudy& s) {
  Json arr = Json::array();
  for (std::size_t i = 0; i < s.teacher_ids.size(); ++i) {
    Json row;
    row["teacher_id"] = s.teacher_ids[i];
    row["teacher_accuracy"] = s.teacher_accuracy[i];
    row["teacher_ace"] = s.teacher_ace[i];
    row["student_accuracy"] = s.student_accuracy[i];
    arr.push_back(std::move(row));
  }
  return arr;
}

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

const TrainedModel& find_teacher(const std::vector<TrainedModel>& zoo, const std::string& id) {
  for (const auto& t : zoo) {
    if (t.spec.id == id) {
      if (t.error) throw Error(ErrorKind::InvalidInput, "teacher '" + id + "' failed to train: " + *t.error);
      return t;
    }
  }
  throw Error(ErrorKind::InvalidConfig, "no teacher with id '" + id + "' in the zoo");
}

Json model_spec_json(const ModelSpec& m) {
  Json j;
  j["id"] = m.id;
  j["hidden"] = m.hidden;
  j["init_seed"] = m.init_seed;
  j["train"] = to_json(m.train);
  return j;
}

ModelSpec model_spec_from_json(const Json& j, const TrainConfig& defaults) {
  ModelSpec m;
  m.id = j.at("id").get<std::string>();
  m.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  m.init_seed = j.value("init_seed", std::uint64_t{0});
  m.train = train_config_from_json(j.contains("train") ? j.at("train") : Json::object(), defaults);
  return m;
}

Json synthetic_json(const SyntheticSpec& s) {
  Json j;
  j["n_train"] = s.n_train;
  j["n_val"] = s.n_val;
  j["n_test"] = s.n_test;
  j["d"] = s.d;
  j["k"] = s.k;
  j["class_separation"] = s.class_separation;
  j["label_noise"] = s.label_noise;
  j["seed"] = s.seed;
  return j;
}

SyntheticSpec synthetic_from_json(const Json& j) {
  SyntheticSpec s;
  s.n_train = j.value("n_train", s.n_train);
  s.n_val = j.value("n_val", s.n_val);
  s.n_test = j.value("n_test", s.n_test);
  s.d = j.value("d", s.d);
  s.k = j.value("k", s.k);
  s.class_separation = j.value("class_separation", s.class_separation);
  s.label_noise = j.value("label_noise", s.label_noise);
  s.seed = j.value("seed", s.seed);
  s.validate();
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset

void SyntheticSpec::validate() const {
  if (n_train == 0 || n_val == 0 || n_test == 0) {
    throw Error(ErrorKind::InvalidConfig, "every split needs at least one sample");
  }
  if (d == 0 || k < 2) throw Error(ErrorKind::InvalidConfig, "need d >= 1 and k >= 2");
  if (!(class_separation > 0.0)) throw Error(ErrorKind::InvalidConfig, "class_separation must be positive");
  if (!(label_noise >= 0.0 && label_noise < 0.5)) {
    throw Error(ErrorKind::InvalidConfig, "label_noise must lie in [0, 0.5)");
  }
}

Dataset gen_dataset(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Class directions: Gram-Schmidt on Gaussian draws while d allows it.
  Matrix means(spec.k, spec.d);
  for (std::size_t c = 0; c < spec.k; ++c) {
    auto m = means.row(c);
    for (auto& v : m) v = normal(rng);
    if (c < spec.d) {
      for (std::size_t p = 0; p < c; ++p) {
        auto q = means.row(p);
        double dot = 0.0;
        for (std::size_t j = 0; j < spec.d; ++j) dot += m[j] * q[j];
        for (std::size_t j = 0; j < spec.d; ++j) m[j] -= dot * q[j];
      }
    }
    double norm = 0.0;
    for (double v : m) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : m) v /= norm;
  }
  // Unit vectors scaled by sep / sqrt(2) sit at pairwise distance sep when orthogonal.
  const double radius = spec.class_separation / std::sqrt(2.0);
  for (auto& v : means.data()) v *= radius;

  const std::size_t n = spec.n_train + spec.n_val + spec.n_test;
  Dataset data;
  data.features = Matrix(n, spec.d);
  std::vector<std::size_t> labels(n);
  data.splits.resize(n);
  std::uniform_int_distribution<std::size_t> pick_class(0, spec.k - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = pick_class(rng);
    labels[i] = c;
    auto x = data.features.row(i);
    auto mu = means.row(c);
    for (std::size_t j = 0; j < spec.d; ++j) x[j] = mu[j] + normal(rng);
    data.splits[i] = i < spec.n_train ? Split::Train
                     : i < spec.n_train + spec.n_val ? Split::Val
                                                     : Split::Test;
  }
  data.clean_labels = labels;

  std::bernoulli_distribution flip(spec.label_noise);
  std::uniform_int_distribution<std::size_t> pick_other(0, spec.k - 2);
  for (std::size_t i = 0; i < spec.n_train; ++i) {
    if (!flip(rng)) continue;
    const std::size_t other = pick_other(rng);
    labels[i] = other >= labels[i] ? other + 1 : other;
  }
  data.labels = LabelVec(std::move(labels));
  return data;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  write_matrix_csv(dir / "features.csv", data.features);
  write_labels_csv(dir / "labels.csv", data.labels);
  if (!data.clean_labels.empty()) write_labels_csv(dir / "clean_labels.csv", LabelVec(data.clean_labels));
  std::string splits;
  for (auto s : data.splits) {
    splits += to_string(s);
    splits += '\n';
  }
  write_text(dir / "splits.csv", splits);
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset data;
  data.features = read_matrix_csv(dir / "features.csv");
  data.labels = read_labels_csv(dir / "labels.csv");
  if (std::filesystem::exists(dir / "clean_labels.csv")) {
    const LabelVec clean = read_labels_csv(dir / "clean_labels.csv");
    data.clean_labels.assign(clean.values().begin(), clean.values().end());
  }
  const std::string text = read_text(dir / "splits.csv");
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string tag = text.substr(pos, end - pos);
    if (!tag.empty() && tag.back() == '\r') tag.pop_back();
    if (tag == "train") data.splits.push_back(Split::Train);
    else if (tag == "val") data.splits.push_back(Split::Val);
    else if (tag == "test") data.splits.push_back(Split::Test);
    else if (!tag.empty()) throw Error(ErrorKind::IoError, "unknown split tag '" + tag + "'");
    pos = end + 1;
  }
  std::size_t k = 0;
  for (auto v : data.labels.values()) k = std::max(k, v + 1);
  data.validate(std::max<std::size_t>(k, 2));
  return data;
}

// ---------------------------------------------------------------------------
// Execution helpers

std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CALIKD_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(resolve_threads(threads), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= n || first_error) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept {
  // splitmix64 finalizer over the combined value.
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<std::size_t> ModelSpec::layer_dims(std::size_t d, std::size_t k) const {
  std::vector<std::size_t> dims{d};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(k);
  return dims;
}

// ---------------------------------------------------------------------------
// Teachers

TrainedModel train_model(const Dataset& data, const ModelSpec& spec, const EvalOptions& opts) {
  TrainedModel out;
  out.spec = spec;
  const auto dims = spec.layer_dims(data.features.cols(), data.num_classes());
  try {
    auto init = init_model(dims, spec.init_seed);
    auto trained = train(init, data, spec.train);
    out.model = std::move(trained.model);
    out.final_val_accuracy = trained.log.val_accuracy.empty() ? 0.0 : trained.log.val_accuracy.back();
    out.test_report = evaluate_model(out.model, data, Split::Test, opts.m_bins, opts.r_bins);
  } catch (const TrainingAborted& e) {
    out.model = e.last_finite();
    out.error = e.what();
  } catch (const Error& e) {
    out.error = e.what();
  }
  return out;
}

std::vector<TrainedModel> run_teacher_zoo(const Dataset& data, const std::vector<ModelSpec>& zoo,
                                          const EvalOptions& opts) {
  std::vector<TrainedModel> out(zoo.size());
  parallel_for(zoo.size(), opts.threads, [&](std::size_t i) { out[i] = train_model(data, zoo[i], opts); });
  return out;
}

// ---------------------------------------------------------------------------
// Distillation studies

ExperimentRecord run_kd_cell(const Dataset& data, const TrainedModel& teacher,
                             const std::optional<Calibrator>& calibrator,
                             const std::string& calibrator_label, const StudentSpec& student,
                             const KdConfig& kd, std::uint64_t seed, const EvalOptions& opts) {
  if (teacher.model.layer_dims.size() < 2)
    throw Error(ErrorKind::InvalidInput, "teacher '" + teacher.spec.id + "' has no trained model" +
                                             (teacher.error ? ": " + *teacher.error : std::string{}));
  const auto start = std::chrono::steady_clock::now();
  ExperimentRecord rec;
  rec.teacher_id = teacher.spec.id;
  rec.calibrator = calibrator_label;
  rec.seed = seed;

  const auto test_rows = data.indices(Split::Test);
  const LogitMatrix teacher_logits = forward(teacher.model, data.features.gather_rows(test_rows));
  const ProbMatrix teacher_probs =
      calibrator ? calibrator->apply(teacher_logits) : tempered_softmax(teacher_logits);
  rec.teacher = full_report(teacher_probs, data.labels.gather(test_rows), opts.m_bins, opts.r_bins);

  ModelSpec sspec{"student", student.hidden, student.train, derive_seed(seed, 1)};
  sspec.train.seed = derive_seed(seed, 2);
  const auto init = init_model(sspec.layer_dims(data.features.cols(), teacher.model.num_classes()),
                               sspec.init_seed);
  auto result = distill_student(init, teacher.model, calibrator ? &*calibrator : nullptr, data,
                                sspec.train, kd, opts.m_bins, opts.r_bins);
  rec.student = result.test_report;
  rec.student_model = std::move(result.student);
  rec.wall_time = seconds_since(start);
  return rec;
}

CorrelationStudy run_correlation_study(const Dataset& data, const std::vector<TrainedModel>& zoo,
                                       const StudentSpec& student, const KdConfig& kd,
                                       const std::vector<std::uint64_t>& seeds,
                                       const EvalOptions& opts) {
  if (seeds.empty()) throw Error(ErrorKind::InvalidConfig, "correlation study needs at least one seed");
  CorrelationStudy study;
  std::vector<const TrainedModel*> usable;
  for (const auto& t : zoo) {
    if (t.error) {
      study.notes.push_back("teacher " + t.spec.id + " skipped: " + *t.error);
    } else {
      usable.push_back(&t);
    }
  }
  const std::size_t cells = usable.size() * seeds.size();
  study.records.resize(cells);
  parallel_for(cells, opts.threads, [&](std::size_t c) {
    const auto& teacher = *usable[c / seeds.size()];
    study.records[c] = run_kd_cell(data, teacher, std::nullopt, "none", student, kd,
                                   seeds[c % seeds.size()], opts);
  });

  for (std::size_t t = 0; t < usable.size(); ++t) {
    double acc = 0.0;
    for (std::size_t s = 0; s < seeds.size(); ++s) acc += study.records[t * seeds.size() + s].student.accuracy;
    study.teacher_ids.push_back(usable[t]->spec.id);
    study.teacher_accuracy.push_back(usable[t]->test_report.accuracy);
    study.teacher_ace.push_back(usable[t]->test_report.ace);
    study.student_accuracy.push_back(acc / static_cast<double>(seeds.size()));
  }

  auto guarded = [&](const char* name, auto&& fn) -> std::optional<double> {
    try {
      return fn();
    } catch (const Error& e) {
      study.notes.push_back(std::string(name) + " omitted: " + e.what());
      return std::nullopt;
    }
  };
  study.r2_acc = guarded("r2_acc", [&] {
    return r_squared(PairedSeries(study.teacher_accuracy, study.student_accuracy));
  });
  study.r2_ace = guarded("r2_ace", [&] {
    return r_squared(PairedSeries(study.teacher_ace, study.student_accuracy));
  });
  study.spearman_ace = guarded("spearman_ace", [&] {
    return spearman(PairedSeries(study.teacher_ace, study.student_accuracy));
  });
  study.spearman_acc = guarded("spearman_acc", [&] {
    return spearman(PairedSeries(study.teacher_accuracy, study.student_accuracy));
  });
  return study;
}

std::vector<AblationRow> run_temperature_ablation(const Dataset& data, const TrainedModel& teacher,
                                                  const StudentSpec& student,
                                                  const KdConfig& kd_base,
                                                  const std::vector<double>& t_cal_grid,
                                                  const std::vector<std::uint64_t>& seeds,
                                                  const EvalOptions& opts) {
  if (std::find(t_cal_grid.begin(), t_cal_grid.end(), 1.0) == t_cal_grid.end()) {
    throw Error(ErrorKind::InvalidConfig, "temperature grid must include the 1.0 baseline");
  }
  if (seeds.empty()) throw Error(ErrorKind::InvalidConfig, "ablation needs at least one seed");
  const std::size_t cells = t_cal_grid.size() * seeds.size();
  std::vector<ExperimentRecord> records(cells);
  parallel_for(cells, opts.threads, [&](std::size_t c) {
    const double t = t_cal_grid[c / seeds.size()];
    records[c] = run_kd_cell(data, teacher, Calibrator::fixed(t), Calibrator::fixed(t).describe(),
                             student, kd_base, seeds[c % seeds.size()], opts);
  });
  std::vector<AblationRow> rows;
  for (std::size_t g = 0; g < t_cal_grid.size(); ++g) {
    AblationRow row;
    row.t_cal = t_cal_grid[g];
    double ece_over = 0.0;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& rec = records[g * seeds.size() + s];
      row.accuracies.push_back(rec.student.accuracy);
      ece_over += rec.student.ece_over;
      row.teacher_ece_over = rec.teacher.ece_over;
      row.teacher_ece_under = rec.teacher.ece_under;
    }
    row.mean_accuracy = mean_of(row.accuracies);
    row.std_accuracy = sample_std(row.accuracies);
    row.mean_student_ece_over = ece_over / static_cast<double>(seeds.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<ExperimentRecord> run_calibrator_comparison(
    const Dataset& data, const std::vector<TrainedModel>& teachers, const StudentSpec& student,
    const KdConfig& kd, const std::vector<std::uint64_t>& seeds, const EvalOptions& opts,
    const CalibratorComparisonOptions& cal_opts) {
  for (const auto& name : cal_opts.calibrators) {
    const auto& known = known_calibrators();
    if (std::find(known.begin(), known.end(), name) == known.end()) {
      throw Error(ErrorKind::InvalidConfig, "unknown calibrator '" + name + "'");
    }
  }
  const auto val_rows = data.indices(Split::Val);
  const LabelVec val_labels = data.labels.gather(val_rows);
  const Matrix val_features = data.features.gather_rows(val_rows);

  // Per (teacher, calibrator): the teacher model to distill from and its calibrator.
  struct Variant {
    const TrainedModel* teacher;
    std::string label;
    std::optional<Calibrator> calibrator;
  };
  std::vector<TrainedModel> mixup_teachers;
  mixup_teachers.reserve(teachers.size() * cal_opts.calibrators.size());
  std::vector<Variant> variants;
  for (const auto& t : teachers) {
    if (t.error) continue;
    const LogitMatrix val_logits = forward(t.model, val_features);
    for (const auto& name : cal_opts.calibrators) {
      if (name == "none") {
        variants.push_back({&t, name, std::nullopt});
      } else if (name == "fixed-T") {
        variants.push_back({&t, name, Calibrator::fixed(kd.t_cal)});
      } else if (name == "fitted-T") {
        variants.push_back({&t, name,
                            fit_temperature(val_logits, val_labels, cal_opts.temperature_search,
                                            cal_opts.split_seed)});
      } else if (name == "vector-scaling") {
        variants.push_back({&t, name,
                            fit_vector_scaling(val_logits, val_labels, cal_opts.vector_scaling,
                                               cal_opts.split_seed)});
      } else {
        ModelSpec spec = t.spec;
        spec.train.mixup_alpha = cal_opts.mixup_alpha;
        mixup_teachers.push_back(train_model(data, spec, opts));
        if (mixup_teachers.back().error) {
          throw Error(ErrorKind::NumericalError, "mixup teacher " + spec.id + " failed: " +
                                                     *mixup_teachers.back().error);
        }
        variants.push_back({&mixup_teachers.back(), name, std::nullopt});
      }
    }
  }

  std::vector<ExperimentRecord> records(variants.size() * seeds.size());
  parallel_for(records.size(), opts.threads, [&](std::size_t c) {
    const auto& v = variants[c / seeds.size()];
    records[c] = run_kd_cell(data, *v.teacher, v.calibrator, v.label, student, kd,
                             seeds[c % seeds.size()], opts);
    records[c].teacher_id = v.teacher->spec.id;
  });
  return records;
}

std::vector<PropertyRow> property_table(const std::vector<ExperimentRecord>& records,
                                        const std::string& calibrated_label) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ExperimentRecord*>> plain, calibrated;
  for (const auto& r : records) {
    if (r.calibrator == "none") {
      if (plain.find(r.teacher_id) == plain.end()) order.push_back(r.teacher_id);
      plain[r.teacher_id].push_back(&r);
    } else if (r.calibrator == calibrated_label) {
      calibrated[r.teacher_id].push_back(&r);
    }
  }
  std::vector<PropertyRow> rows;
  for (const auto& id : order) {
    auto it = calibrated.find(id);
    if (it == calibrated.end()) continue;
    PropertyRow row;
    row.teacher_id = id;
    row.teacher_plain = plain[id].front()->teacher;
    row.teacher_calibrated = it->second.front()->teacher;
    std::vector<const CalibrationReport*> sp, sc;
    for (const auto* r : plain[id]) sp.push_back(&r->student);
    for (const auto* r : it->second) sc.push_back(&r->student);
    row.student_plain = average_reports(sp);
    row.student_calibrated = average_reports(sc);
    row.teacher_ece_over_ratio = row.teacher_calibrated.ece_over > 0.0
                                     ? row.teacher_plain.ece_over / row.teacher_calibrated.ece_over
                                     : std::numeric_limits<double>::infinity();
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Serialization of results

std::string records_csv(const std::vector<ExperimentRecord>& records) {
  std::string out =
      "teacher_id,calibrator,seed,teacher_accuracy,teacher_ace,teacher_ece,teacher_ece_over,"
      "teacher_ece_under,teacher_nll,student_accuracy,student_ace,student_ece,student_ece_over,"
      "student_ece_under,student_nll\n";
  for (const auto& r : records) {
    out += r.teacher_id + ',' + r.calibrator + ',' + std::to_string(r.seed);
    for (double v : {r.teacher.accuracy, r.teacher.ace, r.teacher.ece, r.teacher.ece_over,
                     r.teacher.ece_under, r.teacher.nll, r.student.accuracy, r.student.ace,
                     r.student.ece, r.student.ece_over, r.student.ece_under, r.student.nll}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "t_cal,mean_student_accuracy,std_student_accuracy,n_seeds,mean_student_ece_over,"
                    "teacher_ece_over,teacher_ece_under\n";
  for (const auto& r : rows) {
    out += format_double(r.t_cal) + ',' + format_double(r.mean_accuracy) + ',' +
           format_double(r.std_accuracy) + ',' + std::to_string(r.accuracies.size()) + ',' +
           format_double(r.mean_student_ece_over) + ',' + format_double(r.teacher_ece_over) + ',' +
           format_double(r.teacher_ece_under) + '\n';
  }
  return out;
}

std::string student_checkpoint_name(const ExperimentRecord& record) {
  std::string cal = record.calibrator;
  for (auto& c : cal) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '.') c = '_';
  }
  return record.teacher_id + "__" + cal + "__s" + std::to_string(record.seed) + ".json";
}

// ---------------------------------------------------------------------------
// Manifest

void Manifest::validate() const {
  dataset.validate();
  kd.validate();
  if (zoo.empty()) throw Error(ErrorKind::InvalidConfig, "manifest zoo is empty");
  std::set<std::string> ids;
  for (const auto& t : zoo) {
    if (!ids.insert(t.id).second) throw Error(ErrorKind::InvalidConfig, "duplicate teacher id '" + t.id + "'");
    t.train.validate();
  }
  student.train.validate();
  if (seeds.empty()) throw Error(ErrorKind::InvalidConfig, "manifest needs at least one seed");
  for (const auto& id : calibrator_teachers) {
    if (!ids.count(id)) throw Error(ErrorKind::InvalidConfig, "unknown calibrator teacher '" + id + "'");
  }
  if (!ablation.teacher_id.empty() && !ids.count(ablation.teacher_id)) {
    throw Error(ErrorKind::InvalidConfig, "unknown ablation teacher '" + ablation.teacher_id + "'");
  }
  if (m_bins < 1 || r_bins < 1) throw Error(ErrorKind::InvalidBins, "bin counts must be at least 1");
}

Json to_json(const Manifest& m) {
  Json j;
  j["dataset"] = synthetic_json(m.dataset);
  Json zoo = Json::array();
  for (const auto& t : m.zoo) zoo.push_back(model_spec_json(t));
  j["zoo"] = std::move(zoo);
  j["student"] = {{"hidden", m.student.hidden}, {"train", to_json(m.student.train)}};
  j["kd"] = to_json(m.kd);
  j["seeds"] = m.seeds;
  j["ablation"] = {{"teacher_id", m.ablation.teacher_id},
                   {"t_cal_grid", m.ablation.t_cal_grid},
                   {"seeds", m.ablation.seeds}};
  j["calibrators"] = m.calibrators;
  j["calibrator_teachers"] = m.calibrator_teachers;
  j["mixup_alpha"] = m.mixup_alpha;
  j["m_bins"] = m.m_bins;
  j["r_bins"] = m.r_bins;
  return j;
}

Manifest default_manifest() {
  struct Entry {
    const char* id;
    std::vector<std::size_t> hidden;
    std::size_t epochs;
    double wd;
    double lr0;
  };
  // Spread of depth, width, training length and regularisation: heavily
  // regularised teachers stay near-calibrated, long low-decay runs overfit.
  const std::vector<Entry> entries{
      {"mlp32-wd5e-3", {32}, 60, 5e-3, 0.1},
      {"mlp64-wd5e-3", {64}, 60, 5e-3, 0.1},
      {"mlp128-e15", {128}, 15, 5e-4, 0.1},
      {"mlp128-wd0", {128}, 60, 0.0, 0.1},
      {"mlp256-wd5e-4", {256}, 60, 5e-4, 0.1},
      {"mlp64x2-e15", {64, 64}, 15, 5e-5, 0.1},
      {"mlp64x2-wd5e-3", {64, 64}, 60, 5e-3, 0.1},
      {"mlp128x2-wd5e-5", {128, 128}, 60, 5e-5, 0.1},
      {"mlp128x2-wd5e-3", {128, 128}, 60, 5e-3, 0.1},
      {"mlp256x2-e20", {256, 256}, 20, 0.0, 0.1},
      {"mlp64x3-wd5e-4", {64, 64, 64}, 60, 5e-4, 0.1},
      {"mlp128x3-e15", {128, 128, 128}, 15, 5e-3, 0.1},
      {"mlp128x2-slow", {128, 128}, 10, 5e-4, 0.005},
      {"mlp64x3-slow", {64, 64, 64}, 6, 5e-4, 0.01},
      {"mlp256-slow", {256}, 10, 5e-4, 0.003},
  };
  Manifest m;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    ModelSpec spec;
    spec.id = e.id;
    spec.hidden = e.hidden;
    spec.train.epochs = e.epochs;
    spec.train.lr_decay_epochs = {e.epochs * 35 / 60, e.epochs * 50 / 60};
    spec.train.weight_decay = e.wd;
    spec.train.lr0 = e.lr0;
    spec.train.seed = 1000 + i;
    spec.init_seed = 100 + i;
    m.zoo.push_back(std::move(spec));
  }
  m.ablation.teacher_id = "mlp128x2-wd5e-5";
  m.calibrator_teachers = {"mlp128x2-wd5e-5", "mlp128x2-wd5e-3"};
  return m;
}

Manifest manifest_from_json(const Json& j) {
  Manifest m;
  try {
    if (j.contains("dataset")) m.dataset = synthetic_from_json(j.at("dataset"));
    const TrainConfig defaults = j.contains("train_defaults")
                                     ? train_config_from_json(j.at("train_defaults"))
                                     : TrainConfig{};
    m.zoo.clear();
    for (const auto& t : j.at("zoo")) m.zoo.push_back(model_spec_from_json(t, defaults));
    if (j.contains("student")) {
      const auto& s = j.at("student");
      if (s.contains("hidden")) m.student.hidden = s.at("hidden").get<std::vector<std::size_t>>();
      m.student.train = train_config_from_json(s.contains("train") ? s.at("train") : Json::object(), defaults);
    }
    if (j.contains("kd")) m.kd = kd_config_from_json(j.at("kd"));
    if (j.contains("seeds")) m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      m.ablation.teacher_id = a.value("teacher_id", std::string());
      if (a.contains("t_cal_grid")) m.ablation.t_cal_grid = a.at("t_cal_grid").get<std::vector<double>>();
      if (a.contains("seeds")) m.ablation.seeds = a.at("seeds").get<std::vector<std::uint64_t>>();
    }
    if (j.contains("calibrators")) m.calibrators = j.at("calibrators").get<std::vector<std::string>>();
    if (j.contains("calibrator_teachers")) {
      m.calibrator_teachers = j.at("calibrator_teachers").get<std::vector<std::string>>();
    }
    m.mixup_alpha = j.value("mixup_alpha", m.mixup_alpha);
    m.m_bins = j.value("m_bins", m.m_bins);
    m.r_bins = j.value("r_bins", m.r_bins);
  } catch (const Json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("malformed manifest: ") + e.what());
  }
  m.validate();
  return m;
}

RunSummary run_manifest(const Manifest& manifest, const std::filesystem::path& out_dir,
                        Stages stages, std::ostream* log) {
  manifest.validate();
  const EvalOptions opts{manifest.m_bins, manifest.r_bins, 0};
  auto say = [&](const std::string& line) {
    if (log != nullptr) *log << line << std::endl;
  };
  Json timings = Json::object();
  auto clock = std::chrono::steady_clock::now();
  auto lap = [&](const char* name) {
    timings[name] = seconds_since(clock);
    clock = std::chrono::steady_clock::now();
  };

  const Dataset data = gen_dataset(manifest.dataset);
  RunSummary run;
  say("training " + std::to_string(manifest.zoo.size()) + " teachers");
  run.zoo = run_teacher_zoo(data, manifest.zoo, opts);
  lap("teacher_zoo");

  Json summary;
  summary["dataset"] = synthetic_json(manifest.dataset);
  summary["kd"] = to_json(manifest.kd);
  Json teachers = Json::array();
  for (const auto& t : run.zoo) {
    Json tj;
    tj["id"] = t.spec.id;
    tj["hidden"] = t.spec.hidden;
    tj["epochs"] = t.spec.train.epochs;
    tj["weight_decay"] = t.spec.train.weight_decay;
    if (t.error) {
      tj["error"] = *t.error;
    } else {
      tj["report"] = to_json(t.test_report);
      write_json(out_dir / "checkpoints" / "teachers" / (t.spec.id + ".json"),
                 checkpoint_json(t.model, t.spec.train, t.spec.init_seed, t.final_val_accuracy));
    }
    teachers.push_back(std::move(tj));
    say("  teacher " + t.spec.id + (t.error ? " FAILED" : " acc=" + format_double(t.test_report.accuracy) +
                                                              " ace=" + format_double(t.test_report.ace)));
  }
  summary["teachers"] = std::move(teachers);

  auto persist_students = [&](const std::vector<ExperimentRecord>& recs) {
    for (const auto& r : recs) {
      write_json(out_dir / "checkpoints" / "students" / student_checkpoint_name(r),
                 checkpoint_json(r.student_model, manifest.student.train, r.seed, r.student.accuracy));
    }
  };

  if (stages.correlation) {
    say("correlation study");
    run.correlation = run_correlation_study(data, run.zoo, manifest.student, manifest.kd,
                                            manifest.seeds, opts);
    const auto& c = *run.correlation;
    write_text(out_dir / "records.csv", records_csv(c.records));
    persist_students(c.records);
    Json cj;
    cj["n_teachers"] = c.teacher_ids.size();
    cj["seeds"] = manifest.seeds;
    cj["r2_acc"] = optional_json(c.r2_acc);
    cj["r2_ace"] = optional_json(c.r2_ace);
    cj["spearman_ace"] = optional_json(c.spearman_ace);
    cj["spearman_acc"] = optional_json(c.spearman_acc);
    cj["series"] = series_json(c);
    cj["notes"] = c.notes;
    summary["correlation"] = std::move(cj);
    lap("correlation");
  }

  if (stages.ablation) {
    const std::string id = manifest.ablation.teacher_id.empty() ? manifest.zoo.front().id
                                                                : manifest.ablation.teacher_id;
    say("temperature ablation on " + id);
    run.ablation = run_temperature_ablation(data, find_teacher(run.zoo, id), manifest.student,
                                            manifest.kd, manifest.ablation.t_cal_grid,
                                            manifest.ablation.seeds, opts);
    write_text(out_dir / "ablation.csv", ablation_csv(run.ablation));
    Json rows = Json::array();
    for (const auto& r : run.ablation) {
      rows.push_back({{"t_cal", r.t_cal},
                      {"mean_student_accuracy", r.mean_accuracy},
                      {"std_student_accuracy", r.std_accuracy},
                      {"student_accuracies", r.accuracies},
                      {"mean_student_ece_over", r.mean_student_ece_over},
                      {"teacher_ece_over", r.teacher_ece_over},
                      {"teacher_ece_under", r.teacher_ece_under}});
    }
    summary["ablation"] = {{"teacher_id", id}, {"seeds", manifest.ablation.seeds}, {"rows", rows}};
    lap("ablation");
  }

  if (stages.calibrators) {
    std::vector<TrainedModel> subset;
    for (const auto& t : run.zoo) {
      if (manifest.calibrator_teachers.empty() ||
          std::find(manifest.calibrator_teachers.begin(), manifest.calibrator_teachers.end(),
                    t.spec.id) != manifest.calibrator_teachers.end()) {
        subset.push_back(t);
      }
    }
    say("calibrator comparison on " + std::to_string(subset.size()) + " teachers");
    CalibratorComparisonOptions cal_opts;
    cal_opts.calibrators = manifest.calibrators;
    cal_opts.mixup_alpha = manifest.mixup_alpha;
    cal_opts.split_seed = manifest.dataset.seed;
    run.calibrator_records = run_calibrator_comparison(data, subset, manifest.student, manifest.kd,
                                                       manifest.seeds, opts, cal_opts);
    write_text(out_dir / "calibrators.csv", records_csv(run.calibrator_records));
    persist_students(run.calibrator_records);

    // Mean student accuracy per calibrator, over teachers and seeds.
    Json per_cal = Json::array();
    for (const auto& name : manifest.calibrators) {
      std::vector<double> acc, ece_over;
      for (const auto& r : run.calibrator_records) {
        if (r.calibrator != name) continue;
        acc.push_back(r.student.accuracy);
        ece_over.push_back(r.student.ece_over);
      }
      if (acc.empty()) continue;
      per_cal.push_back({{"calibrator", name},
                         {"mean_student_accuracy", mean_of(acc)},
                         {"std_student_accuracy", sample_std(acc)},
                         {"mean_student_ece_over", mean_of(ece_over)},
                         {"n", acc.size()}});
    }
    summary["calibrators"] = std::move(per_cal);

    run.properties = property_table(run.calibrator_records, "fixed-T");
    Json props = Json::array();
    for (const auto& p : run.properties) {
      props.push_back({{"teacher_id", p.teacher_id},
                       {"teacher_plain", to_json(p.teacher_plain)},
                       {"teacher_calibrated", to_json(p.teacher_calibrated)},
                       {"student_plain", to_json(p.student_plain)},
                       {"student_calibrated", to_json(p.student_calibrated)},
                       {"teacher_ece_over_ratio", std::isfinite(p.teacher_ece_over_ratio)
                                                      ? Json(p.teacher_ece_over_ratio)
                                                      : Json("inf")}});
    }
    summary["properties"] = std::move(props);
    lap("calibrators");
  }

  write_json(out_dir / "summary.json", summary);
  write_json(out_dir / "timings.json", timings);
  run.summary = std::move(summary);
  return run;
}

}  // namespace calikd
