#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "calikd/calib_metrics.hpp"
#include "calikd/calibrators.hpp"
#include "calikd/distill.hpp"
#include "calikd/error.hpp"
#include "calikd/harness.hpp"
#include "calikd/io.hpp"
#include "calikd/nn_engine.hpp"

namespace fs = std::filesystem;
using namespace calikd;

namespace {

// Raised for any failure after flag parsing; `stage` names the step that broke.
struct StageFailure {
  std::string stage;
  std::string message;
};

template <class F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw StageFailure{name, e.what()};
  } catch (const Json::exception& e) {
    throw StageFailure{name, e.what()};
  } catch (const std::exception& e) {
    throw StageFailure{name, e.what()};
  }
}

std::string fmt(double v) { return format_double(v); }

void print_report(const std::string& title, const CalibrationReport& r) {
  std::cout << title << ": accuracy=" << fmt(r.accuracy) << " ece=" << fmt(r.ece)
            << " ece_over=" << fmt(r.ece_over) << " ece_under=" << fmt(r.ece_under)
            << " ace=" << fmt(r.ace) << " nll=" << fmt(r.nll) << " (n=" << r.n << ")\n";
}

void export_split(const fs::path& dir, const std::string& name, const MlpModel& model,
                  const Dataset& data, Split split) {
  const auto rows = data.indices(split);
  const auto logits = forward(model, data.features.gather_rows(rows));
  write_matrix_csv(dir / (name + "_logits.csv"), logits.values());
  write_labels_csv(dir / (name + "_labels.csv"), data.labels.gather(rows));
}

struct TrainFlags {
  std::size_t epochs = 60;
  std::size_t batch = 64;
  double lr0 = 0.1;
  std::vector<std::size_t> decay{35, 50};
  double decay_factor = 0.1;
  double momentum = 0.9;
  double wd = 5e-5;
  double mixup_alpha = 0.0;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    app->add_option("--batch-size", batch, "Minibatch size")->capture_default_str();
    app->add_option("--lr", lr0, "Initial learning rate")->capture_default_str();
    app->add_option("--lr-decay-epochs", decay, "Epochs at which the learning rate is decayed")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--lr-decay-factor", decay_factor, "Learning-rate decay factor")->capture_default_str();
    app->add_option("--momentum", momentum, "SGD momentum")->capture_default_str();
    app->add_option("--weight-decay", wd, "L2 weight decay")->capture_default_str();
    app->add_option("--mixup-alpha", mixup_alpha, "Mixup Beta(alpha, alpha); 0 disables")->capture_default_str();
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch;
    c.lr0 = lr0;
    c.lr_decay_epochs = decay;
    c.lr_decay_factor = decay_factor;
    c.momentum = momentum;
    c.weight_decay = wd;
    c.mixup_alpha = mixup_alpha;
    c.seed = seed;
    return c;
  }
};

struct KdFlags {
  double lambda = 0.9;
  double t_kd = 4.0;
  bool no_t2 = false;

  void add(CLI::App* app) {
    app->add_option("--lambda", lambda, "Weight of the distillation term")->capture_default_str();
    app->add_option("--t-kd", t_kd, "Distillation temperature")->capture_default_str();
    app->add_flag("--no-t2-scaling", no_t2, "Do not scale the distillation term by t_kd^2");
  }

  KdConfig config(double t_cal) const {
    KdConfig c;
    c.lambda = lambda;
    c.t_kd = t_kd;
    c.t_cal = t_cal;
    c.scale_kd_by_t_squared = !no_t2;
    return c;
  }
};

struct SweepFlags {
  std::string manifest;
  std::string out = "results";
  std::optional<std::uint64_t> seed;
  std::size_t m_bins = kDefaultEceBins;
  std::size_t r_bins = kDefaultAceBins;

  void add(CLI::App* app) {
    app->add_option("--manifest", manifest, "Experiment manifest JSON (built-in default benchmark when omitted)")
        ->check(CLI::ExistingFile);
    app->add_option("--out", out, "Output directory")->capture_default_str();
    app->add_option("--seed", seed, "Override the dataset seed of the manifest");
    app->add_option("--m-bins", m_bins, "ECE bins (overrides the manifest)")->capture_default_str();
    app->add_option("--r-bins", r_bins, "ACE bins per class (overrides the manifest)")->capture_default_str();
  }

  Manifest load(const CLI::App* app) const {
    Manifest m = manifest.empty() ? default_manifest()
                                  : stage("manifest", [&] { return manifest_from_json(read_json(manifest)); });
    if (seed) m.dataset.seed = *seed;
    if (app->count("--m-bins") > 0 || manifest.empty()) m.m_bins = m_bins;
    if (app->count("--r-bins") > 0 || manifest.empty()) m.r_bins = r_bins;
    stage("manifest", [&] { m.validate(); });
    return m;
  }
};

void print_summary(const RunSummary& run) {
  for (const auto& t : run.zoo) {
    if (t.error) {
      std::cout << "teacher " << t.spec.id << ": failed (" << *t.error << ")\n";
    } else {
      print_report("teacher " + t.spec.id, t.test_report);
    }
  }
  if (run.correlation) {
    const auto& c = *run.correlation;
    auto show = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string("n/a"); };
    std::cout << "correlation: r2_acc=" << show(c.r2_acc) << " r2_ace=" << show(c.r2_ace)
              << " spearman_ace=" << show(c.spearman_ace) << " spearman_acc=" << show(c.spearman_acc)
              << " (" << c.records.size() << " records)\n";
    for (const auto& n : c.notes) std::cout << "  note: " << n << "\n";
  }
  for (const auto& r : run.ablation) {
    std::cout << "ablation t_cal=" << fmt(r.t_cal) << ": student accuracy " << fmt(r.mean_accuracy)
              << " +- " << fmt(r.std_accuracy) << "\n";
  }
  for (const auto& p : run.properties) {
    std::cout << "properties " << p.teacher_id << ": teacher ece_over " << fmt(p.teacher_plain.ece_over)
              << " -> " << fmt(p.teacher_calibrated.ece_over) << ", student ece_over "
              << fmt(p.student_plain.ece_over) << " -> " << fmt(p.student_calibrated.ece_over) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Calibrated-teacher knowledge distillation toolkit"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic Gaussian-cluster benchmark");
  SyntheticSpec gen_spec;
  std::string gen_out = "data";
  gen->add_option("--n-train", gen_spec.n_train, "Training samples")->capture_default_str();
  gen->add_option("--n-val", gen_spec.n_val, "Validation samples")->capture_default_str();
  gen->add_option("--n-test", gen_spec.n_test, "Test samples")->capture_default_str();
  gen->add_option("--dim", gen_spec.d, "Feature dimension")->capture_default_str();
  gen->add_option("--classes", gen_spec.k, "Number of classes")->capture_default_str();
  gen->add_option("--separation", gen_spec.class_separation, "Pairwise distance of class means")
      ->capture_default_str();
  gen->add_option("--label-noise", gen_spec.label_noise, "Train-label flip rate")->capture_default_str();
  gen->add_option("--seed", gen_spec.seed, "Random seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->capture_default_str();

  // train-teacher
  auto* tt = app.add_subcommand("train-teacher", "Train an MLP on a dataset directory");
  std::string tt_data, tt_out = "teacher";
  std::vector<std::size_t> tt_hidden{128, 128};
  std::uint64_t tt_seed = 0;
  TrainFlags tt_train;
  tt->add_option("--data", tt_data, "Dataset directory written by gen-data")->required()->check(CLI::ExistingDirectory);
  tt->add_option("--hidden", tt_hidden, "Hidden layer widths")->delimiter(',')->capture_default_str();
  tt->add_option("--seed", tt_seed, "Seed for initialisation and shuffling")->capture_default_str();
  tt->add_option("--out", tt_out, "Output directory")->capture_default_str();
  tt_train.add(tt);

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Build a calibrator from held-out logits");
  std::string cal_logits, cal_labels, cal_mode = "fit-temperature", cal_out = "calibrator.json";
  double cal_t = kDefaultCalibrationTemperature;
  TemperatureSearch cal_search;
  VectorScalingOptions cal_vs;
  std::uint64_t cal_seed = 0;
  cal->add_option("--logits", cal_logits, "Held-out logits CSV")->required()->check(CLI::ExistingFile);
  cal->add_option("--labels", cal_labels, "Held-out labels CSV")->required()->check(CLI::ExistingFile);
  cal->add_option("--mode", cal_mode, "fixed | fit-temperature | vector-scaling")
      ->check(CLI::IsMember({"fixed", "fit-temperature", "vector-scaling"}))
      ->capture_default_str();
  cal->add_option("--t-cal", cal_t, "Temperature for --mode fixed")->capture_default_str();
  cal->add_option("--t-min", cal_search.lo, "Lower end of the temperature search")->capture_default_str();
  cal->add_option("--t-max", cal_search.hi, "Upper end of the temperature search")->capture_default_str();
  cal->add_option("--tol", cal_search.tol, "Search tolerance")->capture_default_str();
  cal->add_option("--vs-iterations", cal_vs.steps, "Vector-scaling gradient steps")->capture_default_str();
  cal->add_option("--vs-lr", cal_vs.lr, "Vector-scaling step size")->capture_default_str();
  cal->add_option("--seed", cal_seed, "Split seed recorded in the fit metadata")->capture_default_str();
  cal->add_option("--out", cal_out, "Calibrator JSON")->capture_default_str();

  // eval-calibration
  auto* ev = app.add_subcommand("eval-calibration", "Calibration report for logits and labels");
  std::string ev_logits, ev_labels, ev_cal, ev_out = "report.json";
  std::size_t ev_m = kDefaultEceBins, ev_r = kDefaultAceBins;
  double ev_t = 1.0;
  ev->add_option("--logits", ev_logits, "Logits CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--labels", ev_labels, "Labels CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--calibrator", ev_cal, "Calibrator JSON applied before evaluation")->check(CLI::ExistingFile);
  ev->add_option("--temperature", ev_t, "Softmax temperature when no calibrator is given")->capture_default_str();
  ev->add_option("--m-bins", ev_m, "Equal-width ECE bins")->capture_default_str();
  ev->add_option("--r-bins", ev_r, "Equal-count ACE bins per class")->capture_default_str();
  ev->add_option("--out", ev_out, "Report JSON")->capture_default_str();

  // distill
  auto* ds = app.add_subcommand("distill", "Distil a student from a (calibrated) teacher");
  std::string ds_data, ds_teacher, ds_cal, ds_out = "student";
  std::vector<std::size_t> ds_hidden{24};
  double ds_tcal = kDefaultCalibrationTemperature;
  std::uint64_t ds_seed = 1;
  std::size_t ds_m = kDefaultEceBins, ds_r = kDefaultAceBins;
  TrainFlags ds_train;
  KdFlags ds_kd;
  ds->add_option("--data", ds_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ds->add_option("--teacher", ds_teacher, "Teacher checkpoint JSON")->required()->check(CLI::ExistingFile);
  ds->add_option("--calibrator", ds_cal, "Calibrator JSON (overrides --t-cal)")->check(CLI::ExistingFile);
  ds->add_option("--t-cal", ds_tcal, "Fixed teacher temperature; 1 means an uncalibrated teacher")
      ->capture_default_str();
  ds->add_option("--hidden", ds_hidden, "Student hidden widths")->delimiter(',')->capture_default_str();
  ds->add_option("--seed", ds_seed, "Student seed")->capture_default_str();
  ds->add_option("--m-bins", ds_m, "Equal-width ECE bins")->capture_default_str();
  ds->add_option("--r-bins", ds_r, "Equal-count ACE bins per class")->capture_default_str();
  ds->add_option("--out", ds_out, "Output directory")->capture_default_str();
  ds_train.add(ds);
  ds_kd.add(ds);

  // sweeps
  SweepFlags corr_f, temp_f, cals_f, rep_f;
  auto* sc = app.add_subcommand("sweep-correlation", "Teacher ACE/accuracy vs student accuracy study");
  corr_f.add(sc);
  auto* st = app.add_subcommand("sweep-temperature", "Student accuracy across teacher temperatures");
  temp_f.add(st);
  auto* sk = app.add_subcommand("sweep-calibrators", "Compare calibration methods for KD");
  cals_f.add(sk);
  auto* rp = app.add_subcommand("report", "Run every study of a manifest");
  rep_f.add(rp);
  std::string dump_manifest;
  rp->add_option("--write-manifest", dump_manifest, "Write the resolved manifest JSON here and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) {
      const auto data = stage("gen-data", [&] { return gen_dataset(gen_spec); });
      stage("write dataset", [&] { write_dataset(gen_out, data); });
      std::cout << "wrote " << data.labels.size() << " samples (" << data.indices(Split::Train).size()
                << " train, " << data.indices(Split::Val).size() << " val, "
                << data.indices(Split::Test).size() << " test) to " << gen_out << "\n";
    } else if (tt->parsed()) {
      const auto data = stage("read dataset", [&] { return read_dataset(tt_data); });
      ModelSpec spec{"teacher", tt_hidden, tt_train.config(derive_seed(tt_seed, 2)), derive_seed(tt_seed, 1)};
      stage("config", [&] { spec.train.validate(); });
      const std::size_t k = data.num_classes();
      const auto init = stage("init", [&] { return init_model(spec.layer_dims(data.features.cols(), k), spec.init_seed); });
      const auto result = stage("train", [&] { return train(init, data, spec.train); });
      const auto report = stage("evaluate", [&] { return evaluate_model(result.model, data, Split::Test); });
      stage("write outputs", [&] {
        const double val_acc = result.log.val_accuracy.empty() ? 0.0 : result.log.val_accuracy.back();
        write_json(fs::path(tt_out) / "teacher.json", checkpoint_json(result.model, spec.train, spec.init_seed, val_acc));
        write_json(fs::path(tt_out) / "report.json", to_json(report));
        export_split(tt_out, "val", result.model, data, Split::Val);
        export_split(tt_out, "test", result.model, data, Split::Test);
      });
      print_report("teacher (test)", report);
    } else if (cal->parsed()) {
      const auto logits = stage("read logits", [&] { return LogitMatrix(read_matrix_csv(cal_logits)); });
      const auto labels = stage("read labels", [&] {
        auto l = read_labels_csv(cal_labels);
        l.check_against(logits.n(), logits.k());
        return l;
      });
      const Calibrator c = stage("calibrate", [&] {
        if (cal_mode == "fixed") return Calibrator::fixed(cal_t);
        if (cal_mode == "fit-temperature") return fit_temperature(logits, labels, cal_search, cal_seed);
        return fit_vector_scaling(logits, labels, cal_vs, cal_seed);
      });
      stage("write calibrator", [&] { write_json(cal_out, to_json(c)); });
      const double before = temperature_nll(logits, labels, 1.0);
      const double after = mean_nll(c.apply(logits), labels);
      std::cout << c.describe() << ": nll_before=" << fmt(before) << " nll_after=" << fmt(after) << "\n";
      if (const auto* f = std::get_if<FittedTemperature>(&c.kind())) {
        for (const auto& w : f->fit.warnings) std::cout << "warning: " << w << "\n";
      }
    } else if (ev->parsed()) {
      const auto logits = stage("read logits", [&] { return LogitMatrix(read_matrix_csv(ev_logits)); });
      const auto labels = stage("read labels", [&] { return read_labels_csv(ev_labels); });
      const auto report = stage("eval-calibration", [&] {
        labels.check_against(logits.n(), logits.k());
        const auto probs = ev_cal.empty() ? tempered_softmax(logits, Temperature{ev_t})
                                          : calibrator_from_json(read_json(ev_cal)).apply(logits);
        return full_report(probs, labels, ev_m, ev_r);
      });
      stage("write report", [&] { write_json(ev_out, to_json(report)); });
      print_report("report", report);
    } else if (ds->parsed()) {
      const auto data = stage("read dataset", [&] { return read_dataset(ds_data); });
      const auto teacher = stage("read teacher", [&] { return model_from_checkpoint(read_json(ds_teacher)); });
      const Calibrator calibrator = stage("calibrator", [&] {
        return ds_cal.empty() ? Calibrator::fixed(ds_tcal) : calibrator_from_json(read_json(ds_cal));
      });
      const KdConfig kd = stage("config", [&] {
        auto c = ds_kd.config(calibrator.temperature());
        c.validate();
        return c;
      });
      const TrainConfig cfg = ds_train.config(derive_seed(ds_seed, 2));
      stage("config", [&] { cfg.validate(); });
      ModelSpec spec{"student", ds_hidden, cfg, derive_seed(ds_seed, 1)};
      const auto init = stage("init", [&] {
        return init_model(spec.layer_dims(data.features.cols(), teacher.num_classes()), spec.init_seed);
      });
      const auto result = stage("distill", [&] {
        return distill_student(init, teacher, &calibrator, data, cfg, kd, ds_m, ds_r);
      });
      const auto teacher_logits = forward(teacher, data.features.gather_rows(data.indices(Split::Test)));
      const auto teacher_report = full_report(calibrator.apply(teacher_logits),
                                              data.labels.gather(data.indices(Split::Test)), ds_m, ds_r);
      stage("write outputs", [&] {
        const double val_acc = result.log.val_accuracy.empty() ? 0.0 : result.log.val_accuracy.back();
        write_json(fs::path(ds_out) / "student.json", checkpoint_json(result.student, cfg, spec.init_seed, val_acc));
        write_json(fs::path(ds_out) / "report.json", to_json(result.test_report));
        write_json(fs::path(ds_out) / "teacher_report.json", to_json(teacher_report));
      });
      std::cout << "calibrator " << calibrator.describe() << "\n";
      print_report("teacher (test)", teacher_report);
      print_report("student (test)", result.test_report);
    } else {
      struct Sweep {
        CLI::App* app;
        SweepFlags* flags;
        Stages stages;
      };
      const std::vector<Sweep> sweeps{{sc, &corr_f, {true, false, false}},
                                      {st, &temp_f, {false, true, false}},
                                      {sk, &cals_f, {false, false, true}},
                                      {rp, &rep_f, {true, true, true}}};
      for (const auto& s : sweeps) {
        if (!s.app->parsed()) continue;
        const Manifest m = s.flags->load(s.app);
        if (s.app == rp && !dump_manifest.empty()) {
          stage("write manifest", [&] { write_json(dump_manifest, to_json(m)); });
          std::cout << "wrote " << dump_manifest << "\n";
          return 0;
        }
        const auto run = stage(s.app->get_name(), [&] { return run_manifest(m, s.flags->out, s.stages, &std::cerr); });
        print_summary(run);
        std::cout << "outputs in " << s.flags->out << "\n";
      }
    }
  } catch (const StageFailure& f) {
    std::cerr << "error in stage '" << f.stage << "': " << f.message << "\n";
    return 2;
  }
  return 0;
}
