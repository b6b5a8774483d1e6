#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "../oracles.hpp"
#include "calikd/calib_metrics.hpp"
#include "calikd/calibrators.hpp"
#include "calikd/distill.hpp"
#include "calikd/harness.hpp"
#include "calikd/io.hpp"
#include "calikd/nn_engine.hpp"
#include "calikd/prob_core.hpp"

using namespace calikd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(r, c);
  for (auto& v : m.data()) v = g(rng);
  return m;
}

std::vector<std::size_t> random_labels(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  std::vector<std::size_t> out(n);
  for (auto& v : out) v = pick(rng);
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

Outcome metric_identities() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  bool sizes_ok = true, range_ok = true;
  const int trials = 1500;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = 1 + rng() % 300, k = 2 + rng() % 12;
    const std::size_t m = 1 + rng() % 30, r = 1 + rng() % std::min<std::size_t>(n, 30);
    const ProbMatrix p(Matrix::from_rows(oracle::random_probs(rng, n, k, 0.2 + (rng() % 100) * 0.08)));
    const LabelVec y(random_labels(rng, n, k));
    const auto rep = full_report(p, y, m, r);
    worst = std::max(worst, std::abs(rep.ece - (rep.ece_over + rep.ece_under)));
    const auto part = reliability_bins(p, y, {BinScheme::EqualCount, r});
    for (const auto& g : part.groups) {
      std::size_t lo = n, hi = 0;
      for (const auto& b : g) lo = std::min(lo, b.count), hi = std::max(hi, b.count);
      sizes_ok = sizes_ok && hi - lo <= 1;
    }
    for (double v : {rep.ece, rep.ece_over, rep.ece_under, rep.ace, rep.accuracy}) {
      range_ok = range_ok && v >= 0.0 && v <= 1.0;
    }
  }
  return {worst <= 1e-12 && sizes_ok && range_ok,
          std::to_string(trials) + " instances, max |ece - over - under| = " + fmt(worst) +
              (sizes_ok ? "" : ", bin sizes differ by > 1") + (range_ok ? "" : ", metric out of [0,1]")};
}

Outcome temperature_invariance() {
  std::mt19937_64 rng(202);
  std::size_t violations = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng() % 100, k = 2 + rng() % 10;
    const LogitMatrix z(random_matrix(rng, n, k, 0.1 + (rng() % 50) * 0.2));
    const LabelVec y(random_labels(rng, n, k));
    const auto base = argmax_rows(z.values());
    const double acc = accuracy(tempered_softmax(z), y);
    for (double temp : {0.5, 1.0, 1.5, 2.0, 4.0, 10.0}) {
      const auto p = tempered_softmax(z, Temperature{temp});
      if (argmax_rows(p.values()) != base || accuracy(p, y) != acc) ++violations;
    }
  }
  return {violations == 0, "200 matrices x 6 temperatures, " + std::to_string(violations) + " violations"};
}

Outcome decomposition_oracle() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_loss = 0.0, worst_grad = 0.0;
  const int trials = 1200;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = 1 + rng() % 20, k = 2 + rng() % 10;
    const LogitMatrix s(random_matrix(rng, n, k, 3.0));
    const ProbMatrix pc(Matrix::from_rows(oracle::random_probs(rng, n, k, 2.0)));
    const LabelVec y(random_labels(rng, n, k));
    const double kk = t % 10 == 0 ? 0.0 : u(rng), lambda = u(rng);
    const auto d = decompose_loss(s, {kk, pc, y}, lambda);
    worst_loss = std::max(worst_loss, std::abs(d.direct - d.decomposed));
    for (std::size_t i = 0; i < d.grad_direct.size(); ++i) {
      worst_grad = std::max(worst_grad, std::abs(d.grad_direct.data()[i] - d.grad_decomposed.data()[i]));
    }
  }
  const LogitMatrix s(random_matrix(rng, 4, 3, 1.0));
  const auto one = decompose_loss(s, {1.0, ProbMatrix(Matrix::from_rows(oracle::random_probs(rng, 4, 3, 1.0))),
                                      LabelVec(random_labels(rng, 4, 3))},
                                  0.9);
  return {worst_loss <= 1e-10 && worst_grad <= 1e-10 && one.kd_coefficient == 0.0,
          std::to_string(trials) + " draws, max loss gap " + fmt(worst_loss) + ", max grad gap " + fmt(worst_grad) +
              ", kd coefficient at k=1: " + fmt(one.kd_coefficient)};
}

std::vector<double> flatten(const std::vector<Matrix>& w, const std::vector<std::vector<double>>& b) {
  std::vector<double> out;
  for (std::size_t l = 0; l < w.size(); ++l) {
    out.insert(out.end(), w[l].data().begin(), w[l].data().end());
    out.insert(out.end(), b[l].begin(), b[l].end());
  }
  return out;
}

MlpModel unflatten(MlpModel m, const std::vector<double>& theta) {
  std::size_t p = 0;
  for (std::size_t l = 0; l < m.weights.size(); ++l) {
    for (auto& v : m.weights[l].data()) v = theta[p++];
    for (auto& v : m.biases[l]) v = theta[p++];
  }
  return m;
}

Outcome gradient_checks() {
  std::mt19937_64 rng(404);
  std::normal_distribution<double> g(0.0, 0.3);
  double worst = 0.0;
  const int models = 24;
  for (int t = 0; t < models; ++t) {
    const std::size_t d = 2 + t % 4, k = 2 + t % 4, h = 3 + t % 6;
    std::vector<std::size_t> dims{d, h, k};
    if (t % 2 == 1) dims = {d, h, h, k};
    auto model = init_model(dims, 500 + t);
    for (auto& b : model.biases)
      for (auto& v : b) v = g(rng);
    const Matrix x = random_matrix(rng, 6, d, 1.0);
    const LabelVec y(random_labels(rng, 6, k));
    KdConfig kd;
    kd.lambda = 0.1 + 0.8 * (t % 5) / 4.0;
    kd.t_kd = 1.0 + t % 5;
    kd.t_cal = 1.0 + 0.5 * (t % 3);
    kd.scale_kd_by_t_squared = t % 2 == 0;
    const double wd = t % 3 == 0 ? 0.0 : 1e-3;
    const std::vector<LossSpec> specs{HardCE{}, SoftCE{tempered_softmax(LogitMatrix(random_matrix(rng, 6, k, 2.0)))},
                                      KdComposite{LogitMatrix(random_matrix(rng, 6, k, 3.0)), kd}};
    const auto theta = flatten(model.weights, model.biases);
    for (const auto& spec : specs) {
      const auto an = loss_and_grads(model, x, y, spec, wd).grads;
      const auto numeric = oracle::numeric_gradient(theta, [&](const std::vector<double>& th) {
        return loss_and_grads(unflatten(model, th), x, y, spec, wd).loss;
      });
      worst = std::max(worst, oracle::relative_error(flatten(an.weights, an.biases), numeric));
    }
  }
  return {worst < 1e-5, std::to_string(models) + " models x 3 losses, worst relative error " + fmt(worst)};
}

Outcome calibrator_contracts() {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  bool never_worse = true;
  for (int t = 0; t < 40; ++t) {
    const std::size_t n = 20 + rng() % 200, k = 2 + rng() % 8;
    const LogitMatrix z(random_matrix(rng, n, k, 0.1 + t * 0.2));
    const LabelVec y(random_labels(rng, n, k));
    const auto c = fit_temperature(z, y);
    const double t_fit = std::get<FittedTemperature>(c.kind()).t;
    never_worse = never_worse && temperature_nll(z, y, t_fit) <= temperature_nll(z, y, 1.0) + 1e-12;
  }

  // Labels drawn from softmax(z) make z calibrated; 5z is then best undone at t = 5.
  const std::size_t n = 5000, k = 6;
  oracle::Rows inflated;
  std::vector<std::size_t> labels;
  std::normal_distribution<double> g(0.0, 2.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> z(k);
    for (auto& v : z) v = g(rng);
    const auto p = oracle::softmax(z);
    double r = u(rng), acc = 0.0;
    std::size_t y = k - 1;
    for (std::size_t j = 0; j < k; ++j) {
      acc += p[j];
      if (r < acc) {
        y = j;
        break;
      }
    }
    for (auto& v : z) v *= 5.0;
    inflated.push_back(z);
    labels.push_back(y);
  }
  const double grid = oracle::grid_temperature(inflated, labels, 0.05, 10.0, 4001);
  const auto fitted = fit_temperature(LogitMatrix(Matrix::from_rows(inflated)), LabelVec(labels));
  const double t_fit = std::get<FittedTemperature>(fitted.kind()).t;
  const bool recovers = std::abs(grid - 5.0) <= 0.25 && std::abs(t_fit - 5.0) <= 0.25 && std::abs(t_fit - grid) <= 0.02;

  bool identity = true;
  for (int t = 0; t < 50; ++t) {
    const std::size_t k2 = 2 + t % 9;
    const LogitMatrix z(random_matrix(rng, 30, k2, 4.0));
    identity = identity && Calibrator::identity_vector(k2).apply(z).values() == tempered_softmax(z).values();
    const auto zero = fit_vector_scaling(z, LabelVec(random_labels(rng, 30, k2)), {0, 0.05});
    identity = identity && zero.apply(z).values() == tempered_softmax(z).values();
  }
  return {never_worse && recovers && identity,
          std::string("never worse: ") + (never_worse ? "yes" : "no") + ", inflation x5 fit " + fmt(t_fit) +
              " vs grid " + fmt(grid) + ", identity bitwise: " + (identity ? "yes" : "no")};
}

double timing(const Json& timings, const char* key) { return timings.contains(key) ? timings[key].get<double>() : 0.0; }

Outcome fig1(const RunSummary& run, std::size_t zoo_size, std::size_t seeds) {
  const auto& c = *run.correlation;
  if (!c.spearman_ace || !c.r2_ace || !c.r2_acc) return {false, "correlation statistics unavailable"};
  const bool direction = *c.spearman_ace <= -0.4;
  const bool ordering = *c.r2_ace >= *c.r2_acc;
  return {direction && ordering && c.teacher_ids.size() >= 10,
          std::to_string(zoo_size) + " teachers x " + std::to_string(seeds) + " seeds, spearman_ace " +
              fmt(*c.spearman_ace) + (direction ? " (ok)" : " (> -0.4)") + ", r2_ace " + fmt(*c.r2_ace) + " vs r2_acc " +
              fmt(*c.r2_acc) + (ordering ? " (ok)" : " (r2_ace < r2_acc)")};
}

Outcome ablation(const std::vector<AblationRow>& rows) {
  const AblationRow* base = nullptr;
  const AblationRow* best = nullptr;
  for (const auto& r : rows) {
    if (r.t_cal == 1.0) base = &r;
    else if (r.t_cal > 1.0 && (best == nullptr || r.mean_accuracy > best->mean_accuracy)) best = &r;
  }
  if (base == nullptr || best == nullptr) return {false, "ablation grid lacks t_cal = 1 or t_cal > 1"};
  const double spread = std::max(base->std_accuracy, best->std_accuracy);
  const double gain = best->mean_accuracy - base->mean_accuracy;
  const bool pass = spread > 0.0 ? gain >= 0.3 * spread : gain > 0.0;
  return {pass, "t_cal=1 mean " + fmt(base->mean_accuracy) + ", best t_cal=" + fmt(best->t_cal) + " mean " +
                    fmt(best->mean_accuracy) + ", gain " + fmt(spread > 0 ? gain / spread : 0.0) + " std (std " +
                    fmt(spread) + ")"};
}

Outcome properties(const std::vector<PropertyRow>& rows) {
  std::string detail;
  bool pass = false;
  for (const auto& r : rows) {
    const bool ratio = r.teacher_plain.ece_over > 0.0 && r.teacher_ece_over_ratio >= 5.0;
    const bool student = r.student_calibrated.ece_over < r.student_plain.ece_over;
    if (!detail.empty()) detail += "; ";
    detail += r.teacher_id + ": teacher ece_over " + fmt(r.teacher_plain.ece_over) + " -> " +
              fmt(r.teacher_calibrated.ece_over) + ", student ece_over " + fmt(r.student_plain.ece_over) + " -> " +
              fmt(r.student_calibrated.ece_over);
    pass = pass || (ratio && student);
  }
  return {pass, rows.empty() ? "no teacher has both none and fixed-T records" : detail};
}

int failures = 0;

void report(int id, const std::string& name, const Outcome& o, double seconds, double limit) {
  const bool in_time = limit <= 0.0 || seconds < limit;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::printf("%s criterion %d (%s): %s [%.1f s%s]\n", pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(),
              seconds, in_time ? "" : ", over time limit");
  std::fflush(stdout);
}

void timed(int id, const std::string& name, double limit, const std::function<Outcome()>& f) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = f();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  report(id, name, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), limit);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "calikd_acceptance";

  timed(1, "metric identities", 10, metric_identities);
  timed(2, "temperature invariance", 5, temperature_invariance);
  timed(3, "decomposition oracle", 10, decomposition_oracle);
  timed(4, "gradient checks", 30, gradient_checks);
  timed(5, "calibrator contracts", 30, calibrator_contracts);

  const Manifest manifest = default_manifest();
  fs::remove_all(out);
  RunSummary first, second;
  try {
    first = run_manifest(manifest, out / "run1", Stages{}, &std::cerr);
  } catch (const std::exception& e) {
    for (int id = 6; id <= 9; ++id) report(id, "benchmark run", {false, std::string("run failed: ") + e.what()}, 0, 0);
    return 1;
  }
  const Json t = read_json(out / "run1" / "timings.json");
  report(6, "teacher ACE predicts student accuracy", fig1(first, manifest.zoo.size(), manifest.seeds.size()),
         timing(t, "teacher_zoo") + timing(t, "correlation"), 15 * 60);
  report(7, "calibration temperature ablation", ablation(first.ablation), timing(t, "ablation"), 10 * 60);
  report(8, "calibrated teacher lowers student overconfidence", properties(first.properties),
         timing(t, "calibrators"), 0);

  timed(9, "determinism", 0, [&] {
    second = run_manifest(manifest, out / "run2", Stages{}, &std::cerr);
    std::string detail;
    bool same = true;
    for (const char* f : {"records.csv", "ablation.csv", "calibrators.csv"}) {
      const bool eq = read_text(out / "run1" / f) == read_text(out / "run2" / f);
      same = same && eq;
      detail += std::string(detail.empty() ? "" : ", ") + f + (eq ? " identical" : " differs");
    }
    return Outcome{same, detail};
  });

  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
