#include "calikd/calibrators.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "calikd/error.hpp"

namespace calikd {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

bool single_class(const LabelVec& labels) {
  auto v = labels.values();
  return std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) == v.end();
}

double vector_nll(const LogitMatrix& logits, const LabelVec& labels, const std::vector<double>& w,
                  const std::vector<double>& b, Matrix* grad_logits) {
  const std::size_t k = logits.k();
  std::vector<double> z(k), logp(k);
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(logits.n());
  for (std::size_t i = 0; i < logits.n(); ++i) {
    auto row = logits.row(i);
    for (std::size_t j = 0; j < k; ++j) z[j] = w[j] * row[j] + b[j];
    detail::log_softmax_row(z, 1.0, logp);
    total -= logp[labels[i]];
    if (grad_logits != nullptr) {
      auto g = grad_logits->row(i);
      for (std::size_t j = 0; j < k; ++j) g[j] = std::exp(logp[j]) * inv_n;
      g[labels[i]] -= inv_n;
    }
  }
  return total * inv_n;
}

}  // namespace

Calibrator::Calibrator(Kind kind) : kind_(std::move(kind)) {
  std::visit(overloaded{
                 [](const FixedTemperature& f) { (void)Temperature{f.t}; },
                 [](const FittedTemperature& f) { (void)Temperature{f.t}; },
                 [](const VectorScaling& v) {
                   if (v.w.size() != v.b.size() || v.w.size() < 2) {
                     throw Error(ErrorKind::ShapeError,
                                 "vector scaling needs matching w and b of length K >= 2");
                   }
                   auto finite = [](double x) { return std::isfinite(x); };
                   if (!std::all_of(v.w.begin(), v.w.end(), finite) ||
                       !std::all_of(v.b.begin(), v.b.end(), finite)) {
                     throw Error(ErrorKind::InvalidInput, "vector scaling parameters must be finite");
                   }
                 },
             },
             kind_);
}

Calibrator Calibrator::identity_vector(std::size_t k) {
  return Calibrator(VectorScaling{std::vector<double>(k, 1.0), std::vector<double>(k, 0.0), {}});
}

std::string Calibrator::kind_name() const {
  return std::visit(overloaded{
                        [](const FixedTemperature&) { return std::string("FixedTemperature"); },
                        [](const FittedTemperature&) { return std::string("FittedTemperature"); },
                        [](const VectorScaling&) { return std::string("VectorScaling"); },
                    },
                    kind_);
}

std::string Calibrator::describe() const {
  return std::visit(
      overloaded{
          [](const FixedTemperature& f) { return "fixed-T(" + format_double(f.t) + ")"; },
          [](const FittedTemperature& f) { return "fitted-T(" + format_double(f.t) + ")"; },
          [](const VectorScaling&) { return std::string("vector-scaling"); },
      },
      kind_);
}

double Calibrator::temperature() const noexcept {
  return std::visit(overloaded{
                        [](const FixedTemperature& f) { return f.t; },
                        [](const FittedTemperature& f) { return f.t; },
                        [](const VectorScaling&) { return 1.0; },
                    },
                    kind_);
}

LogitMatrix Calibrator::transform_logits(const LogitMatrix& logits) const {
  const auto* vs = std::get_if<VectorScaling>(&kind_);
  if (vs == nullptr) return logits;
  if (vs->w.size() != logits.k()) {
    throw Error(ErrorKind::ShapeError, "calibrator class count does not match logits");
  }
  Matrix out(logits.n(), logits.k());
  for (std::size_t i = 0; i < logits.n(); ++i) {
    auto src = logits.row(i);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < logits.k(); ++j) dst[j] = vs->w[j] * src[j] + vs->b[j];
  }
  return LogitMatrix(std::move(out));
}

ProbMatrix Calibrator::apply(const LogitMatrix& logits) const {
  if (std::holds_alternative<VectorScaling>(kind_)) {
    return tempered_softmax(transform_logits(logits), Temperature{1.0});
  }
  return tempered_softmax(logits, Temperature{temperature()});
}

double temperature_nll(const LogitMatrix& logits, const LabelVec& labels, double t) {
  labels.check_against(logits.n(), logits.k());
  const double inv_t = 1.0 / Temperature{t}.value();
  std::vector<double> logp(logits.k());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.n(); ++i) {
    detail::log_softmax_row(logits.row(i), inv_t, logp);
    total -= logp[labels[i]];
  }
  return total / static_cast<double>(logits.n());
}

Calibrator fit_temperature(const LogitMatrix& logits, const LabelVec& labels,
                           TemperatureSearch search, std::uint64_t split_seed) {
  labels.check_against(logits.n(), logits.k());
  if (!(search.lo > 0.0 && search.hi > search.lo && search.tol > 0.0) || search.lo > 1.0 ||
      search.hi < 1.0) {
    throw Error(ErrorKind::InvalidConfig, "temperature search interval must contain 1 and be ordered");
  }
  FitMetadata meta;
  meta.split_seed = split_seed;
  if (single_class(labels)) meta.warnings.emplace_back("FitWarning: labels contain a single class");

  auto f = [&](double u) { return temperature_nll(logits, labels, std::exp(u)); };
  const double lo = std::log(search.lo);
  const double hi = std::log(search.hi);

  // Golden-section on u = log t.
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > search.tol) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  double best_u = 0.5 * (a + b);
  double best_f = f(best_u);

  // Bracket check: a unimodal objective cannot have a smaller value at the
  // ends or at t = 1 than at the golden-section optimum.
  const double f_lo = f(lo), f_hi = f(hi), f_one = f(0.0);
  if (best_f > std::min({f_lo, f_hi, f_one})) {
    meta.warnings.emplace_back("golden-section bracket check failed; dense grid used");
    constexpr int kGrid = 2001;
    for (int g = 0; g < kGrid; ++g) {
      const double u = lo + (hi - lo) * static_cast<double>(g) / (kGrid - 1);
      const double fu = f(u);
      if (fu < best_f) {
        best_f = fu;
        best_u = u;
      }
    }
  }

  // Local grid refinement around the optimum.
  constexpr int kLocal = 10;
  for (int g = -kLocal; g <= kLocal; ++g) {
    const double u = std::clamp(best_u + search.tol * g / kLocal, lo, hi);
    const double fu = f(u);
    if (fu < best_f) {
      best_f = fu;
      best_u = u;
    }
  }

  double t = std::exp(best_u);
  if (!(best_f <= f_one)) {
    t = 1.0;
    best_f = f_one;
  }
  meta.nll_before = f_one;
  meta.nll_after = best_f;
  return Calibrator(FittedTemperature{t, std::move(meta)});
}

Calibrator fit_vector_scaling(const LogitMatrix& logits, const LabelVec& labels,
                              VectorScalingOptions options, std::uint64_t split_seed) {
  labels.check_against(logits.n(), logits.k());
  const std::size_t k = logits.k();
  FitMetadata meta;
  meta.split_seed = split_seed;
  if (single_class(labels)) meta.warnings.emplace_back("FitWarning: labels contain a single class");

  std::vector<double> w(k, 1.0), b(k, 0.0);
  std::vector<double> best_w = w, best_b = b;
  Matrix grad(logits.n(), k);
  double loss = vector_nll(logits, labels, w, b, &grad);
  meta.nll_before = loss;
  double best = loss;

  std::vector<double> gw(k), gb(k);
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < logits.n(); ++i) {
      auto g = grad.row(i);
      auto z = logits.row(i);
      for (std::size_t j = 0; j < k; ++j) {
        gw[j] += g[j] * z[j];
        gb[j] += g[j];
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (!std::isfinite(gw[j]) || !std::isfinite(gb[j])) {
        throw Error(ErrorKind::FitDiverged, "vector scaling gradient became non-finite at step " +
                                                std::to_string(step));
      }
      w[j] -= options.lr * gw[j];
      b[j] -= options.lr * gb[j];
    }
    loss = vector_nll(logits, labels, w, b, &grad);
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::FitDiverged, "vector scaling loss became non-finite at step " +
                                              std::to_string(step));
    }
    if (loss < best) {
      best = loss;
      best_w = w;
      best_b = b;
    }
  }
  meta.nll_after = best;
  return Calibrator(VectorScaling{std::move(best_w), std::move(best_b), std::move(meta)});
}

}  // namespace calikd
