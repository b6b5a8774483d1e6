#include "calikd/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "calikd/error.hpp"

namespace calikd {
namespace {

struct Moments {
  double sxx = 0.0;
  double syy = 0.0;
  double sxy = 0.0;
};

Moments centered_moments(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  Moments m;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    m.sxx += dx * dx;
    m.syy += dy * dy;
    m.sxy += dx * dy;
  }
  return m;
}

double correlation(std::span<const double> x, std::span<const double> y) {
  const auto m = centered_moments(x, y);
  if (!(m.sxx > 0.0) || !(m.syy > 0.0)) {
    throw Error(ErrorKind::DegenerateSeries, "correlation of a constant series is undefined");
  }
  return std::clamp(m.sxy / std::sqrt(m.sxx * m.syy), -1.0, 1.0);
}

}  // namespace

PairedSeries::PairedSeries(std::vector<double> x, std::vector<double> y)
    : x_(std::move(x)), y_(std::move(y)) {
  if (x_.size() != y_.size()) throw Error(ErrorKind::ShapeError, "paired series lengths differ");
  if (x_.size() < 3) throw Error(ErrorKind::DegenerateSeries, "paired series needs n >= 3");
  auto finite = [](double v) { return std::isfinite(v); };
  if (!std::all_of(x_.begin(), x_.end(), finite) || !std::all_of(y_.begin(), y_.end(), finite)) {
    throw Error(ErrorKind::InvalidInput, "paired series contains a non-finite value");
  }
}

double r_squared(const PairedSeries& s) {
  const auto m = centered_moments(s.x(), s.y());
  if (!(m.sxx > 0.0)) throw Error(ErrorKind::DegenerateSeries, "x is constant; OLS slope undefined");
  if (!(m.syy > 0.0)) throw Error(ErrorKind::DegenerateSeries, "y is constant; R^2 undefined");
  // SS_res = Syy - Sxy^2 / Sxx for the OLS line.
  const double ss_res = m.syy - m.sxy * m.sxy / m.sxx;
  return std::clamp(1.0 - ss_res / m.syy, 0.0, 1.0);
}

double pearson(const PairedSeries& s) { return correlation(s.x(), s.y()); }

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(const PairedSeries& s) {
  const auto rx = average_ranks(s.x());
  const auto ry = average_ranks(s.y());
  return correlation(rx, ry);
}

}  // namespace calikd
