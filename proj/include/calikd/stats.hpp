#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace calikd {

/// Paired samples (x_i, y_i), n >= 3, all finite.
class PairedSeries {
 public:
  PairedSeries(std::vector<double> x, std::vector<double> y);

  std::span<const double> x() const noexcept { return x_; }
  std::span<const double> y() const noexcept { return y_; }
  std::size_t size() const noexcept { return x_.size(); }

 private:
  std::vector<double> x_;
  std::vector<double> y_;
};

/// Coefficient of determination of the OLS line y ~ x.
double r_squared(const PairedSeries& s);

double pearson(const PairedSeries& s);

/// Pearson correlation of average ranks.
double spearman(const PairedSeries& s);

/// 1-based ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

}  // namespace calikd
