#include "calikd/calib_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "calikd/error.hpp"

namespace calikd {
namespace {

void check_bins(std::size_t bins) {
  if (bins < 1) throw Error(ErrorKind::InvalidBins, "bin count must be at least 1");
}

// Accumulates sums per bin, then converts to means.
struct BinAccumulator {
  std::size_t count = 0;
  double conf_sum = 0.0;
  double acc_sum = 0.0;
};

BinStats finish(const BinAccumulator& a, double lower, double upper) {
  BinStats s;
  s.count = a.count;
  s.lower = lower;
  s.upper = upper;
  if (a.count > 0) {
    s.mean_confidence = a.conf_sum / static_cast<double>(a.count);
    s.mean_accuracy = a.acc_sum / static_cast<double>(a.count);
  }
  return s;
}

std::vector<BinStats> equal_width_group(const ProbMatrix& probs, const LabelVec& labels,
                                        std::size_t m) {
  std::vector<BinAccumulator> acc(m);
  for (std::size_t i = 0; i < probs.n(); ++i) {
    auto row = probs.row(i);
    const std::size_t pred = argmax(row);
    const double conf = row[pred];
    auto& bin = acc[equal_width_bin(conf, m)];
    ++bin.count;
    bin.conf_sum += conf;
    bin.acc_sum += (pred == labels[i]) ? 1.0 : 0.0;
  }
  std::vector<BinStats> out;
  out.reserve(m);
  const double width = 1.0 / static_cast<double>(m);
  for (std::size_t b = 0; b < m; ++b) {
    out.push_back(finish(acc[b], static_cast<double>(b) * width,
                         b + 1 == m ? 1.0 : static_cast<double>(b + 1) * width));
  }
  return out;
}

std::vector<BinStats> equal_count_group(const ProbMatrix& probs, const LabelVec& labels,
                                        std::size_t cls, std::span<const std::size_t> sizes,
                                        std::vector<std::size_t>& order) {
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ca = probs(a, cls);
    const double cb = probs(b, cls);
    return ca < cb || (ca == cb && a < b);
  });
  std::vector<BinStats> out;
  out.reserve(sizes.size());
  std::size_t pos = 0;
  for (std::size_t size : sizes) {
    BinAccumulator a;
    for (std::size_t j = pos; j < pos + size; ++j) {
      const std::size_t i = order[j];
      ++a.count;
      a.conf_sum += probs(i, cls);
      a.acc_sum += (labels[i] == cls) ? 1.0 : 0.0;
    }
    out.push_back(finish(a, probs(order[pos], cls), probs(order[pos + size - 1], cls)));
    pos += size;
  }
  return out;
}

}  // namespace

std::vector<std::size_t> equal_count_sizes(std::size_t n, std::size_t r) {
  check_bins(r);
  if (r > n) {
    throw Error(ErrorKind::InvalidBins, "cannot split " + std::to_string(n) +
                                            " samples into " + std::to_string(r) +
                                            " equal-count bins");
  }
  std::vector<std::size_t> sizes(r, n / r);
  for (std::size_t b = 0; b < n % r; ++b) ++sizes[b];
  return sizes;
}

std::size_t equal_width_bin(double confidence, std::size_t m) noexcept {
  if (!(confidence > 0.0)) return 0;
  const auto b = static_cast<std::size_t>(std::floor(confidence * static_cast<double>(m)));
  return std::min(b, m - 1);
}

BinPartition reliability_bins(const ProbMatrix& probs, const LabelVec& labels, BinSpec spec) {
  check_bins(spec.bins);
  labels.check_against(probs.n(), probs.k());
  BinPartition part;
  part.spec = spec;
  part.n = probs.n();
  if (spec.scheme == BinScheme::EqualWidth) {
    part.groups.push_back(equal_width_group(probs, labels, spec.bins));
    return part;
  }
  const auto sizes = equal_count_sizes(probs.n(), spec.bins);
  std::vector<std::size_t> order(probs.n());
  part.groups.reserve(probs.k());
  for (std::size_t cls = 0; cls < probs.k(); ++cls) {
    part.groups.push_back(equal_count_group(probs, labels, cls, sizes, order));
  }
  return part;
}

double ece_from_bins(const BinPartition& partition) {
  const double n = static_cast<double>(partition.n);
  double total = 0.0;
  for (const auto& bin : partition.groups.front()) {
    if (bin.count == 0) continue;
    total += static_cast<double>(bin.count) / n * std::abs(bin.mean_accuracy - bin.mean_confidence);
  }
  return total;
}

EceParts ece_parts_from_bins(const BinPartition& partition) {
  const double n = static_cast<double>(partition.n);
  EceParts parts;
  for (const auto& bin : partition.groups.front()) {
    if (bin.count == 0) continue;
    const double w = static_cast<double>(bin.count) / n;
    parts.over += w * std::max(bin.mean_confidence - bin.mean_accuracy, 0.0);
    parts.under += w * std::max(bin.mean_accuracy - bin.mean_confidence, 0.0);
  }
  return parts;
}

double ace_from_bins(const BinPartition& partition) {
  double total = 0.0;
  std::size_t cells = 0;
  for (const auto& group : partition.groups) {
    for (const auto& bin : group) {
      total += std::abs(bin.mean_accuracy - bin.mean_confidence);
      ++cells;
    }
  }
  return total / static_cast<double>(cells);
}

double ece(const ProbMatrix& probs, const LabelVec& labels, std::size_t m) {
  return ece_from_bins(reliability_bins(probs, labels, {BinScheme::EqualWidth, m}));
}

EceParts ece_decomposed(const ProbMatrix& probs, const LabelVec& labels, std::size_t m) {
  return ece_parts_from_bins(reliability_bins(probs, labels, {BinScheme::EqualWidth, m}));
}

double ace(const ProbMatrix& probs, const LabelVec& labels, std::size_t r) {
  return ace_from_bins(reliability_bins(probs, labels, {BinScheme::EqualCount, r}));
}

double mean_nll(const ProbMatrix& probs, const LabelVec& labels) {
  labels.check_against(probs.n(), probs.k());
  double total = 0.0;
  for (std::size_t i = 0; i < probs.n(); ++i) {
    total -= std::log(std::max(probs(i, labels[i]), kNllProbabilityFloor));
  }
  return total / static_cast<double>(probs.n());
}

CalibrationReport full_report(const ProbMatrix& probs, const LabelVec& labels, std::size_t m,
                              std::size_t r) {
  const auto width = reliability_bins(probs, labels, {BinScheme::EqualWidth, m});
  const auto parts = ece_parts_from_bins(width);
  CalibrationReport rep;
  rep.ece = ece_from_bins(width);
  rep.ece_over = parts.over;
  rep.ece_under = parts.under;
  rep.ace = ace_from_bins(reliability_bins(probs, labels, {BinScheme::EqualCount, r}));
  rep.accuracy = accuracy(probs, labels);
  rep.nll = mean_nll(probs, labels);
  rep.n = probs.n();
  rep.k = probs.k();
  rep.m_bins = m;
  rep.r_bins = r;
  return rep;
}

}  // namespace calikd
