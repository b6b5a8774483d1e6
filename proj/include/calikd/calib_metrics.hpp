#pragma once

#include <cstddef>
#include <vector>

#include "calikd/prob_core.hpp"

namespace calikd {

inline constexpr std::size_t kDefaultEceBins = 15;
inline constexpr std::size_t kDefaultAceBins = 15;
inline constexpr double kNllProbabilityFloor = 1e-12;

enum class BinScheme {
  /// M bins [0,1/M), [1/M,2/M), ..., [(M-1)/M, 1] over top-label confidence.
  EqualWidth,
  /// R bins of contiguous confidence-sorted samples, built per class.
  EqualCount,
};

struct BinSpec {
  BinScheme scheme = BinScheme::EqualWidth;
  std::size_t bins = kDefaultEceBins;
};

struct BinStats {
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double mean_accuracy = 0.0;
  // EqualWidth: the interval edges. EqualCount: smallest and largest member confidence.
  double lower = 0.0;
  double upper = 0.0;
};

/// Reliability statistics. EqualWidth partitions carry one group (top-label
/// confidence); EqualCount partitions carry one group per class, each built
/// from that class's probability column as ACE prescribes.
struct BinPartition {
  BinSpec spec;
  std::size_t n = 0;
  std::vector<std::vector<BinStats>> groups;
};

struct EceParts {
  double over = 0.0;
  double under = 0.0;
};

struct CalibrationReport {
  double ece = 0.0;
  double ece_over = 0.0;
  double ece_under = 0.0;
  double ace = 0.0;
  double accuracy = 0.0;
  double nll = 0.0;
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t m_bins = kDefaultEceBins;
  std::size_t r_bins = kDefaultAceBins;

  bool operator==(const CalibrationReport&) const = default;
};

/// Bin sizes for an equal-count split of n samples into r bins; the first
/// n mod r bins hold one extra sample.
std::vector<std::size_t> equal_count_sizes(std::size_t n, std::size_t r);

/// Index of the equal-width bin holding `confidence`; the last bin is closed at 1.
std::size_t equal_width_bin(double confidence, std::size_t m) noexcept;

BinPartition reliability_bins(const ProbMatrix& probs, const LabelVec& labels, BinSpec spec);

double ece_from_bins(const BinPartition& partition);
EceParts ece_parts_from_bins(const BinPartition& partition);
double ace_from_bins(const BinPartition& partition);

double ece(const ProbMatrix& probs, const LabelVec& labels, std::size_t m = kDefaultEceBins);
EceParts ece_decomposed(const ProbMatrix& probs, const LabelVec& labels,
                        std::size_t m = kDefaultEceBins);
double ace(const ProbMatrix& probs, const LabelVec& labels, std::size_t r = kDefaultAceBins);

/// Mean -log p(label), with the label probability clamped below at 1e-12.
double mean_nll(const ProbMatrix& probs, const LabelVec& labels);

CalibrationReport full_report(const ProbMatrix& probs, const LabelVec& labels,
                              std::size_t m = kDefaultEceBins, std::size_t r = kDefaultAceBins);

}  // namespace calikd
