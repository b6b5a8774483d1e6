#pragma once

#include <random>
#include <vector>

#include "../oracles.hpp"
#include "calikd/matrix.hpp"
#include "calikd/prob_core.hpp"

namespace testing {

inline calikd::Matrix to_matrix(const oracle::Rows& rows) { return calikd::Matrix::from_rows(rows); }

inline oracle::Rows to_rows(const calikd::Matrix& m) { return m.to_rows(); }

inline calikd::Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  calikd::Matrix m(r, c);
  for (auto& v : m.data()) v = g(rng);
  return m;
}

inline std::vector<std::size_t> random_labels(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  std::vector<std::size_t> out(n);
  for (auto& v : out) v = pick(rng);
  return out;
}

}  // namespace testing
