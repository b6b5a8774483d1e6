#include <doctest.h>

#include <cmath>

#include "calikd/calibrators.hpp"
#include "calikd/error.hpp"
#include "helpers.hpp"

using namespace calikd;

namespace {

struct Sample {
  oracle::Rows logits;
  std::vector<std::size_t> labels;
};

// Labels drawn from softmax(logits), so the logits are calibrated by construction.
Sample calibrated_sample(std::uint64_t seed, std::size_t n, std::size_t k, double spread) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, spread);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Sample s;
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
    s.logits.push_back(z);
    s.labels.push_back(y);
  }
  return s;
}

oracle::Rows scaled(oracle::Rows rows, double f) {
  for (auto& r : rows)
    for (auto& v : r) v *= f;
  return rows;
}

double fitted_t(const Calibrator& c) { return std::get<FittedTemperature>(c.kind()).t; }

}  // namespace

TEST_CASE("temperature calibrators apply tempered softmax") {
  std::mt19937_64 rng(1);
  const LogitMatrix z(testing::random_matrix(rng, 12, 4, 3.0));
  CHECK(Calibrator::fixed(1.0).apply(z).values() == tempered_softmax(z).values());
  CHECK(Calibrator::fixed(2.5).apply(z).values() == tempered_softmax(z, Temperature{2.5}).values());
  CHECK(Calibrator::identity_vector(4).apply(z).values() == tempered_softmax(z).values());
  CHECK(argmax_rows(Calibrator::fixed(0.7).apply(z).values()) == argmax_rows(z.values()));
  CHECK(Calibrator::fixed(1.5).describe() == "fixed-T(1.5)");
  CHECK(FixedTemperature{}.t == 1.5);
}

TEST_CASE("calibrator validation") {
  CHECK_THROWS_AS(Calibrator::fixed(0.0), Error);
  CHECK_THROWS_AS(Calibrator(VectorScaling{{1.0, NAN}, {0.0, 0.0}, {}}), Error);
  CHECK_THROWS_AS(Calibrator(VectorScaling{{1.0}, {0.0, 0.0}, {}}), Error);
  const LogitMatrix z(Matrix::from_rows({{1, 2, 3}}));
  try {
    Calibrator::identity_vector(2).apply(z);
    FAIL("expected ShapeError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeError);
  }
}

TEST_CASE("fit_temperature on calibrated logits stays near one") {
  const auto s = calibrated_sample(7, 4000, 5, 2.0);
  const LogitMatrix z(testing::to_matrix(s.logits));
  const LabelVec y(s.labels);
  const auto c = fit_temperature(z, y);
  const double grid = oracle::grid_temperature(s.logits, s.labels, 0.05, 10.0, 4001);
  CHECK(std::abs(grid - 1.0) < 0.05);
  CHECK(std::abs(fitted_t(c) - grid) < 0.01);
  const auto& fit = std::get<FittedTemperature>(c.kind()).fit;
  CHECK(fit.nll_after <= fit.nll_before + 1e-12);
  CHECK(fit.nll_before == doctest::Approx(oracle::temperature_nll(s.logits, s.labels, 1.0)).epsilon(1e-12));
}

TEST_CASE("fit_temperature recovers an inflation factor") {
  const auto s = calibrated_sample(9, 4000, 5, 2.0);
  const auto inflated = scaled(s.logits, 5.0);
  const LogitMatrix z(testing::to_matrix(inflated));
  const auto c = fit_temperature(z, LabelVec(s.labels), {}, 42);
  const double grid = oracle::grid_temperature(inflated, s.labels, 0.05, 10.0, 4001);
  CHECK(std::abs(grid - 5.0) < 0.25);
  CHECK(std::abs(fitted_t(c) - grid) < 0.02);
  CHECK(std::get<FittedTemperature>(c.kind()).fit.split_seed == 42);
}

TEST_CASE("fit_temperature never worsens NLL") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const auto z = testing::random_matrix(rng, 40, 3, 0.2 + trial * 0.3);
    const auto y = testing::random_labels(rng, 40, 3);
    const LogitMatrix lz(z);
    const auto c = fit_temperature(lz, LabelVec(y));
    CHECK(temperature_nll(lz, LabelVec(y), fitted_t(c)) <= temperature_nll(lz, LabelVec(y), 1.0) + 1e-12);
    CHECK(argmax_rows(c.apply(lz).values()) == argmax_rows(z));
  }
}

TEST_CASE("fit_temperature warns on a single class") {
  const LogitMatrix z(Matrix::from_rows({{2, 0}, {1, 0}, {3, 1}}));
  const auto c = fit_temperature(z, LabelVec({0, 0, 0}));
  const auto& w = std::get<FittedTemperature>(c.kind()).fit.warnings;
  REQUIRE(!w.empty());
  CHECK(w.front().find("FitWarning") != std::string::npos);
}

TEST_CASE("vector scaling at optimal logits stays at identity") {
  const auto s = calibrated_sample(3, 3000, 4, 1.5);
  const LogitMatrix z(testing::to_matrix(s.logits));
  const auto c = fit_vector_scaling(z, LabelVec(s.labels));
  const auto& v = std::get<VectorScaling>(c.kind());
  // The sample optimum sits near identity; the NLL gain is sampling noise.
  CHECK(v.fit.nll_after <= v.fit.nll_before + 1e-12);
  CHECK(v.fit.nll_before - v.fit.nll_after < 5e-3);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(std::abs(v.w[j] - 1.0) < 0.15);
    CHECK(std::abs(v.b[j] - v.b[0]) < 0.15);
  }
}

TEST_CASE("vector scaling at the exact optimum moves by less than 1e-6") {
  // softmax(ln 3, 0) = (3/4, 1/4) and the labels follow those frequencies,
  // so the NLL gradient vanishes at identity.
  const double l3 = std::log(3.0);
  const LogitMatrix z(Matrix::from_rows({{l3, 0}, {l3, 0}, {l3, 0}, {l3, 0}, {0, l3}, {0, l3}, {0, l3}, {0, l3}}));
  const LabelVec y({0, 0, 0, 1, 1, 1, 1, 0});
  const auto c = fit_vector_scaling(z, y);
  const auto& v = std::get<VectorScaling>(c.kind());
  CHECK(std::abs(v.fit.nll_before - v.fit.nll_after) < 1e-6);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(std::abs(v.w[j] - 1.0) < 1e-6);
    CHECK(std::abs(v.b[j]) < 1e-6);
  }
}

TEST_CASE("vector scaling removes a constant class bias") {
  auto s = calibrated_sample(5, 3000, 4, 1.5);
  for (auto& r : s.logits) r[0] += 3.0;
  const LogitMatrix z(testing::to_matrix(s.logits));
  const LabelVec y(s.labels);

  // Oracle: best class-0 offset on a grid with everything else at identity.
  double best_b = 0.0, best = 1e300;
  for (int g = -600; g <= 100; ++g) {
    const double b0 = g * 0.01;
    auto shifted = s.logits;
    for (auto& r : shifted) r[0] += b0;
    const double v0 = oracle::temperature_nll(shifted, s.labels, 1.0);
    if (v0 < best) best = v0, best_b = b0;
  }
  CHECK(std::abs(best_b + 3.0) < 0.25);

  auto relative_b0 = [](const VectorScaling& v) { return v.b[0] - (v.b[1] + v.b[2] + v.b[3]) / 3.0; };

  // Default budget: plain gradient descent is still approaching the optimum.
  const auto c = fit_vector_scaling(z, y);
  const auto& v = std::get<VectorScaling>(c.kind());
  CHECK(relative_b0(v) < -2.5);
  CHECK(v.fit.nll_after < v.fit.nll_before);
  CHECK(v.fit.nll_after < oracle::temperature_nll(s.logits, s.labels, 1.0));

  // Run to convergence: the offset matches the grid oracle.
  const auto long_fit = fit_vector_scaling(z, y, {50000, 0.05});
  CHECK(std::abs(relative_b0(std::get<VectorScaling>(long_fit.kind())) - best_b) < 0.25);
}

TEST_CASE("vector scaling with zero steps is the identity") {
  std::mt19937_64 rng(2);
  const LogitMatrix z(testing::random_matrix(rng, 10, 3));
  const auto c = fit_vector_scaling(z, LabelVec(testing::random_labels(rng, 10, 3)), {0, 0.05});
  const auto& v = std::get<VectorScaling>(c.kind());
  CHECK(v.w == std::vector<double>{1, 1, 1});
  CHECK(v.b == std::vector<double>{0, 0, 0});
  CHECK(c.apply(z).values() == tempered_softmax(z).values());
}

TEST_CASE("vector scaling divergence is reported") {
  std::mt19937_64 rng(2);
  const LogitMatrix z(testing::random_matrix(rng, 10, 3, 5.0));
  try {
    fit_vector_scaling(z, LabelVec(testing::random_labels(rng, 10, 3)), {50, 1e308});
    FAIL("expected FitDiverged");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::FitDiverged);
  }
}
