#pragma once

// Independent reference implementations used as test oracles. They favour
// obviousness over speed and share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline std::vector<double> softmax(const std::vector<double>& z, double t = 1.0) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    e[j] = std::exp((z[j] - mx) / t);
    s += e[j];
  }
  for (auto& v : e) v /= s;
  return e;
}

inline std::size_t top(const std::vector<double>& p) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < p.size(); ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

struct Ece {
  double total, over, under;
};

// Straight from the binning definition: bin b holds conf in [b/M, (b+1)/M),
// with conf == 1 going to the last bin.
inline Ece ece(const Rows& probs, const std::vector<std::size_t>& labels, std::size_t m) {
  const double n = static_cast<double>(probs.size());
  Ece out{0, 0, 0};
  for (std::size_t b = 0; b < m; ++b) {
    const double lo = static_cast<double>(b) / static_cast<double>(m);
    const double hi = static_cast<double>(b + 1) / static_cast<double>(m);
    double cnt = 0, conf = 0, acc = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const double c = *std::max_element(probs[i].begin(), probs[i].end());
      const bool in = (c >= lo && c < hi) || (b == m - 1 && c == 1.0);
      if (!in) continue;
      cnt += 1;
      conf += c;
      acc += top(probs[i]) == labels[i] ? 1.0 : 0.0;
    }
    if (cnt == 0) continue;
    const double gap = acc / cnt - conf / cnt;
    out.total += cnt / n * std::abs(gap);
    if (gap < 0) out.over += cnt / n * -gap;
    else out.under += cnt / n * gap;
  }
  return out;
}

inline double ace(const Rows& probs, const std::vector<std::size_t>& labels, std::size_t r) {
  const std::size_t n = probs.size(), k = probs[0].size();
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probs[a][c] < probs[b][c]; });
    std::size_t pos = 0;
    for (std::size_t g = 0; g < r; ++g) {
      const std::size_t size = n / r + (g < n % r ? 1 : 0);
      double conf = 0, acc = 0;
      for (std::size_t s = 0; s < size; ++s, ++pos) {
        conf += probs[order[pos]][c];
        acc += labels[order[pos]] == c ? 1.0 : 0.0;
      }
      total += std::abs(acc / size - conf / size);
    }
  }
  return total / static_cast<double>(k * r);
}

inline double nll(const Rows& probs, const std::vector<std::size_t>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) s -= std::log(std::max(probs[i][labels[i]], 1e-12));
  return s / static_cast<double>(probs.size());
}

inline double temperature_nll(const Rows& logits, const std::vector<std::size_t>& labels, double t) {
  Rows p;
  for (const auto& z : logits) p.push_back(softmax(z, t));
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s -= std::log(p[i][labels[i]]);
  return s / static_cast<double>(p.size());
}

// Dense log-spaced grid search for the NLL-optimal temperature.
inline double grid_temperature(const Rows& logits, const std::vector<std::size_t>& labels,
                               double lo, double hi, std::size_t points) {
  double best_t = 1.0, best = temperature_nll(logits, labels, 1.0);
  for (std::size_t i = 0; i < points; ++i) {
    const double t = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(points - 1));
    const double v = temperature_nll(logits, labels, t);
    if (v < best) {
      best = v;
      best_t = t;
    }
  }
  return best_t;
}

// Plain MLP forward pass on one row: ReLU hidden layers, weights W[l][in][out].
struct Net {
  std::vector<Rows> w;
  std::vector<std::vector<double>> b;
};

inline std::vector<double> forward(const Net& net, std::vector<double> x) {
  for (std::size_t l = 0; l < net.w.size(); ++l) {
    std::vector<double> y(net.b[l]);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < y.size(); ++j) y[j] += x[i] * net.w[l][i][j];
    if (l + 1 < net.w.size())
      for (auto& v : y) v = std::max(v, 0.0);
    x = std::move(y);
  }
  return x;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// Central finite-difference derivative of f at each coordinate of `theta`.
inline std::vector<double> numeric_gradient(std::vector<double> theta,
                                            const std::function<double(const std::vector<double>&)>& f,
                                            double h = 1e-5) {
  std::vector<double> g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    theta[i] = keep + h;
    const double up = f(theta);
    theta[i] = keep - h;
    const double down = f(theta);
    theta[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                             double floor = 1e-8) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline Rows random_probs(std::mt19937_64& rng, std::size_t n, std::size_t k, double sharpness) {
  std::normal_distribution<double> g(0.0, sharpness);
  Rows out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> z(k);
    for (auto& v : z) v = g(rng);
    out.push_back(softmax(z));
  }
  return out;
}

}  // namespace oracle
