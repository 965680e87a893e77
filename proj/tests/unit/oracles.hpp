#pragma once

// Straight-line reference formulas used as independent oracles. Written
// without the library helpers (no log_sigmoid, no compensated sums, long
// double throughout).

#include <cmath>
#include <vector>

namespace musc::oracle {

inline long double softplus(long double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

struct Pair {
  std::vector<double> pw, rw, pl, rl, ww, wl;
};

inline long double wsum(const std::vector<double>& p, const std::vector<double>& r,
                        const std::vector<double>& w) {
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const long double wi = w.empty() ? 1.0L : w[i];
    s += wi * (static_cast<long double>(p[i]) - (r.empty() ? 0.0L : r[i]));
  }
  return s;
}

inline double tdpo(const Pair& x, double beta) {
  const long double z = beta * (wsum(x.pw, x.rw, x.ww) - wsum(x.pl, x.rl, x.wl));
  return static_cast<double>(softplus(-z));
}

inline double simpo(const Pair& x, double beta, double gamma) {
  auto mean = [](const std::vector<double>& p, const std::vector<double>& w) {
    long double num = 0, den = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const long double wi = w.empty() ? 1.0L : w[i];
      num += wi * p[i];
      den += wi;
    }
    return num / den;
  };
  const long double z = beta * (mean(x.pw, x.ww) - mean(x.pl, x.wl)) - gamma;
  return static_cast<double>(softplus(-z));
}

inline double ipo(const Pair& x, double beta) {
  const long double h = wsum(x.pw, x.rw, x.ww) - wsum(x.pl, x.rl, x.wl);
  const long double d = h - 1.0L / (2.0L * beta);
  return static_cast<double>(d * d);
}

inline double sft(const Pair& x) {
  long double s = 0;
  for (double v : x.pw) s -= v;
  return static_cast<double>(s / x.pw.size());
}

inline double entropy(const std::vector<double>& probs) {
  long double h = 0;
  for (double p : probs) {
    if (p > 0) h -= p * std::log(static_cast<long double>(p));
  }
  return static_cast<double>(h);
}

}  // namespace musc::oracle
