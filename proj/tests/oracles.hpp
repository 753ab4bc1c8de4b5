#pragma once

// Brute-force reference implementations used by the tests. Written for
// obviousness, not speed, and independent of the library code they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "memlab/rng.hpp"

namespace oracle {

inline long double entropy(const std::vector<double>& p) {
  long double h = 0.0L;
  for (double x : p)
    if (x > 0.0) h -= static_cast<long double>(x) * std::log(static_cast<long double>(x));
  return h;
}

/// Row-wise KL(P_A || model restricted to alphabet, renormalised), averaged.
inline long double mean_kld(const std::vector<std::vector<double>>& rows, const std::vector<int>& alphabet,
                            const std::vector<double>& pa) {
  long double total = 0.0L;
  for (const auto& row : rows) {
    long double mass = 0.0L;
    for (int t : alphabet) mass += row[static_cast<std::size_t>(t)];
    long double kl = 0.0L;
    for (std::size_t a = 0; a < alphabet.size(); ++a) {
      if (pa[a] == 0.0) continue;
      const long double q = row[static_cast<std::size_t>(alphabet[a])] / mass;
      kl += pa[a] * std::log(pa[a] / q);
    }
    total += kl;
  }
  return total / static_cast<long double>(rows.size());
}

/// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
inline std::vector<double> ranks(const std::vector<double>& xs) {
  std::vector<double> r(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double less = 0, equal = 0;
    for (double y : xs) {
      if (y < xs[i]) ++less;
      if (y == xs[i]) ++equal;
    }
    r[i] = 1.0 + less + (equal - 1.0) / 2.0;
  }
  return r;
}

inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  const auto rx = ranks(xs), ry = ranks(ys);
  const double n = static_cast<double>(xs.size());
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) mx += rx[i], my += ry[i];
  mx /= n;
  my /= n;
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

/// Checks every window separately.
inline double contiguous_recall(const std::vector<std::uint8_t>& c, std::size_t w) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i + w <= c.size(); ++i) {
    bool all = true;
    for (std::size_t j = i; j < i + w; ++j) all = all && c[j];
    hits += all ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(c.size() - w + 1);
}

/// Discrepancy by direct window sums, consuming the generator in the
/// documented order: per sample, a partial Fisher-Yates choosing the correct
/// positions of c_rand, then the window starts.
inline double discrepancy(const std::vector<std::uint8_t>& c, std::size_t k, std::size_t positions, std::size_t samples,
                          std::uint64_t seed) {
  const std::size_t n = c.size();
  std::size_t ones = 0;
  for (auto b : c) ones += b;
  memlab::Rng rng(seed);
  long double total = 0.0L;
  for (std::size_t s = 0; s < samples; ++s) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < ones; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    std::vector<int> rnd(n, 0);
    for (std::size_t i = 0; i < ones; ++i) rnd[idx[i]] = 1;
    long double sample = 0.0L;
    for (std::size_t p = 0; p < positions; ++p) {
      const std::size_t start = rng.below(n - k + 1);
      long double d = 0.0L;
      for (std::size_t j = start; j < start + k; ++j) d += static_cast<int>(c[j]) - rnd[j];
      sample += d / static_cast<long double>(k);
    }
    total += sample / static_cast<long double>(positions);
  }
  return static_cast<double>(total / static_cast<long double>(samples));
}

/// Exact expectation of the discrepancy over the random pattern and starts.
inline double discrepancy_expectation(const std::vector<std::uint8_t>& c, std::size_t k) {
  const std::size_t n = c.size();
  double ones = 0;
  for (auto b : c) ones += b;
  long double acc = 0.0L;
  for (std::size_t s = 0; s + k <= n; ++s) {
    long double w = 0;
    for (std::size_t j = s; j < s + k; ++j) w += c[j];
    acc += w / k;
  }
  return static_cast<double>(acc / (n - k + 1)) - ones / n;
}

/// Entropy of the one-token-oversampled distribution.
inline long double oversampled_entropy(int ell, long double p) {
  long double h = p > 0 ? -p * std::log(p) : 0.0L;
  const long double q = (1.0L - p) / (ell - 1);
  if (q > 0) h -= (ell - 1) * q * std::log(q);
  return h;
}

/// Bisection on the decreasing branch p in [1/ell, 1], to width 1e-15.
inline double oversample_root(int ell, double target) {
  long double lo = 1.0L / ell, hi = 1.0L;
  while (hi - lo > 1e-15L) {
    const long double mid = 0.5L * (lo + hi);
    if (oversampled_entropy(ell, mid) > target) lo = mid;
    else hi = mid;
  }
  return static_cast<double>(0.5L * (lo + hi));
}

/// Regularised upper incomplete gamma Q(a, x): series for x < a + 1, else a
/// continued fraction (Lentz).
inline double gamma_q(double a, double x) {
  if (x <= 0) return 1.0;
  const double lg = std::lgamma(a);
  if (x < a + 1.0) {
    double sum = 1.0 / a, term = sum;
    for (int n = 1; n < 100000; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-16) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - lg);
  }
  double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
  for (int i = 1; i < 100000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - lg) * h;
}

/// Goodness-of-fit p-value for observed counts against expected probabilities.
inline double chi_square_p(const std::vector<double>& counts, const std::vector<double>& probs) {
  double n = 0;
  for (double c : counts) n += c;
  double stat = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double e = n * probs[i];
    stat += (counts[i] - e) * (counts[i] - e) / e;
  }
  return gamma_q(0.5 * static_cast<double>(counts.size() - 1), 0.5 * stat);
}

/// Two-sample homogeneity p-value for two count vectors over the same categories.
inline double chi_square_homogeneity_p(const std::vector<double>& a, const std::vector<double>& b) {
  double na = 0, nb = 0;
  for (double x : a) na += x;
  for (double x : b) nb += x;
  double stat = 0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double col = a[i] + b[i];
    if (col == 0) continue;
    ++used;
    const double ea = col * na / (na + nb), eb = col * nb / (na + nb);
    stat += (a[i] - ea) * (a[i] - ea) / ea + (b[i] - eb) * (b[i] - eb) / eb;
  }
  return gamma_q(0.5 * static_cast<double>(used - 1), 0.5 * stat);
}

}  // namespace oracle
