#pragma once

// Memorisation measurements. The core functions work on plain data
// (probability rows, correctness bitmaps) so they can be recomputed from
// saved traces; thin overloads take a LanguageModel and a TokenString.
//
// All entropies and divergences are in nats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "memlab/error.hpp"
#include "memlab/language_model.hpp"
#include "memlab/rng.hpp"
#include "memlab/string_lab.hpp"

namespace memlab {

struct CorrectnessBitmap {
  std::vector<std::uint8_t> correct;
  int epoch = 0;

  std::size_t size() const { return correct.size(); }
  std::size_t count() const { return static_cast<std::size_t>(std::count(correct.begin(), correct.end(), 1)); }
};

/// Mean of the bitmap.
inline double accuracy(const CorrectnessBitmap& bitmap) {
  if (bitmap.correct.empty()) throw InvalidArgument("accuracy: empty span");
  return static_cast<double>(bitmap.count()) / static_cast<double>(bitmap.size());
}

inline CorrectnessBitmap correctness(std::span<const TokenId> predictions, std::span<const TokenId> targets,
                                     int epoch = 0) {
  detail::require(predictions.size() == targets.size(), "correctness: length mismatch");
  CorrectnessBitmap b;
  b.epoch = epoch;
  b.correct.resize(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) b.correct[i] = predictions[i] == targets[i] ? 1 : 0;
  return b;
}

/// Greedy correctness over the random span of `s`, with the whole string as input.
inline CorrectnessBitmap correctness(const LanguageModel& model, const TokenString& s, int epoch = 0) {
  const auto pred = model.predict_greedy(s.tokens);
  const auto begin = static_cast<std::ptrdiff_t>(s.span.begin);
  const auto end = static_cast<std::ptrdiff_t>(s.span.end());
  return correctness(std::span<const TokenId>(pred.data() + begin, pred.data() + end), s.random_part(), epoch);
}

/// Greedy correctness from precomputed distributions (rows aligned with `targets`).
inline CorrectnessBitmap correctness(const ProbMatrix& probs, std::span<const TokenId> targets, int epoch = 0) {
  detail::require(static_cast<std::size_t>(probs.rows()) == targets.size(), "correctness: rows/targets mismatch");
  std::vector<TokenId> pred(targets.size());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) pred[static_cast<std::size_t>(i)] = argmax_lowest(probs.row(i));
  return correctness(pred, targets, epoch);
}

/// Mean over positions of the total probability on alphabet tokens.
inline double aggregate_alphabet_prob(const ProbMatrix& probs, const Alphabet& alphabet) {
  detail::require(probs.rows() > 0, "aggregate_alphabet_prob: no positions");
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double mass = 0.0;
    for (TokenId t : alphabet.tokens) mass += probs(i, t);
    total += mass;
  }
  return total / static_cast<double>(probs.rows());
}

struct AveragedMetric {
  double value = 0.0;
  std::size_t flagged = 0;  // positions skipped (entropy) or clamped (KLD)
};

/// Per-position entropy of P_M over the alphabet, averaged. With
/// `renormalize`, P_M is restricted to the alphabet and renormalised first;
/// positions with zero alphabet mass are skipped and counted.
inline AveragedMetric mean_alphabet_entropy(const ProbMatrix& probs, const Alphabet& alphabet, bool renormalize = true) {
  AveragedMetric out;
  double total = 0.0;
  std::size_t used = 0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double mass = 0.0;
    for (TokenId t : alphabet.tokens) mass += probs(i, t);
    if (!(mass > 0.0)) {
      ++out.flagged;
      continue;
    }
    const double z = renormalize ? mass : 1.0;
    double h = 0.0;
    for (TokenId t : alphabet.tokens) {
      const double p = probs(i, t) / z;
      if (p > 0.0) h -= p * std::log(p);
    }
    total += h;
    ++used;
  }
  if (used == 0) throw UndefinedResult("mean_alphabet_entropy: no position has mass on the alphabet");
  out.value = total / static_cast<double>(used);
  return out;
}

inline constexpr double kKldClamp = 1e-12;

/// Mean over positions of D_KL(P_A || P~_M), P~_M the model restricted to the
/// alphabet and renormalised. Zero model mass is clamped to 1e-12 and flagged.
inline AveragedMetric kld_from_true(const ProbMatrix& probs, const Alphabet& alphabet) {
  detail::require(probs.rows() > 0, "kld_from_true: no positions");
  AveragedMetric out;
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    double mass = 0.0;
    for (TokenId t : alphabet.tokens) mass += probs(i, t);
    bool clamped = false;
    double kl = 0.0;
    for (std::size_t a = 0; a < alphabet.tokens.size(); ++a) {
      const double pa = alphabet.probs[a];
      if (pa <= 0.0) continue;
      double q = mass > 0.0 ? probs(i, alphabet.tokens[a]) / mass : 0.0;
      if (q < kKldClamp) {
        q = kKldClamp;
        clamped = true;
      }
      kl += pa * std::log(pa / q);
    }
    if (clamped) ++out.flagged;
    total += kl;
  }
  out.value = total / static_cast<double>(probs.rows());
  return out;
}

/// Rows of the model's distributions that belong to the random span of s.
inline ProbMatrix span_distributions(const LanguageModel& model, const TokenString& s) {
  ProbMatrix p = model.distributions(s.tokens);
  return p.middleRows(static_cast<Eigen::Index>(s.span.begin), static_cast<Eigen::Index>(s.span.length));
}

inline double aggregate_alphabet_prob(const LanguageModel& model, const TokenString& s) {
  return aggregate_alphabet_prob(span_distributions(model, s), s.alphabet);
}

inline AveragedMetric mean_alphabet_entropy(const LanguageModel& model, const TokenString& s, bool renormalize = true) {
  return mean_alphabet_entropy(span_distributions(model, s), s.alphabet, renormalize);
}

inline AveragedMetric kld_from_true(const LanguageModel& model, const TokenString& s) {
  return kld_from_true(span_distributions(model, s), s.alphabet);
}

// ---------------------------------------------------------------------------
// Memorisation order

inline constexpr int kNeverMemorised = -1;

struct MemorisationEpochs {
  std::vector<int> initial;  // first recorded epoch predicted correctly
  std::vector<int> stable;   // first recorded epoch from which it stays correct
};

/// Bitmaps must be ordered by epoch; epoch labels come from the bitmaps.
inline MemorisationEpochs memorisation_epochs(std::span<const CorrectnessBitmap> bitmaps) {
  detail::require(!bitmaps.empty(), "memorisation_epochs: no bitmaps");
  const std::size_t n = bitmaps.front().size();
  for (const auto& b : bitmaps) detail::require(b.size() == n, "memorisation_epochs: bitmap lengths differ");
  MemorisationEpochs out;
  out.initial.assign(n, kNeverMemorised);
  out.stable.assign(n, kNeverMemorised);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& b : bitmaps) {
      if (b.correct[i]) {
        out.initial[i] = b.epoch;
        break;
      }
    }
    // Walk back from the last epoch while still correct.
    for (std::size_t e = bitmaps.size(); e-- > 0;) {
      if (!bitmaps[e].correct[i]) break;
      out.stable[i] = bitmaps[e].epoch;
    }
  }
  return out;
}

/// Ranks starting at 1; ties share their average rank.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && xs[order[j]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  detail::require(xs.size() == ys.size() && xs.size() >= 2, "pearson: need equal lengths >= 2");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedResult("correlation undefined: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman_rank(std::span<const double> xs, std::span<const double> ys) {
  detail::require(xs.size() == ys.size() && xs.size() >= 2, "spearman_rank: need equal lengths >= 2");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

struct PositionCorrelation {
  double rho = 0.0;
  std::size_t excluded = 0;  // never-memorised positions left out
};

/// Spearman(position, memorisation epoch), excluding sentinel positions.
inline PositionCorrelation position_epoch_correlation(std::span<const int> epochs) {
  std::vector<double> pos, ep;
  PositionCorrelation out;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    if (epochs[i] == kNeverMemorised) {
      ++out.excluded;
      continue;
    }
    pos.push_back(static_cast<double>(i));
    ep.push_back(static_cast<double>(epochs[i]));
  }
  out.rho = spearman_rank(pos, ep);
  return out;
}

struct DiscrepancyOptions {
  std::size_t window = 20;
  std::size_t num_positions = 50;
  std::size_t samples = 100;
  std::uint64_t seed = 0;
};

/// Windowed difference between the correctness pattern and a random pattern
/// with the same number of ones, averaged over sampled window starts.
///
/// Each sample draws c_rand (exactly N_correct ones placed uniformly) and then
/// `num_positions` window starts uniformly from [0, n - window]; the sample
/// value is the mean over starts of (1/window) * sum(bitmap - c_rand) across
/// the window. The result is the mean over samples.
inline double discrepancy(const CorrectnessBitmap& bitmap, const DiscrepancyOptions& opt = {}) {
  const std::size_t n = bitmap.size();
  const std::size_t k = opt.window;
  detail::require(k >= 1 && k <= n, "discrepancy: window must fit the string");
  detail::require(opt.num_positions >= 1 && opt.samples >= 1, "discrepancy: need positions and samples");
  const std::size_t n_correct = bitmap.count();
  Rng rng(opt.seed);
  std::vector<std::size_t> perm(n);
  std::vector<std::uint8_t> c_rand(n);
  // Prefix sums of (bitmap - c_rand) make each window O(1).
  std::vector<long> prefix(n + 1);
  double total = 0.0;
  for (std::size_t s = 0; s < opt.samples; ++s) {
    std::iota(perm.begin(), perm.end(), 0);
    // Partial Fisher-Yates: the first n_correct entries are the chosen positions.
    for (std::size_t i = 0; i < n_correct; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(perm[i], perm[j]);
    }
    std::fill(c_rand.begin(), c_rand.end(), 0);
    for (std::size_t i = 0; i < n_correct; ++i) c_rand[perm[i]] = 1;
    prefix[0] = 0;
    for (std::size_t i = 0; i < n; ++i)
      prefix[i + 1] = prefix[i] + static_cast<long>(bitmap.correct[i]) - static_cast<long>(c_rand[i]);
    double sample = 0.0;
    for (std::size_t p = 0; p < opt.num_positions; ++p) {
      const std::size_t start = static_cast<std::size_t>(rng.below(n - k + 1));
      sample += static_cast<double>(prefix[start + k] - prefix[start]) / static_cast<double>(k);
    }
    total += sample / static_cast<double>(opt.num_positions);
  }
  return total / static_cast<double>(opt.samples);
}

/// Fraction of start positions i in [0, n - window] whose next `window`
/// teacher-forced greedy predictions are all correct.
inline double contiguous_recall(const CorrectnessBitmap& bitmap, std::size_t window = 50) {
  const std::size_t n = bitmap.size();
  if (window == 0 || n < window) throw InvalidArgument("contiguous_recall: string shorter than window");
  std::size_t run = 0, hits = 0;
  // run = length of the all-correct streak ending at i.
  for (std::size_t i = 0; i < n; ++i) {
    run = bitmap.correct[i] ? run + 1 : 0;
    if (run >= window) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n - window + 1);
}

inline double contiguous_recall(const LanguageModel& model, const TokenString& s, std::size_t window = 50) {
  return contiguous_recall(correctness(model, s), window);
}

/// Per-position alphabet mass, smoothed by a trailing moving average;
/// output length n - window + 1.
inline std::vector<double> in_context_profile(const ProbMatrix& probs, const Alphabet& alphabet, std::size_t window = 50) {
  const auto n = static_cast<std::size_t>(probs.rows());
  if (window == 0 || n < window) throw InvalidArgument("in_context_profile: string shorter than window");
  std::vector<double> mass(n);
  for (std::size_t i = 0; i < n; ++i) {
    double m = 0.0;
    for (TokenId t : alphabet.tokens) m += probs(static_cast<Eigen::Index>(i), t);
    mass[i] = m;
  }
  std::vector<double> out(n - window + 1);
  double acc = std::accumulate(mass.begin(), mass.begin() + static_cast<std::ptrdiff_t>(window), 0.0);
  out[0] = acc / static_cast<double>(window);
  for (std::size_t i = window; i < n; ++i) {
    acc += mass[i] - mass[i - window];
    out[i - window + 1] = acc / static_cast<double>(window);
  }
  return out;
}

inline std::vector<double> in_context_profile(const LanguageModel& model, const TokenString& s, std::size_t window = 50) {
  return in_context_profile(span_distributions(model, s), s.alphabet, window);
}

}  // namespace memlab
