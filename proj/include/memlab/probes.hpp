#pragma once

// Local-prefix / global-context probes.
//
// For a target position p of the random string, the k tokens right before p
// (the local prefix) are kept and everything before them (the global
// context) is replaced by sampled tokens, optionally resized. A position
// counts as recollected when the true token is the strict plurality of the
// greedy predictions across samples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "memlab/language_model.hpp"
#include "memlab/rng.hpp"
#include "memlab/string_lab.hpp"

namespace memlab {

enum class ProbePolicy { random_policy, constant_policy };

inline const char* to_string(ProbePolicy p) {
  return p == ProbePolicy::random_policy ? "random" : "constant";
}

inline ProbePolicy probe_policy_from_string(const std::string& s) {
  if (s == "random" || s == "random_policy") return ProbePolicy::random_policy;
  if (s == "constant" || s == "constant_policy") return ProbePolicy::constant_policy;
  throw InvalidArgument("unknown probe policy: " + s);
}

/// Prefix length meaning "everything before the position": nothing is replaced.
inline constexpr int kFullPrefix = -1;

inline bool valid_gc_scale(double g) {
  return g == 0.0 || g == 0.5 || g == 1.0 || g == 1.5 || g == 2.0;
}

struct ProbeSpec {
  std::vector<int> prefix_lengths{1, 2, 4, 8, 16, 32, 64, 128};
  std::vector<ProbePolicy> policies{ProbePolicy::random_policy};
  std::vector<double> gc_scales{1.0};
  int samples_per_position = 10;
  /// Subsample this many positions of the random span; nullopt probes all.
  std::optional<std::size_t> subsample;
  std::uint64_t position_seed = 0;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(!prefix_lengths.empty(), "probe spec needs at least one prefix length");
    for (int k : prefix_lengths) detail::require(k >= 1 || k == kFullPrefix, "probe prefix length must be >= 1");
    detail::require(!policies.empty(), "probe spec needs at least one policy");
    detail::require(!gc_scales.empty(), "probe spec needs at least one gc_scale");
    for (double g : gc_scales) detail::require(valid_gc_scale(g), "gc_scale must be one of 0, 0.5, 1, 1.5, 2");
    detail::require(samples_per_position >= 1, "samples_per_position must be >= 1");
    if (subsample) detail::require(*subsample >= 1, "subsample count must be >= 1");
  }
};

struct ProbeOutcome {
  bool skipped = false;
  bool correct = false;
  std::size_t position = 0;  // index into the random span
  TokenId target = 0;
  std::map<TokenId, int> votes;
};

/// Length of the replacement global context; non-integer lengths round down.
inline std::size_t scaled_context_length(std::size_t original, double gc_scale) {
  return static_cast<std::size_t>(std::floor(gc_scale * static_cast<double>(original)));
}

/// Probe one position. `i` indexes the random span of `s`; `k` is the local
/// prefix length or kFullPrefix.
inline ProbeOutcome probe_position(const LanguageModel& model, const TokenString& s, std::size_t i, int k,
                                   ProbePolicy policy, double gc_scale, int samples, std::uint64_t seed) {
  detail::require(i < s.span.length, "probe position outside the random span");
  detail::require(samples >= 1, "samples must be >= 1");
  detail::require(k >= 1 || k == kFullPrefix, "probe prefix length must be >= 1");
  detail::require(valid_gc_scale(gc_scale), "gc_scale must be one of 0, 0.5, 1, 1.5, 2");
  ProbeOutcome out;
  out.position = i;
  const std::size_t p = s.span.begin + i;
  out.target = s.tokens[p];
  const std::size_t local = k == kFullPrefix ? p : static_cast<std::size_t>(k);
  if (local > p) {
    out.skipped = true;
    return out;
  }
  const std::size_t global = p - local;
  const std::size_t repl = scaled_context_length(global, gc_scale);
  if (repl + local > model.max_context()) {
    out.skipped = true;
    return out;
  }

  std::vector<TokenId> input(repl + local);
  std::copy(s.tokens.begin() + static_cast<std::ptrdiff_t>(p - local), s.tokens.begin() + static_cast<std::ptrdiff_t>(p),
            input.begin() + static_cast<std::ptrdiff_t>(repl));
  const Alphabet& a = s.alphabet;
  if (repl == 0) {
    // Nothing to resample: every sample sees the same input.
    out.votes[model.predict_next(input)] = samples;
  } else {
    Rng rng(seed);
    for (int j = 0; j < samples; ++j) {
      if (policy == ProbePolicy::random_policy) {
        for (std::size_t t = 0; t < repl; ++t) input[t] = a.tokens[rng.categorical(a.probs)];
      } else {
        const TokenId c = a.tokens[rng.categorical(a.probs)];
        std::fill(input.begin(), input.begin() + static_cast<std::ptrdiff_t>(repl), c);
      }
      ++out.votes[model.predict_next(input)];
    }
  }
  int mine = 0, best_other = 0;
  for (const auto& [tok, n] : out.votes) {
    if (tok == out.target) mine = n;
    else best_other = std::max(best_other, n);
  }
  out.correct = mine > best_other;
  return out;
}

struct ProbeCell {
  int k = 1;
  ProbePolicy policy = ProbePolicy::random_policy;
  double gc_scale = 1.0;
  /// NaN when every position was skipped.
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  std::size_t positions_counted = 0;
  std::size_t positions_skipped = 0;
  std::vector<ProbeOutcome> outcomes;

  bool defined() const { return positions_counted > 0; }
};

struct ProbeReport {
  std::vector<std::size_t> positions;
  int samples_per_position = 0;
  std::uint64_t seed = 0;
  std::vector<ProbeCell> cells;

  const ProbeCell& cell(int k, ProbePolicy policy, double gc_scale) const {
    for (const auto& c : cells)
      if (c.k == k && c.policy == policy && c.gc_scale == gc_scale) return c;
    throw InvalidArgument("probe report has no such cell");
  }
};

/// Sorted positions of the random span to probe.
inline std::vector<std::size_t> probe_positions(std::size_t span_length, std::optional<std::size_t> subsample,
                                                std::uint64_t seed) {
  std::vector<std::size_t> all(span_length);
  for (std::size_t i = 0; i < span_length; ++i) all[i] = i;
  if (!subsample || *subsample >= span_length) return all;
  Rng rng(seed);
  for (std::size_t i = 0; i < *subsample; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(span_length - i));
    std::swap(all[i], all[j]);
  }
  all.resize(*subsample);
  std::sort(all.begin(), all.end());
  return all;
}

inline ProbeReport probe_sweep(const LanguageModel& model, const TokenString& s, const ProbeSpec& spec) {
  spec.validate();
  ProbeReport rep;
  rep.positions = probe_positions(s.span.length, spec.subsample, spec.position_seed);
  rep.samples_per_position = spec.samples_per_position;
  rep.seed = spec.seed;
  for (int k : spec.prefix_lengths)
    for (ProbePolicy pol : spec.policies)
      for (double g : spec.gc_scales) {
        ProbeCell cell;
        cell.k = k;
        cell.policy = pol;
        cell.gc_scale = g;
        std::size_t hits = 0;
        for (std::size_t i : rep.positions) {
          const std::uint64_t sd = derive_seed(spec.seed, {i, static_cast<std::uint64_t>(static_cast<std::int64_t>(k)),
                                                           static_cast<std::uint64_t>(pol),
                                                           static_cast<std::uint64_t>(g * 2.0)});
          ProbeOutcome o = probe_position(model, s, i, k, pol, g, spec.samples_per_position, sd);
          if (o.skipped) {
            ++cell.positions_skipped;
          } else {
            ++cell.positions_counted;
            hits += o.correct ? 1 : 0;
          }
          cell.outcomes.push_back(std::move(o));
        }
        if (cell.positions_counted > 0)
          cell.accuracy = static_cast<double>(hits) / static_cast<double>(cell.positions_counted);
        rep.cells.push_back(std::move(cell));
      }
  return rep;
}

inline std::string prefix_length_label(int k) { return k == kFullPrefix ? "full" : std::to_string(k); }

inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

/// CSV: k, policy, gc_scale, accuracy, positions_counted. Undefined cells print "nan".
inline std::string probe_report_csv(const ProbeReport& rep) {
  std::string out = "k,policy,gc_scale,accuracy,positions_counted\n";
  for (const auto& c : rep.cells) {
    out += prefix_length_label(c.k) + "," + to_string(c.policy) + "," + format_number(c.gc_scale) + "," +
           format_number(c.accuracy) + "," + std::to_string(c.positions_counted) + "\n";
  }
  return out;
}

inline Json probe_report_json(const ProbeReport& rep) {
  Json j;
  j["samples_per_position"] = rep.samples_per_position;
  j["seed"] = rep.seed;
  j["positions"] = rep.positions;
  Json cells = Json::array();
  for (const auto& c : rep.cells) {
    Json jc;
    jc["k"] = prefix_length_label(c.k);
    jc["policy"] = to_string(c.policy);
    jc["gc_scale"] = c.gc_scale;
    jc["accuracy"] = c.defined() ? Json(c.accuracy) : Json(nullptr);
    jc["positions_counted"] = c.positions_counted;
    jc["positions_skipped"] = c.positions_skipped;
    Json tallies = Json::array();
    for (const auto& o : c.outcomes) {
      Json t;
      t["position"] = o.position;
      t["skipped"] = o.skipped;
      if (!o.skipped) {
        t["target"] = o.target;
        t["correct"] = o.correct;
        Json votes = Json::array();
        for (const auto& [tok, n] : o.votes) votes.push_back(Json::array({tok, n}));
        t["votes"] = votes;
      }
      tallies.push_back(t);
    }
    jc["tallies"] = tallies;
    cells.push_back(jc);
  }
  j["cells"] = cells;
  return j;
}

}  // namespace memlab
