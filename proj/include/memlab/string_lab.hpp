#pragma once

// Random token strings with controlled alphabet, entropy, conditional
// entropy and repetition structure.
//
// Token ids are plain integers in [0, vocab_size). A "latin" alphabet of size
// l is the ids 0..l-1 by convention (think "a".."z"); the micro model never
// sees characters, only ids.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "memlab/error.hpp"
#include "memlab/rng.hpp"

namespace memlab {

using TokenId = std::int32_t;
using Json = nlohmann::ordered_json;

enum class AlphabetKind { latin, random_subset };

inline const char* to_string(AlphabetKind k) {
  return k == AlphabetKind::latin ? "latin" : "random_subset";
}

inline AlphabetKind alphabet_kind_from_string(const std::string& s) {
  if (s == "latin") return AlphabetKind::latin;
  if (s == "random_subset") return AlphabetKind::random_subset;
  throw InvalidArgument("unknown alphabet kind: " + s);
}

/// How an alphabet was built; enough to rebuild it.
struct AlphabetSpec {
  int ell = 26;
  int vocab_size = 512;
  AlphabetKind kind = AlphabetKind::latin;
  std::uint64_t seed = 0;

  bool operator==(const AlphabetSpec&) const = default;
};

struct Alphabet {
  std::vector<TokenId> tokens;
  std::vector<double> probs;
  int vocab_size = 0;
  AlphabetSpec spec;

  int size() const { return static_cast<int>(tokens.size()); }

  bool contains(TokenId t) const {
    return std::find(tokens.begin(), tokens.end(), t) != tokens.end();
  }

  /// Position of `t` in `tokens`, or -1.
  int index_of(TokenId t) const {
    auto it = std::find(tokens.begin(), tokens.end(), t);
    return it == tokens.end() ? -1 : static_cast<int>(it - tokens.begin());
  }

  void validate() const {
    detail::require(tokens.size() >= 2, "alphabet needs at least two tokens");
    detail::require(tokens.size() == probs.size(), "alphabet tokens/probs size mismatch");
    std::vector<TokenId> sorted = tokens;
    std::sort(sorted.begin(), sorted.end());
    detail::require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
                    "alphabet tokens must be distinct");
    detail::require(sorted.front() >= 0 && sorted.back() < vocab_size,
                    "alphabet token outside [0, vocab_size)");
    double total = 0.0;
    for (double p : probs) {
      detail::require(p >= 0.0, "alphabet probability is negative");
      total += p;
    }
    detail::require(std::abs(total - 1.0) <= 1e-12, "alphabet probabilities do not sum to 1");
  }
};

/// Half-open [begin, begin + length) span of the random string inside a token sequence.
struct Span {
  std::size_t begin = 0;
  std::size_t length = 0;
  std::size_t end() const { return begin + length; }
  bool operator==(const Span&) const = default;
};

/// Generation recipe. `params` holds the kind-specific fields and is flattened
/// into the top level of the canonical JSON form.
struct Recipe {
  std::string kind;  // uniform | entropy_matched | conditional | repeated_substring | embedded
  AlphabetSpec alphabet;
  std::uint64_t seed = 0;
  Json params = Json::object();
};

struct TokenString {
  std::vector<TokenId> tokens;
  Alphabet alphabet;  // probs are the distribution the random tokens were drawn from
  Recipe recipe;
  Span span;  // where the random string lives; the whole string unless embedded

  std::size_t size() const { return tokens.size(); }
  std::span<const TokenId> random_part() const {
    return std::span<const TokenId>(tokens).subspan(span.begin, span.length);
  }
};

struct PrivilegedMap {
  Alphabet alphabet;
  int ngram_order = 1;
  /// mapping[code] = alphabet index of the privileged continuation, where
  /// code is the n-gram's alphabet indices read as a base-l number
  /// (oldest token most significant).
  std::vector<int> mapping;
  std::uint64_t seed = 0;

  std::size_t ngram_count() const { return mapping.size(); }
};

// ---------------------------------------------------------------------------
// Entropy

/// Shannon entropy in nats; 0 log 0 = 0.
inline double distribution_entropy(std::span<const double> probs) {
  double total = 0.0;
  for (double p : probs) {
    detail::require(p >= 0.0, "distribution_entropy: negative probability");
    total += p;
  }
  detail::require(std::abs(total - 1.0) <= 1e-9, "distribution_entropy: probabilities must sum to 1");
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

inline double nats_to_bits(double nats) { return nats / std::numbers::ln2; }

/// Plug-in entropy of the empirical token frequencies.
inline double empirical_entropy(std::span<const TokenId> tokens) {
  detail::require(!tokens.empty(), "empirical_entropy: empty input");
  std::vector<TokenId> sorted(tokens.begin(), tokens.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double h = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double p = static_cast<double>(j - i) / n;
    h -= p * std::log(p);
    i = j;
  }
  return h;
}

/// Plug-in estimate of H(s_i | s_{i-order..i-1}).
inline double empirical_conditional_entropy(std::span<const TokenId> tokens, int order) {
  detail::require(order >= 1, "empirical_conditional_entropy: order must be >= 1");
  detail::require(tokens.size() > static_cast<std::size_t>(order),
                  "empirical_conditional_entropy: string shorter than order");
  // (context, next) pairs, sorted so equal contexts are adjacent.
  std::vector<std::vector<TokenId>> rows;
  rows.reserve(tokens.size() - order);
  for (std::size_t i = order; i < tokens.size(); ++i)
    rows.emplace_back(tokens.begin() + (i - order), tokens.begin() + i + 1);
  std::sort(rows.begin(), rows.end());
  const double total = static_cast<double>(rows.size());
  double h = 0.0;
  for (std::size_t i = 0; i < rows.size();) {
    std::size_t j = i;
    auto same_ctx = [&](std::size_t a, std::size_t b) {
      return std::equal(rows[a].begin(), rows[a].end() - 1, rows[b].begin());
    };
    while (j < rows.size() && same_ctx(i, j)) ++j;
    const double ctx_count = static_cast<double>(j - i);
    for (std::size_t a = i; a < j;) {
      std::size_t b = a;
      while (b < j && rows[b] == rows[a]) ++b;
      const double c = static_cast<double>(b - a);
      h -= (c / total) * std::log(c / ctx_count);
      a = b;
    }
    i = j;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Alphabets

inline Alphabet make_alphabet(int ell, int vocab_size, AlphabetKind kind, std::uint64_t seed) {
  if (ell < 2 || ell > vocab_size)
    throw InvalidArgument("make_alphabet: need 2 <= ell <= vocab_size");
  Alphabet a;
  a.vocab_size = vocab_size;
  a.spec = {ell, vocab_size, kind, seed};
  if (kind == AlphabetKind::latin) {
    a.tokens.resize(static_cast<std::size_t>(ell));
    std::iota(a.tokens.begin(), a.tokens.end(), 0);
  } else {
    // Partial Fisher-Yates over [0, vocab_size).
    std::vector<TokenId> pool(static_cast<std::size_t>(vocab_size));
    std::iota(pool.begin(), pool.end(), 0);
    Rng rng(seed);
    for (int i = 0; i < ell; ++i) {
      const auto j = static_cast<std::size_t>(i) +
                     static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(vocab_size - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    }
    a.tokens.assign(pool.begin(), pool.begin() + ell);
  }
  a.probs.assign(static_cast<std::size_t>(ell), 1.0 / ell);
  return a;
}

inline Alphabet make_alphabet(const AlphabetSpec& spec) {
  return make_alphabet(spec.ell, spec.vocab_size, spec.kind, spec.seed);
}

// ---------------------------------------------------------------------------
// Generators

namespace detail {

inline std::vector<TokenId> sample_iid(const Alphabet& a, std::size_t n, Rng& rng) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = a.tokens[rng.categorical(a.probs)];
  return out;
}

}  // namespace detail

inline TokenString uniform_string(const Alphabet& alphabet, std::size_t n, std::uint64_t seed) {
  alphabet.validate();
  detail::require(n >= 1, "uniform_string: n must be >= 1");
  Rng rng(seed);
  TokenString s;
  s.tokens = detail::sample_iid(alphabet, n, rng);
  s.alphabet = alphabet;
  s.recipe = {"uniform", alphabet.spec, seed, Json{{"n", n}}};
  s.span = {0, n};
  return s;
}

/// Entropy of one token at probability p and the other l-1 sharing 1-p evenly.
inline double oversampled_entropy(int ell, double p) {
  const double rest = (1.0 - p) / (ell - 1);
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (rest > 0.0) h -= (1.0 - p) * std::log(rest);
  return h;
}

/// The oversampled probability p >= 1/l whose distribution has the target entropy.
inline double solve_oversample_prob(int ell, double target_entropy) {
  detail::require(ell >= 2, "solve_oversample_prob: ell must be >= 2");
  const double h_max = std::log(static_cast<double>(ell));
  if (!(target_entropy > 0.0)) throw InvalidArgument("solve_oversample_prob: target must be positive");
  if (target_entropy > h_max + 1e-12)
    throw Infeasible("solve_oversample_prob: target entropy exceeds ln(ell)");
  if (target_entropy >= h_max) return 1.0 / ell;
  // H is strictly decreasing in p on [1/l, 1).
  double lo = 1.0 / ell;
  double hi = 1.0 - 1e-12;
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (oversampled_entropy(ell, mid) > target_entropy)
      lo = mid;
    else
      hi = mid;
  }
  const double h_lo = oversampled_entropy(ell, lo) - target_entropy;
  const double h_hi = target_entropy - oversampled_entropy(ell, hi);
  return h_lo <= h_hi ? lo : hi;
}

/// i.i.d. string over a uniform alphabet with its first token oversampled so
/// the sampling distribution has `target_entropy` nats.
inline TokenString entropy_matched_string(const Alphabet& alphabet, double target_entropy,
                                          std::size_t n, std::uint64_t seed) {
  alphabet.validate();
  detail::require(n >= 1, "entropy_matched_string: n must be >= 1");
  const int ell = alphabet.size();
  const double p = solve_oversample_prob(ell, target_entropy);
  Alphabet skewed = alphabet;
  skewed.probs.assign(static_cast<std::size_t>(ell), (1.0 - p) / (ell - 1));
  skewed.probs[0] = p;
  Rng rng(seed);
  TokenString s;
  s.tokens = detail::sample_iid(skewed, n, rng);
  s.alphabet = skewed;
  s.recipe = {"entropy_matched", alphabet.spec, seed,
              Json{{"n", n},
                   {"target_entropy", target_entropy},
                   {"oversample_prob", p},
                   {"achieved_entropy", distribution_entropy(skewed.probs)}}};
  s.span = {0, n};
  return s;
}

inline PrivilegedMap balanced_privileged_map(const Alphabet& alphabet, int ngram_order,
                                             std::uint64_t seed) {
  alphabet.validate();
  detail::require(ngram_order >= 1, "balanced_privileged_map: ngram_order must be >= 1");
  const auto ell = static_cast<std::size_t>(alphabet.size());
  std::size_t count = 1;
  for (int i = 0; i < ngram_order; ++i) {
    count *= ell;
    if (count > 1'000'000)
      throw CapacityError("balanced_privileged_map: more than 10^6 n-grams");
  }
  PrivilegedMap m;
  m.alphabet = alphabet;
  m.ngram_order = ngram_order;
  m.seed = seed;
  m.mapping.resize(count);
  for (std::size_t i = 0; i < count; ++i) m.mapping[i] = static_cast<int>(i % ell);
  Rng rng(seed);
  rng.shuffle(m.mapping);
  return m;
}

/// p_k = k / (l - 1 + k), the probability of the privileged continuation.
inline double privileged_prob(int ell, double rel_prob_k) { return rel_prob_k / (ell - 1 + rel_prob_k); }

inline TokenString conditional_string(const PrivilegedMap& map, double rel_prob_k, std::size_t n,
                                      std::uint64_t seed) {
  detail::require(rel_prob_k >= 1.0, "conditional_string: rel_prob_k must be >= 1");
  detail::require(n > static_cast<std::size_t>(map.ngram_order), "conditional_string: n must exceed ngram_order");
  const int ell = map.alphabet.size();
  const double p_k = privileged_prob(ell, rel_prob_k);
  const double p_u = (1.0 - p_k) / (ell - 1);
  Rng rng(seed);
  std::vector<int> idx(n);
  const auto order = static_cast<std::size_t>(map.ngram_order);
  for (std::size_t i = 0; i < order; ++i) idx[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(ell)));
  std::vector<double> w(static_cast<std::size_t>(ell));
  for (std::size_t i = order; i < n; ++i) {
    std::size_t code = 0;
    for (std::size_t j = i - order; j < i; ++j) code = code * static_cast<std::size_t>(ell) + static_cast<std::size_t>(idx[j]);
    std::fill(w.begin(), w.end(), p_u);
    w[static_cast<std::size_t>(map.mapping[code])] = p_k;
    idx[i] = static_cast<int>(rng.categorical(w));
  }
  TokenString s;
  s.tokens.resize(n);
  for (std::size_t i = 0; i < n; ++i) s.tokens[i] = map.alphabet.tokens[static_cast<std::size_t>(idx[i])];
  s.alphabet = map.alphabet;
  s.alphabet.probs.assign(static_cast<std::size_t>(ell), 1.0 / ell);
  s.recipe = {"conditional", map.alphabet.spec, seed,
              Json{{"n", n},
                   {"ngram_order", map.ngram_order},
                   {"map_seed", map.seed},
                   {"rel_prob_k", rel_prob_k},
                   {"p_k", p_k}}};
  s.span = {0, n};
  return s;
}

inline TokenString repeated_substring_string(const Alphabet& alphabet, std::size_t unique_len,
                                             std::size_t n, std::uint64_t seed) {
  if (unique_len == 0 || n % unique_len != 0)
    throw InvalidArgument("repeated_substring_string: unique length must divide n");
  TokenString base = uniform_string(alphabet, unique_len, seed);
  TokenString s;
  s.tokens.reserve(n);
  for (std::size_t r = 0; r < n / unique_len; ++r)
    s.tokens.insert(s.tokens.end(), base.tokens.begin(), base.tokens.end());
  s.alphabet = alphabet;
  s.recipe = {"repeated_substring", alphabet.spec, seed, Json{{"n", n}, {"unique_len", unique_len}}};
  s.span = {0, n};
  return s;
}

inline std::vector<TokenString> partition_string(const TokenString& s, std::size_t pieces) {
  if (pieces == 0 || s.size() % pieces != 0)
    throw InvalidArgument("partition_string: pieces must divide the string length");
  const std::size_t len = s.size() / pieces;
  std::vector<TokenString> out;
  out.reserve(pieces);
  for (std::size_t j = 0; j < pieces; ++j) {
    TokenString p;
    p.tokens.assign(s.tokens.begin() + static_cast<std::ptrdiff_t>(j * len),
                    s.tokens.begin() + static_cast<std::ptrdiff_t>((j + 1) * len));
    p.alphabet = s.alphabet;
    p.recipe = s.recipe;
    p.recipe.params["piece"] = j;
    p.recipe.params["pieces"] = pieces;
    p.span = {0, len};
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<TokenId> concatenate(const std::vector<TokenString>& parts) {
  std::vector<TokenId> out;
  for (const auto& p : parts) out.insert(out.end(), p.tokens.begin(), p.tokens.end());
  return out;
}

/// Place `s` inside `total_len` tokens of context. With no `position`, the
/// offset is drawn uniformly from [0, total_len - n].
inline TokenString embed_in_context(const TokenString& s, std::span<const TokenId> context,
                                    std::size_t total_len, std::optional<std::size_t> position,
                                    std::uint64_t seed) {
  const std::size_t n = s.size();
  detail::require(total_len >= n, "embed_in_context: total_len shorter than the string");
  const std::size_t filler = total_len - n;
  if (context.size() < filler) throw InvalidArgument("embed_in_context: insufficient context tokens");
  std::size_t pos = 0;
  if (position) {
    detail::require(*position <= filler, "embed_in_context: position leaves no room for the string");
    pos = *position;
  } else {
    Rng rng(seed);
    pos = static_cast<std::size_t>(rng.below(filler + 1));
  }
  TokenString out;
  out.tokens.reserve(total_len);
  out.tokens.insert(out.tokens.end(), context.begin(), context.begin() + static_cast<std::ptrdiff_t>(pos));
  out.tokens.insert(out.tokens.end(), s.tokens.begin(), s.tokens.end());
  out.tokens.insert(out.tokens.end(), context.begin() + static_cast<std::ptrdiff_t>(pos),
                    context.begin() + static_cast<std::ptrdiff_t>(filler));
  out.alphabet = s.alphabet;
  out.recipe = s.recipe;
  out.recipe.params["embedded"] = Json{{"total_len", total_len}, {"offset", pos}, {"seed", seed}};
  out.span = {pos, n};
  return out;
}

// ---------------------------------------------------------------------------
// Natural-context sources

/// Endless stream of filler tokens.
class ContextSource {
 public:
  virtual ~ContextSource() = default;
  virtual std::vector<TokenId> take(std::size_t n) = 0;
};

/// Synthetic "natural" text: a Zipf(exponent) distribution over every
/// vocabulary id that is neither excluded nor the reserved BOS id, ranked in a
/// seed-dependent order.
class ZipfTextSource : public ContextSource {
 public:
  ZipfTextSource(int vocab_size, std::span<const TokenId> excluded, double exponent, std::uint64_t seed)
      : rng_(seed) {
    std::vector<bool> banned(static_cast<std::size_t>(vocab_size), false);
    for (TokenId t : excluded)
      if (t >= 0 && t < vocab_size) banned[static_cast<std::size_t>(t)] = true;
    for (int t = 0; t < vocab_size; ++t)
      if (!banned[static_cast<std::size_t>(t)]) pool_.push_back(t);
    detail::require(!pool_.empty(), "ZipfTextSource: no tokens left after exclusions");
    rng_.shuffle(pool_);
    weights_.resize(pool_.size());
    for (std::size_t r = 0; r < pool_.size(); ++r)
      weights_[r] = 1.0 / std::pow(static_cast<double>(r + 1), exponent);
  }

  std::vector<TokenId> take(std::size_t n) override {
    std::vector<TokenId> out(n);
    for (auto& t : out) t = pool_[rng_.categorical(weights_)];
    return out;
  }

 private:
  Rng rng_;
  std::vector<TokenId> pool_;
  std::vector<double> weights_;
};

/// Plain-text corpus: each byte maps onto a non-excluded token id
/// (pool[byte % pool.size()]); the stream cycles through the file.
class ByteCorpusSource : public ContextSource {
 public:
  ByteCorpusSource(std::string bytes, int vocab_size, std::span<const TokenId> excluded)
      : bytes_(std::move(bytes)) {
    detail::require(!bytes_.empty(), "ByteCorpusSource: empty corpus");
    std::vector<bool> banned(static_cast<std::size_t>(vocab_size), false);
    for (TokenId t : excluded)
      if (t >= 0 && t < vocab_size) banned[static_cast<std::size_t>(t)] = true;
    for (int t = 0; t < vocab_size; ++t)
      if (!banned[static_cast<std::size_t>(t)]) pool_.push_back(t);
    detail::require(!pool_.empty(), "ByteCorpusSource: no tokens left after exclusions");
  }

  std::vector<TokenId> take(std::size_t n) override {
    std::vector<TokenId> out(n);
    for (auto& t : out) {
      const auto b = static_cast<unsigned char>(bytes_[cursor_]);
      t = pool_[b % pool_.size()];
      cursor_ = (cursor_ + 1) % bytes_.size();
    }
    return out;
  }

 private:
  std::string bytes_;
  std::vector<TokenId> pool_;
  std::size_t cursor_ = 0;
};

}  // namespace memlab
