#pragma once

// Memorisation training loops.
//
// Trace convention: trace entry e describes the model after e optimizer
// steps, so entry 0 is the untrained model and a run of E epochs yields
// entries 0..E. With no dropout anywhere, the training forward pass at step
// e+1 already is the evaluation of the model after e steps; the loop reuses
// it instead of running a separate evaluation pass.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "memlab/adam.hpp"
#include "memlab/error.hpp"
#include "memlab/metrics.hpp"
#include "memlab/micro_lm.hpp"
#include "memlab/string_lab.hpp"

namespace memlab {

enum class LrSchedule { linear_decay_to_zero, constant };
enum class BatchRegime { single, partitioned, in_batch, embedded };

inline const char* to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "linear_decay_to_zero"; }
inline const char* to_string(BatchRegime r) {
  switch (r) {
    case BatchRegime::single: return "single";
    case BatchRegime::partitioned: return "partitioned";
    case BatchRegime::in_batch: return "in_batch";
    case BatchRegime::embedded: return "embedded";
  }
  return "single";
}

/// Where filler ("natural") tokens come from.
struct ContextSpec {
  std::string kind = "zipf";  // zipf | file
  std::string path;           // for kind == file
  double zipf_exponent = 1.1;
};

struct TrainConfig {
  int epochs = 2000;
  double initial_lr = 1e-3;
  LrSchedule lr_schedule = LrSchedule::linear_decay_to_zero;
  AdamConfig adam;
  BatchRegime regime = BatchRegime::single;
  std::size_t pieces = 1;          // partitioned
  std::size_t batch_size = 1;      // in_batch: random string + batch_size - 1 filler sequences
  std::size_t context_size = 0;    // embedded: total sequence length
  ContextSpec context;
  int eval_every = 1;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(epochs >= 0, "TrainConfig: epochs must be >= 0");
    detail::require(initial_lr > 0.0, "TrainConfig: initial_lr must be positive");
    detail::require(eval_every >= 1, "TrainConfig: eval_every must be >= 1");
    if (regime == BatchRegime::partitioned) detail::require(pieces >= 1, "TrainConfig: pieces must be >= 1");
    if (regime == BatchRegime::in_batch) detail::require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
  }
};

/// Learning rate for the step taken at `epoch` (0-based).
inline double lr_at(const TrainConfig& cfg, int epoch) {
  if (epoch < 0 || epoch >= cfg.epochs) throw InvalidArgument("lr_at: epoch out of range");
  if (cfg.lr_schedule == LrSchedule::constant) return cfg.initial_lr;
  return cfg.initial_lr * (1.0 - static_cast<double>(epoch) / static_cast<double>(cfg.epochs));
}

struct EpochTrace {
  int epoch = 0;
  double loss = 0.0;      // nats/token on the random span
  double accuracy = 0.0;  // greedy recollection accuracy on the random span
  double agg_prob = 0.0;
  double entropy = 0.0;   // mean alphabet entropy, renormalised over the alphabet
  double kld = 0.0;
  std::size_t kld_clamped = 0;
  CorrectnessBitmap bitmap;
};

struct TrainHooks {
  std::function<void(const EpochTrace&)> on_trace;
  /// Called after the step that completes each listed epoch (and for 0 before training).
  std::vector<int> checkpoint_epochs;
  std::function<void(int, const MicroLm&)> on_checkpoint;
};

/// Metrics for one evaluated span; `probs` rows align with `targets`.
inline EpochTrace evaluate_span(const ProbMatrix& probs, std::span<const TokenId> targets, const Alphabet& alphabet,
                                int epoch) {
  EpochTrace tr;
  tr.epoch = epoch;
  double nll = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    nll -= std::log(std::max(static_cast<double>(probs(i, targets[static_cast<std::size_t>(i)])), 1e-30));
  tr.loss = nll / static_cast<double>(targets.size());
  tr.bitmap = correctness(probs, targets, epoch);
  tr.accuracy = accuracy(tr.bitmap);
  tr.agg_prob = aggregate_alphabet_prob(probs, alphabet);
  try {
    tr.entropy = mean_alphabet_entropy(probs, alphabet).value;
  } catch (const UndefinedResult&) {
    tr.entropy = std::numeric_limits<double>::quiet_NaN();
  }
  const auto kl = kld_from_true(probs, alphabet);
  tr.kld = kl.value;
  tr.kld_clamped = kl.flagged;
  if (!std::isfinite(tr.loss)) throw NumericalFailure("evaluation loss is not finite at epoch " + std::to_string(epoch));
  return tr;
}

/// Evaluation of the model on the random span of s (no gradients).
inline EpochTrace evaluate(const MicroLm& model, const TokenString& s, int epoch) {
  return evaluate_span(span_distributions(model, s), s.random_part(), s.alphabet, epoch);
}

inline std::unique_ptr<ContextSource> make_context_source(const ContextSpec& spec, const MicroLm& model,
                                                          const Alphabet& alphabet, std::uint64_t seed) {
  std::vector<TokenId> excluded = alphabet.tokens;
  excluded.push_back(model.config().bos());
  if (spec.kind == "zipf")
    return std::make_unique<ZipfTextSource>(model.vocab_size(), excluded, spec.zipf_exponent, seed);
  if (spec.kind == "file") {
    std::ifstream in(spec.path, std::ios::binary);
    if (!in) throw InvalidArgument("context corpus not readable: " + spec.path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::make_unique<ByteCorpusSource>(ss.str(), model.vocab_size(), excluded);
  }
  throw InvalidArgument("unknown context source kind: " + spec.kind);
}

namespace detail {

inline void check_fits(const MicroLm& model, const TokenString& s, const TrainConfig& cfg) {
  std::size_t len = s.size();
  if (cfg.regime == BatchRegime::partitioned) {
    detail::require(s.size() % cfg.pieces == 0, "partitioned regime: pieces must divide n");
    len = s.size() / cfg.pieces;
  }
  if (cfg.regime == BatchRegime::embedded) {
    detail::require(cfg.context_size >= s.size(), "embedded regime: context_size shorter than the string");
    len = cfg.context_size;
  }
  detail::require(len <= model.max_context(), "string does not fit the model context under this regime");
  detail::require(!s.alphabet.contains(model.config().bos()), "alphabet contains the model's BOS token");
  for (TokenId t : s.tokens) detail::require(t >= 0 && t < model.vocab_size(), "token outside model vocabulary");
}

}  // namespace detail

/// One optimisation step per epoch over the regime's batch. Returns the trace
/// entries at the eval_every cadence (always including 0 and the last epoch).
/// On NumericalFailure the entries already passed to hooks.on_trace stand.
inline std::vector<EpochTrace> run_memorisation(MicroLm& model, const TokenString& s, const TrainConfig& cfg,
                                                const TrainHooks& hooks = {}) {
  cfg.validate();
  detail::check_fits(model, s, cfg);
  Adam<float> opt(model.params(), cfg.adam);
  Rng rng(cfg.seed);
  std::unique_ptr<ContextSource> filler;
  if (cfg.regime == BatchRegime::in_batch || cfg.regime == BatchRegime::embedded)
    filler = make_context_source(cfg.context, model, s.alphabet, rng.fork_seed());
  std::vector<TokenString> pieces;
  if (cfg.regime == BatchRegime::partitioned) pieces = partition_string(s, cfg.pieces);

  std::vector<EpochTrace> traces;
  auto record = [&](EpochTrace tr) {
    if (tr.epoch % cfg.eval_every != 0 && tr.epoch != cfg.epochs) return;
    if (hooks.on_trace) hooks.on_trace(tr);
    traces.push_back(std::move(tr));
  };
  auto checkpoint = [&](int epoch) {
    if (!hooks.on_checkpoint) return;
    for (int e : hooks.checkpoint_epochs)
      if (e == epoch) hooks.on_checkpoint(epoch, model);
  };
  checkpoint(0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Params<float> grads = model.params().zeros_like();
    Mat<float> probs;
    switch (cfg.regime) {
      case BatchRegime::single: {
        model.accumulate_grads(s.tokens, 1.0f / static_cast<float>(s.size()), grads, &probs);
        record(evaluate_span(probs, s.tokens, s.alphabet, epoch));
        break;
      }
      case BatchRegime::partitioned: {
        const float scale = 1.0f / static_cast<float>(s.size());
        ProbMatrix all(static_cast<Eigen::Index>(s.size()), model.vocab_size());
        Eigen::Index row = 0;
        for (const auto& p : pieces) {
          model.accumulate_grads(p.tokens, scale, grads, &probs);
          all.middleRows(row, probs.rows()) = probs;
          row += probs.rows();
        }
        record(evaluate_span(all, s.tokens, s.alphabet, epoch));
        break;
      }
      case BatchRegime::in_batch: {
        const float scale = 1.0f / static_cast<float>(s.size() * cfg.batch_size);
        model.accumulate_grads(s.tokens, scale, grads, &probs);
        record(evaluate_span(probs, s.tokens, s.alphabet, epoch));
        for (std::size_t b = 1; b < cfg.batch_size; ++b) {
          const auto text = filler->take(s.size());
          model.accumulate_grads(text, scale, grads);
        }
        break;
      }
      case BatchRegime::embedded: {
        const auto text = filler->take(cfg.context_size - s.size());
        const TokenString seq = embed_in_context(s, text, cfg.context_size, std::nullopt, rng.next_u64());
        model.accumulate_grads(seq.tokens, 1.0f / static_cast<float>(seq.size()), grads, &probs);
        const ProbMatrix span_rows =
            probs.middleRows(static_cast<Eigen::Index>(seq.span.begin), static_cast<Eigen::Index>(seq.span.length));
        record(evaluate_span(span_rows, seq.random_part(), s.alphabet, epoch));
        break;
      }
    }
    if (!grads.all_finite()) throw NumericalFailure("gradient contains NaN/Inf at epoch " + std::to_string(epoch));
    opt.step(model.params(), grads, lr_at(cfg, epoch));
    model.set_step_count(model.step_count() + 1);
    if (!model.params().all_finite())
      throw NumericalFailure("parameters became non-finite after epoch " + std::to_string(epoch));
    checkpoint(epoch + 1);
  }

  // Final state (or the only state when epochs == 0).
  if (cfg.regime == BatchRegime::embedded) {
    const auto text = filler->take(cfg.context_size - s.size());
    const TokenString seq = embed_in_context(s, text, cfg.context_size, std::nullopt, rng.next_u64());
    const ProbMatrix rows = span_distributions(model, seq);
    record(evaluate_span(rows, seq.random_part(), s.alphabet, cfg.epochs));
  } else if (cfg.regime == BatchRegime::partitioned) {
    ProbMatrix all(static_cast<Eigen::Index>(s.size()), model.vocab_size());
    Eigen::Index row = 0;
    for (const auto& p : pieces) {
      ProbMatrix pr = model.distributions(p.tokens);
      all.middleRows(row, pr.rows()) = pr;
      row += pr.rows();
    }
    record(evaluate_span(all, s.tokens, s.alphabet, cfg.epochs));
  } else {
    record(evaluate(model, s, cfg.epochs));
  }
  return traces;
}

/// accuracy[j][g]: accuracy on string j after g global steps; NaN before
/// string j's training starts (columns g < j * epochs_per_string).
struct SequentialResult {
  std::vector<std::vector<double>> accuracy;
  int epochs_per_string = 0;
};

/// Trains on each string in turn for epochs_per_string steps with a fresh
/// optimiser and learning-rate schedule per string.
inline SequentialResult run_sequential(MicroLm& model, const std::vector<TokenString>& strings, int epochs_per_string,
                                       const TrainConfig& cfg,
                                       const std::function<void(int, int, double)>& on_point = {}) {
  detail::require(!strings.empty(), "run_sequential: no strings");
  detail::require(epochs_per_string >= 1, "run_sequential: epochs_per_string must be >= 1");
  for (const auto& s : strings) {
    detail::require(s.size() == strings.front().size(), "run_sequential: strings differ in length");
    detail::require(s.alphabet.tokens == strings.front().alphabet.tokens, "run_sequential: strings differ in alphabet");
  }
  TrainConfig per = cfg;
  per.epochs = epochs_per_string;
  per.regime = BatchRegime::single;
  per.validate();
  const std::size_t K = strings.size();
  const int total = static_cast<int>(K) * epochs_per_string;
  SequentialResult out;
  out.epochs_per_string = epochs_per_string;
  out.accuracy.assign(K, std::vector<double>(static_cast<std::size_t>(total) + 1, std::numeric_limits<double>::quiet_NaN()));
  auto put = [&](std::size_t j, int g, double acc) {
    out.accuracy[j][static_cast<std::size_t>(g)] = acc;
    if (on_point) on_point(static_cast<int>(j), g, acc);
  };
  for (std::size_t cur = 0; cur < K; ++cur) {
    const TokenString& s = strings[cur];
    detail::check_fits(model, s, per);
    Adam<float> opt(model.params(), per.adam);
    for (int e = 0; e < epochs_per_string; ++e) {
      const int g = static_cast<int>(cur) * epochs_per_string + e;
      Params<float> grads = model.params().zeros_like();
      Mat<float> probs;
      model.accumulate_grads(s.tokens, 1.0f / static_cast<float>(s.size()), grads, &probs);
      // Earlier strings' column g was filled by the previous step's sweep.
      put(cur, g, accuracy(correctness(ProbMatrix(probs), s.tokens)));
      if (!grads.all_finite()) throw NumericalFailure("gradient contains NaN/Inf in sequential run");
      opt.step(model.params(), grads, lr_at(per, e));
      model.set_step_count(model.step_count() + 1);
      if (!model.params().all_finite()) throw NumericalFailure("parameters became non-finite in sequential run");
      // After the step: every seen string except the one whose accuracy the next
      // step's fused forward will produce.
      const int next = g + 1;
      const bool last_of_string = e + 1 == epochs_per_string;
      for (std::size_t j = 0; j <= cur; ++j) {
        if (j == cur && !last_of_string) continue;
        put(j, next, accuracy(correctness(model, strings[j])));
      }
    }
  }
  return out;
}

/// First trace epoch whose accuracy reaches `threshold`, or nullopt.
inline std::optional<int> epochs_to_accuracy(std::span<const EpochTrace> traces, double threshold) {
  for (const auto& t : traces)
    if (t.accuracy >= threshold) return t.epoch;
  return std::nullopt;
}

}  // namespace memlab
