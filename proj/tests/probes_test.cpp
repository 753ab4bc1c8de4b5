#include <gtest/gtest.h>

#include "memlab/bridge_client.hpp"
#include "memlab/metrics.hpp"
#include "memlab/micro_lm.hpp"
#include "memlab/probes.hpp"

using namespace memlab;

namespace {

// Greedy next token is the first token of the input (or 0 with no input).
class FirstTokenModel : public LanguageModel {
 public:
  int vocab_size() const override { return 64; }
  std::size_t max_context() const override { return 1000; }
  ProbMatrix distributions(std::span<const TokenId> s) const override {
    ProbMatrix p = ProbMatrix::Zero(static_cast<Eigen::Index>(s.size()), 64);
    for (Eigen::Index i = 0; i < p.rows(); ++i) p(i, i == 0 ? 0 : s[0]) = 1.0f;
    return p;
  }
};

TokenString sample(int ell, std::size_t n, std::uint64_t seed) {
  return uniform_string(make_alphabet(ell, 64, AlphabetKind::latin, 0), n, seed);
}

double repeat_fraction(const TokenString& s, std::size_t from) {
  std::size_t hits = 0;
  for (std::size_t p = from; p < s.size(); ++p) hits += s.tokens[p] == s.tokens[p - 1];
  return static_cast<double>(hits) / static_cast<double>(s.size() - from);
}

}  // namespace

TEST(Probe, ScaledContextLength) {
  EXPECT_EQ(scaled_context_length(7, 0.5), 3u);
  EXPECT_EQ(scaled_context_length(7, 1.5), 10u);
  EXPECT_EQ(scaled_context_length(7, 0.0), 0u);
}

TEST(Probe, SpecValidation) {
  ProbeSpec s;
  EXPECT_NO_THROW(s.validate());
  s.gc_scales = {0.7};
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = ProbeSpec{};
  s.prefix_lengths = {0};
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = ProbeSpec{};
  s.samples_per_position = 0;
  EXPECT_THROW(s.validate(), InvalidArgument);
  EXPECT_EQ(probe_policy_from_string("constant"), ProbePolicy::constant_policy);
  EXPECT_THROW(probe_policy_from_string("other"), InvalidArgument);
}

TEST(Probe, FullPrefixEqualsGreedyAccuracy) {
  ModelConfig c;
  c.vocab_size = 64;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 40;
  c.init_std = 0.5;
  const MicroLm m(c);
  const auto s = sample(3, 40, 2);
  ProbeSpec spec;
  spec.prefix_lengths = {kFullPrefix};
  spec.samples_per_position = 3;
  const auto rep = probe_sweep(m, s, spec);
  ASSERT_EQ(rep.cells.size(), 1u);
  EXPECT_EQ(rep.cells[0].positions_counted, 40u);
  EXPECT_EQ(rep.cells[0].accuracy, accuracy(correctness(m, s)));
  const auto direct = correctness(m, s);
  for (const auto& o : rep.cells[0].outcomes) EXPECT_EQ(o.correct, direct.correct[o.position] == 1);
}

TEST(Probe, EchoModelAccuracyIsRepeatRate) {
  EchoStub stub(64);
  const EchoModel m(stub);
  const auto s = sample(3, 200, 5);
  ProbeSpec spec;
  spec.prefix_lengths = {1, 4};
  spec.policies = {ProbePolicy::random_policy, ProbePolicy::constant_policy};
  spec.gc_scales = {0.0, 1.0};
  const auto rep = probe_sweep(m, s, spec);
  ASSERT_EQ(rep.cells.size(), 8u);
  for (const auto& c : rep.cells) {
    EXPECT_EQ(c.positions_skipped, static_cast<std::size_t>(c.k));
    EXPECT_DOUBLE_EQ(c.accuracy, repeat_fraction(s, static_cast<std::size_t>(c.k)));
    for (const auto& o : c.outcomes) {
      if (o.skipped) continue;
      int total = 0;
      for (const auto& [tok, n] : o.votes) total += n;
      EXPECT_EQ(total, spec.samples_per_position);
    }
  }
}

TEST(Probe, SkipsPositionsWithoutEnoughPrefix) {
  EchoStub stub(64);
  const EchoModel m(stub);
  const auto s = sample(3, 10, 1);
  const auto o = probe_position(m, s, 2, 5, ProbePolicy::random_policy, 1.0, 4, 0);
  EXPECT_TRUE(o.skipped);
  const auto full0 = probe_position(m, s, 0, kFullPrefix, ProbePolicy::random_policy, 1.0, 4, 0);
  EXPECT_FALSE(full0.skipped);
  EXPECT_FALSE(full0.correct);  // predicts BOS after an empty context
}

TEST(Probe, SkipsWhenScaledContextExceedsModel) {
  EchoStub stub(64, 20);
  const EchoModel m(stub);
  const auto s = sample(3, 30, 1);
  EXPECT_FALSE(probe_position(m, s, 15, 2, ProbePolicy::random_policy, 1.0, 2, 0).skipped);
  EXPECT_TRUE(probe_position(m, s, 15, 2, ProbePolicy::random_policy, 2.0, 2, 0).skipped);
}

TEST(Probe, ReplacementContextFollowsPolicy) {
  const FirstTokenModel m;
  const auto s = sample(4, 50, 3);
  // Constant policy: every sample's context is one repeated token, so the
  // first-token model votes for it; random policy draws each slot.
  for (auto pol : {ProbePolicy::random_policy, ProbePolicy::constant_policy}) {
    const auto o = probe_position(m, s, 40, 2, pol, 1.0, 200, 7);
    ASSERT_FALSE(o.skipped);
    EXPECT_EQ(o.votes.size(), 4u);
    for (const auto& [tok, n] : o.votes) {
      EXPECT_TRUE(s.alphabet.contains(tok));
      EXPECT_NEAR(n / 200.0, 0.25, 0.1);
    }
  }
}

TEST(Probe, TiesAreIncorrect) {
  const FirstTokenModel m;
  const auto s = sample(2, 200, 3);
  int ties = 0;
  for (std::size_t i = 10; i < 200; ++i) {
    const auto o = probe_position(m, s, i, 2, ProbePolicy::random_policy, 1.0, 2, i);
    if (o.votes.size() == 2) {
      ++ties;
      EXPECT_FALSE(o.correct);
    } else {
      EXPECT_EQ(o.correct, o.votes.begin()->first == o.target);
    }
  }
  EXPECT_GT(ties, 0);
}

TEST(Probe, SweepIsDeterministic) {
  const FirstTokenModel m;
  const auto s = sample(5, 60, 3);
  ProbeSpec spec;
  spec.prefix_lengths = {1, 2, 8};
  spec.policies = {ProbePolicy::random_policy, ProbePolicy::constant_policy};
  spec.gc_scales = {0.5, 1.0};
  spec.subsample = 20;
  spec.seed = 9;
  const auto a = probe_sweep(m, s, spec), b = probe_sweep(m, s, spec);
  EXPECT_EQ(probe_report_json(a).dump(), probe_report_json(b).dump());
  EXPECT_EQ(a.positions.size(), 20u);
  EXPECT_TRUE(std::is_sorted(a.positions.begin(), a.positions.end()));
  spec.seed = 10;
  EXPECT_NE(probe_report_json(probe_sweep(m, s, spec)).dump(), probe_report_json(a).dump());
}

TEST(Probe, CsvLayout) {
  ProbeReport r;
  ProbeCell c;
  c.k = kFullPrefix;
  c.accuracy = 0.5;
  c.positions_counted = 4;
  r.cells.push_back(c);
  ProbeCell u;
  u.k = 8;
  u.policy = ProbePolicy::constant_policy;
  u.gc_scale = 0.5;
  r.cells.push_back(u);
  EXPECT_EQ(probe_report_csv(r), "k,policy,gc_scale,accuracy,positions_counted\nfull,random,1,0.5,4\n8,constant,0.5,nan,0\n");
  EXPECT_TRUE(probe_report_json(r)["cells"][1]["accuracy"].is_null());
}
