// Acceptance suite: one PASS/FAIL line per criterion. Exit status 1 if a
// criterion fails that is not listed in --known-failures.
//
// Criteria 4-11 train the default micro model from scratch on single seeded
// strings with the desk preset (Adam, lr 3e-3 decaying linearly to zero over
// 400 epochs). Everything is deterministic.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "memlab/experiments.hpp"
#include "memlab/memlab.hpp"
#include "oracles.hpp"

using namespace memlab;

namespace {

int failures = 0;

std::set<int> known_failures;
int unexpected = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("[%s] criterion %d: %s | %s\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
  if (!ok && !known_failures.count(id)) ++unexpected;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

constexpr int kEpochs = 400;
constexpr double kLr = 3e-3;
constexpr std::size_t kN = 256;
constexpr std::uint64_t kStringSeed = 1;

ModelConfig desk_model() {
  ModelConfig mc;
  mc.init_seed = 0;
  return mc;
}

TrainConfig desk_train(int epochs = kEpochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.initial_lr = kLr;
  return tc;
}

struct Run {
  std::vector<EpochTrace> traces;
  std::unique_ptr<MicroLm> model;
  double seconds = 0;
};

Run train(const TokenString& s, int epochs = kEpochs) {
  Run r;
  r.model = std::make_unique<MicroLm>(desk_model());
  const auto t0 = std::chrono::steady_clock::now();
  r.traces = run_memorisation(*r.model, s, desk_train(epochs));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

int budget_epochs(const std::vector<EpochTrace>& t, double threshold) {
  const auto e = epochs_to_accuracy(t, threshold);
  return e ? *e : kEpochs + 1;
}

std::string epochs_label(int e) { return e > kEpochs ? "never" : std::to_string(e); }

ProbMatrix random_rows(Rng& rng, int rows, int vocab) {
  ProbMatrix p(rows, vocab);
  for (int i = 0; i < rows; ++i) {
    double z = 0;
    for (int j = 0; j < vocab; ++j) {
      p(i, j) = static_cast<float>(std::exp(2.0 * rng.normal()));
      z += p(i, j);
    }
    p.row(i) /= static_cast<float>(z);
  }
  return p;
}

// ---------------------------------------------------------------------------

void criterion1() {
  Rng rng(101);
  double worst_h = 0, worst_kl = 0, worst_rho = 0, worst_cr = 0, worst_d = 0;
  int instances = 0;
  for (int t = 0; t < 200; ++t, ++instances) {
    const std::size_t m = 2 + rng.below(40);
    std::vector<double> p(m);
    double z = 0;
    for (auto& x : p) {
      x = rng.uniform01() < 0.2 ? 0.0 : rng.uniform01();
      z += x;
    }
    if (z == 0) p[0] = z = 1;
    for (auto& x : p) x /= z;
    worst_h = std::max(worst_h, std::abs(distribution_entropy(p) - static_cast<double>(oracle::entropy(p))));
  }
  for (int t = 0; t < 200; ++t) {
    const int vocab = 8 + static_cast<int>(rng.below(40));
    const int ell = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - 2)));
    Alphabet a = make_alphabet(ell, vocab, AlphabetKind::random_subset, rng.next_u64());
    double z = 0;
    for (auto& x : a.probs) z += (x = 0.1 + rng.uniform01());
    for (auto& x : a.probs) x /= z;
    const ProbMatrix pm = random_rows(rng, 1 + static_cast<int>(rng.below(20)), vocab);
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(pm.rows()));
    for (Eigen::Index i = 0; i < pm.rows(); ++i)
      for (int j = 0; j < vocab; ++j) rows[static_cast<std::size_t>(i)].push_back(pm(i, j));
    std::vector<int> toks(a.tokens.begin(), a.tokens.end());
    worst_kl = std::max(worst_kl, std::abs(kld_from_true(pm, a).value - static_cast<double>(oracle::mean_kld(rows, toks, a.probs))));
  }
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 3 + rng.below(60);
    std::vector<double> xs(n), ys(n);
    for (std::size_t i = 0; i < n; ++i) {
      xs[i] = static_cast<double>(rng.below(6));  // heavy ties
      ys[i] = t % 2 ? static_cast<double>(rng.below(4)) : rng.uniform01();
    }
    xs[0] = 0, xs[1] = 5, ys[0] = -1, ys[1] = 7;  // nonzero variance
    worst_rho = std::max(worst_rho, std::abs(spearman_rank(xs, ys) - oracle::spearman(xs, ys)));
  }
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(200), w = 1 + rng.below(n);
    CorrectnessBitmap b;
    const double q = rng.uniform01();
    for (std::size_t i = 0; i < n; ++i) b.correct.push_back(rng.uniform01() < q ? 1 : 0);
    worst_cr = std::max(worst_cr, std::abs(contiguous_recall(b, w) - oracle::contiguous_recall(b.correct, w)));
  }
  // Discrepancy: 100 random bitmaps with 10^4 draws each against the direct
  // recomputation, plus the expectation-0 cases.
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 20 + rng.below(60);
    CorrectnessBitmap b;
    for (std::size_t i = 0; i < n; ++i) b.correct.push_back(rng.below(2) ? 1 : 0);
    DiscrepancyOptions opt;
    opt.window = 1 + rng.below(n);
    opt.num_positions = 10;
    opt.samples = 1000;  // 10^4 window draws
    opt.seed = rng.next_u64();
    worst_d = std::max(worst_d, std::abs(discrepancy(b, opt) - oracle::discrepancy(b.correct, opt.window, opt.num_positions,
                                                                                 opt.samples, opt.seed)));
  }
  CorrectnessBitmap alt;
  for (int i = 0; i < 200; ++i) alt.correct.push_back(i % 2 ? 1 : 0);
  DiscrepancyOptions sym;
  sym.window = 20;
  sym.num_positions = 100;
  sym.samples = 100;  // 10^4 draws
  const double d_alt = discrepancy(alt, sym);
  const double exp_alt = oracle::discrepancy_expectation(alt.correct, 20);
  CorrectnessBitmap all;
  all.correct.assign(200, 1);
  const double d_all = discrepancy(all, sym);
  // Alternating pattern: every 20-window holds exactly 10 ones; standard error
  // of the Monte Carlo mean is below 0.003 here.
  const bool sym_ok = exp_alt == 0.0 && std::abs(d_alt) < 0.01 && d_all == 0.0;
  const bool ok = worst_h < 1e-9 && worst_kl < 1e-9 && worst_rho < 1e-9 && worst_cr < 1e-9 && worst_d < 1e-6 && sym_ok;
  report(1, ok, "metric oracles",
         fmt("max |err| entropy %.2e, kld %.2e, spearman %.2e, recall %.2e, discrepancy %.2e; symmetric case %.4f (expect 0), all-correct %.1f",
             worst_h, worst_kl, worst_rho, worst_cr, worst_d, d_alt, d_all));
}

void criterion2() {
  const std::size_t n = 100000;
  const Alphabet a26 = make_alphabet(26, 512, AlphabetKind::latin, 0);
  // uniform
  const auto u = uniform_string(a26, n, 1);
  std::vector<double> cu(26, 0);
  for (auto t : u.tokens) ++cu[static_cast<std::size_t>(t)];
  double worst_u = 0;
  for (double c : cu) worst_u = std::max(worst_u, std::abs(c / n - 1.0 / 26));
  const double p_u = oracle::chi_square_p(cu, std::vector<double>(26, 1.0 / 26));
  // entropy matched
  const auto em = entropy_matched_string(a26, std::log(4.0), n, 1);
  double first = 0;
  for (auto t : em.tokens) first += t == 0;
  const double p4 = oracle::oversample_root(26, std::log(4.0));
  const double dev_em = std::abs(first / n - p4);
  const auto em26 = entropy_matched_string(a26, std::log(26.0), 10000, 1);
  const double h26 = empirical_entropy(em26.tokens);
  // conditional, k = 16
  const auto map = balanced_privileged_map(a26, 1, 3);
  const auto cs = conditional_string(map, 16.0, n, 1);
  double hits = 0;
  for (std::size_t i = 1; i < n; ++i)
    hits += map.alphabet.tokens[static_cast<std::size_t>(map.mapping[static_cast<std::size_t>(cs.tokens[i - 1])])] == cs.tokens[i];
  const double dev_cs = std::abs(hits / (n - 1) - 16.0 / 41.0);
  // conditional, k = 1, against uniform
  const auto c1 = conditional_string(map, 1.0, n, 2);
  std::vector<double> cc(26, 0);
  for (auto t : c1.tokens) ++cc[static_cast<std::size_t>(t)];
  const double p_hom = oracle::chi_square_homogeneity_p(cc, cu);
  // solver residuals
  double worst_res = 0, worst_root = 0;
  for (int k : {2, 4, 7, 13, 26}) {
    const double target = std::log(static_cast<double>(k));
    const double p = solve_oversample_prob(26, target);
    worst_res = std::max(worst_res, std::abs(static_cast<double>(oracle::oversampled_entropy(26, p)) - target));
    worst_root = std::max(worst_root, std::abs(p - oracle::oversample_root(26, target)));
  }
  const bool ok = worst_u <= 0.005 && p_u > 0.001 && dev_em <= 0.01 && std::abs(h26 - std::log(26.0)) <= 0.05 &&
                  dev_cs <= 0.01 && p_hom > 0.001 && worst_res < 1e-9 && worst_root < 1e-9;
  report(2, ok, "generator statistics",
         fmt("uniform max freq dev %.4f, chi2 p %.3f; H4 first-token dev %.4f; H26 plug-in entropy %.4f; k=16 privileged dev %.4f; "
             "k=1 vs uniform p %.3f; solver residual %.1e, root dev %.1e",
             worst_u, p_u, dev_em, h26, dev_cs, p_hom, worst_res, worst_root));
}

void criterion3() {
  ModelConfig mc;
  mc.vocab_size = 512;
  mc.d_model = 32;
  mc.n_layers = 2;
  mc.n_heads = 4;
  mc.d_ff = 128;
  mc.max_seq_len = 64;
  mc.init_seed = 3;
  mc.init_std = 0.2;  // larger weights exercise the nonlinearities
  const MicroModel<double> model = convert_model<double>(MicroLm(mc));
  const std::vector<TokenId> tokens{3, 17, 5, 3, 250, 17, 9, 64};
  const auto analytic = model.loss_and_grads(tokens).grads;
  MicroModel<double> probe = model;
  const double h = 1e-5;
  std::size_t total = 0, good = 0;
  double worst = 0;
  std::vector<Mat<double>*> ps = tensor_list(probe.params());
  std::vector<const Mat<double>*> gs;
  analytic.for_each([&](const std::string&, const Mat<double>& m) { gs.push_back(&m); });
  for (std::size_t k = 0; k < ps.size(); ++k) {
    for (Eigen::Index i = 0; i < ps[k]->size(); ++i) {
      double& w = ps[k]->data()[i];
      const double w0 = w;
      w = w0 + h;
      const double lp = probe.loss(tokens);
      w = w0 - h;
      const double lm = probe.loss(tokens);
      w = w0;
      const double num = (lp - lm) / (2 * h);
      const double ana = gs[k]->data()[i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-7});
      worst = std::max(worst, rel);
      ++total;
      good += rel <= 1e-3;
    }
  }
  const double frac = static_cast<double>(good) / static_cast<double>(total);
  report(3, frac >= 0.99, "gradient check (2 layers, d=32, 8 tokens, double)",
         fmt("%zu/%zu parameters within 1e-3 relative error (%.4f), worst %.2e", good, total, frac, worst));
}

}  // namespace

// --known-failures=4,6 makes the exit status ignore those criteria. They are
// still evaluated and still print FAIL.
int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    const std::string key = "--known-failures=";
    if (arg.rfind(key, 0) != 0) continue;
    std::stringstream ss(arg.substr(key.size()));
    for (std::string tok; std::getline(ss, tok, ',');)
      if (!tok.empty()) known_failures.insert(std::stoi(tok));
  }
  const auto t0 = std::chrono::steady_clock::now();
  criterion1();
  criterion2();
  criterion3();

  const Alphabet a26 = make_alphabet(26, 512, AlphabetKind::latin, 0);
  const Alphabet a2 = make_alphabet(2, 512, AlphabetKind::latin, 0);
  const TokenString s26 = uniform_string(a26, kN, kStringSeed);
  const TokenString s2 = uniform_string(a2, kN, kStringSeed);

  Run r26 = train(s26);
  Run r2 = train(s2);
  std::printf("# trained l=26 (%.1fs) and l=2 (%.1fs)\n", r26.seconds, r2.seconds);

  // 4. two-phase dynamics
  {
    const auto& t = r26.traces;
    int agg_at = -1, acc_at = -1;
    for (const auto& e : t) {
      if (agg_at < 0 && e.agg_prob >= 0.95) agg_at = e.epoch;
      if (acc_at < 0 && e.accuracy > 2.0 / 26) acc_at = e.epoch;
    }
    const bool a = agg_at >= 0 && (acc_at < 0 || agg_at < acc_at);
    double hmax = 0;
    for (const auto& e : t) hmax = std::max(hmax, e.entropy);
    const double ln26 = std::log(26.0);
    const bool b = std::abs(hmax - ln26) <= 0.2 * ln26 && t.back().entropy < 0.1;
    const Phases ph = phase_detect(t, 26);
    double kmin = INFINITY;
    if (ph.guess_plateau)
      for (const auto& e : t)
        if (e.epoch >= ph.guess_plateau->first && e.epoch <= ph.guess_plateau->last) kmin = std::min(kmin, e.kld);
    const bool c = ph.guess_plateau && kmin < 0.05;
    const bool d = t.back().accuracy == 1.0;
    report(4, a && b && c && d, "two-phase dynamics (l=26, n=256)",
           fmt("(a) agg>=0.95 at epoch %d, acc>2/l at epoch %d: %s; (b) peak entropy %.3f vs ln26 %.3f, final %.4f: %s; "
               "(c) plateau %s, min KLD %.4f: %s; (d) final accuracy %.4f: %s",
               agg_at, acc_at, a ? "ok" : "no", hmax, ln26, t.back().entropy, b ? "ok" : "no",
               ph.guess_plateau ? fmt("%d..%d", ph.guess_plateau->first, ph.guess_plateau->last).c_str() : "none", kmin,
               c ? "ok" : "no", t.back().accuracy, d ? "ok" : "no"));
  }

  // 5. entropy ordering
  {
    const int e26 = budget_epochs(r26.traces, 0.99), e2 = budget_epochs(r2.traces, 0.99);
    const TokenString h26 = entropy_matched_string(a26, std::log(26.0), kN, kStringSeed);
    const TokenString h2 = entropy_matched_string(a26, std::log(2.0), kN, kStringSeed);
    // At H_26 the oversampled distribution is uniform and the draw equals s26.
    const Run rh26 = h26.tokens == s26.tokens ? Run{} : train(h26);
    const int eh26 = h26.tokens == s26.tokens ? e26 : budget_epochs(rh26.traces, 0.99);
    const Run rh2 = train(h2);
    const int eh2 = budget_epochs(rh2.traces, 0.99);
    report(5, e26 < e2 && eh26 < eh2, "entropy ordering",
           fmt("epochs to 99%%: l=26 %s < l=2 %s; entropy-matched H26 %s < H2 %s", epochs_label(e26).c_str(),
               epochs_label(e2).c_str(), epochs_label(eh26).c_str(), epochs_label(eh2).c_str()));
  }

  // 6. guessing plateau level for l=2
  {
    const Phases ph = phase_detect(r2.traces, 2);
    double mean = NAN;
    if (ph.guess_plateau) {
      double sum = 0;
      int cnt = 0;
      for (const auto& e : r2.traces)
        if (e.epoch >= ph.guess_plateau->first && e.epoch <= ph.guess_plateau->last) sum += e.accuracy, ++cnt;
      mean = sum / cnt;
    }
    double majority = 0;
    for (auto t : s2.tokens) majority += t == 0;
    majority = std::max(majority, kN - majority) / kN;
    report(6, ph.guess_plateau && std::abs(mean - 0.5) <= 0.05, "guessing plateau level (l=2)",
           fmt("plateau %s, mean accuracy %.4f (string majority-token frequency %.4f)",
               ph.guess_plateau ? fmt("%d..%d", ph.guess_plateau->first, ph.guess_plateau->last).c_str() : "none", mean,
               majority));
  }

  // 7. contiguous recall underestimates
  {
    const EpochTrace* at = nullptr;
    for (const auto& e : r26.traces)
      if (e.accuracy >= 0.9) {
        at = &e;
        break;
      }
    const double cr = at ? contiguous_recall(at->bitmap, 50) : NAN;
    CorrectnessBitmap synth;
    for (int i = 0; i < 1000; ++i) synth.correct.push_back((i + 1) % 40 == 0 ? 0 : 1);
    const double scr = contiguous_recall(synth, 50), sacc = accuracy(synth);
    report(7, at && cr < 0.2 && scr == 0.0 && std::abs(sacc - 0.975) < 1e-12, "contiguous recall underestimation",
           fmt("first epoch with accuracy>=0.9: %d (accuracy %.4f), recall(50) %.4f; synthetic recall %.4f at accuracy %.4f",
               at ? at->epoch : -1, at ? at->accuracy : NAN, cr, scr, sacc));
  }

  // 8. probes on the memorised l=26 model
  {
    const MicroLm& m = *r26.model;
    const auto t_probe = std::chrono::steady_clock::now();
    ProbeSpec full;
    full.prefix_lengths = {kFullPrefix};
    full.seed = 8;
    const ProbeReport rf = probe_sweep(m, s26, full);
    const double eq1 = accuracy(correctness(m, s26));
    const bool a = rf.cells[0].accuracy == eq1;

    ProbeSpec sweep;
    sweep.prefix_lengths = {1, 2, 4, 8, 16, 32, 64, 128};
    sweep.seed = 8;
    const ProbeReport rr = probe_sweep(m, s26, sweep);
    std::vector<double> ks, accs;
    std::string trend;
    for (const auto& c : rr.cells) {
      ks.push_back(c.k);
      accs.push_back(c.accuracy);
      trend += fmt("%s%d:%.3f", trend.empty() ? "" : " ", c.k, c.accuracy);
    }
    const double rho = spearman_rank(ks, accs);
    const bool b = rho >= 0.8;

    ProbeSpec small;
    small.prefix_lengths = {1, 2, 4, 8};
    small.policies = {ProbePolicy::constant_policy};
    small.seed = 8;
    const ProbeReport rc = probe_sweep(m, s26, small);
    small.policies = {ProbePolicy::random_policy};
    small.gc_scales = {0.0};
    const ProbeReport r0 = probe_sweep(m, s26, small);
    bool c = true, d = true;
    std::string cmp;
    for (int k : {1, 2, 4, 8}) {
      const double ra = rr.cell(k, ProbePolicy::random_policy, 1.0).accuracy;
      const double ca = rc.cell(k, ProbePolicy::constant_policy, 1.0).accuracy;
      const double za = r0.cell(k, ProbePolicy::random_policy, 0.0).accuracy;
      c = c && ra >= ca;
      d = d && za <= ra - 0.1;
      cmp += fmt(" k=%d random %.3f constant %.3f gc0 %.3f;", k, ra, ca, za);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_probe).count();
    report(8, a && b && c && d, "probe protocol",
           fmt("(a) full-prefix probe %.4f vs direct accuracy %.4f: %s; (b) random k-trend [%s] spearman %.3f: %s; (c)(d)%s c %s, d %s (%.0fs)",
               rf.cells[0].accuracy, eq1, a ? "ok" : "no", trend.c_str(), rho, b ? "ok" : "no", cmp.c_str(),
               c ? "ok" : "no", d ? "ok" : "no", secs));
  }

  // 9. sequential memorisation
  {
    std::vector<TokenString> strings;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) strings.push_back(uniform_string(a26, kN, seed));
    MicroLm model(desk_model());
    const int eps = kEpochs;
    const auto res = run_sequential(model, strings, eps, desk_train(eps));
    const auto& acc1 = res.accuracy[0];
    double peak = 0;
    for (double x : acc1)
      if (!std::isnan(x)) peak = std::max(peak, x);
    const double end1 = acc1.back();
    auto to99 = [&](std::size_t j) {
      for (int e = 0; e <= eps; ++e)
        if (res.accuracy[j][j * eps + static_cast<std::size_t>(e)] >= 0.99) return e;
      return eps + 1;
    };
    const int e1 = to99(0), e4 = to99(3);
    report(9, peak - end1 >= 0.2 && e4 <= e1, "sequential memorisation (K=4)",
           fmt("string 1 peak %.4f, after string 4 %.4f (drop %.4f); epochs to 99%%: string 1 %d, 2 %d, 3 %d, 4 %d", peak, end1,
               peak - end1, e1, to99(1), to99(2), e4));
  }

  // 10. memorisation order
  {
    std::vector<CorrectnessBitmap> bms;
    for (const auto& e : r26.traces) bms.push_back(e.bitmap);
    const auto me = memorisation_epochs(bms);
    const auto pc = position_epoch_correlation(me.initial);
    double worst = 0;
    for (const auto& b : bms) {
      DiscrepancyOptions opt;
      opt.seed = static_cast<std::uint64_t>(b.epoch);
      worst = std::max(worst, std::abs(discrepancy(b, opt)));
    }
    report(10, std::abs(pc.rho) < 0.3 && worst < 0.05, "memorisation-order randomness",
           fmt("spearman(position, initial epoch) %.4f (%zu never memorised); max |discrepancy| over %zu epochs %.4f", pc.rho,
               pc.excluded, bms.size(), worst));
  }

  // 11. repeated substring
  {
    const TokenString rep = repeated_substring_string(a26, 64, kN, kStringSeed);
    const TokenString fresh = uniform_string(a26, 64, kStringSeed);
    const Run rr = train(rep);
    const Run rf = train(fresh);
    const Phases ph = phase_detect(r26.traces, 26);
    const int at = ph.guess_plateau ? ph.guess_plateau->last : -1;
    auto acc_at = [&](const std::vector<EpochTrace>& t) -> double {
      for (const auto& e : t)
        if (e.epoch == at) return e.accuracy;
      return NAN;
    };
    const double acc_rep = acc_at(rr.traces), acc_rand = acc_at(r26.traces);
    const int full_rep = budget_epochs(rr.traces, 1.0), full_fresh = budget_epochs(rf.traces, 1.0);
    const bool p1 = at >= 0 && acc_rep > acc_rand;
    const bool p2 = full_rep <= kEpochs && full_fresh <= kEpochs && full_rep <= 1.25 * full_fresh;
    report(11, p1 && p2, "repeated-substring in-context effect (u=64, n=256)",
           fmt("at end of guess plateau (epoch %d): repeated %.4f vs random %.4f; epochs to full recall: repeated %s, fresh n=64 %s",
               at, acc_rep, acc_rand, epochs_label(full_rep).c_str(), epochs_label(full_fresh).c_str()));
  }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("# %d criteria failed (%d not listed as known); total %.0fs\n", failures, unexpected, secs);
  return unexpected == 0 ? 0 : 1;
}
