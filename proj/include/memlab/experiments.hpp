#pragma once

// Manifest-driven experiment runs and phase detection.
//
// Manifest (JSON):
//   name               required
//   seed               global seed (default 0); fills any seed left unset below
//   output_dir         default "out/<name>"; relative paths resolve under
//                      $MEMLAB_OUT when that is set
//   mode               "memorisation" (each string trained on a fresh model)
//                      or "sequential" (all strings, one model, in order)
//   model              model config; ignored when bridge_endpoint is given
//   bridge_endpoint    "stdio:<cmd>" or "tcp:<host>:<port>"
//   train              train config
//   epochs_per_string  sequential mode only (default train.epochs)
//   strings            [{name, <recipe fields>}], at least one
//   metrics            subset of phase, memorisation_order, discrepancy,
//                      contiguous_recall, in_context_profile (default all)
//   probes             [probe spec], run on each final model
//   checkpoint_epochs  epochs to save model checkpoints at
//   repeats            independent repeats with shifted seeds (default 1)

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "memlab/bridge_client.hpp"
#include "memlab/io.hpp"
#include "memlab/metrics.hpp"
#include "memlab/probes.hpp"
#include "memlab/svg.hpp"
#include "memlab/trainer.hpp"

namespace memlab {

class ManifestError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// ---------------------------------------------------------------------------
// Phase detection

struct PhaseTolerances {
  double acc_factor = 0.05;      // tol_a = acc_factor * (1 - 1/l)
  double entropy_factor = 0.1;   // tol_h = entropy_factor * ln l
  double p_min = 0.9;
  double margin = 0.05;
  std::size_t min_entries = 2;   // a single evaluated epoch is not a plateau
};

struct EpochRange {
  int first = 0;
  int last = 0;
  bool operator==(const EpochRange&) const = default;
};

struct Phases {
  std::optional<EpochRange> guess_plateau;
  std::optional<int> memorisation_onset;
};

inline bool in_guess_band(const EpochTrace& t, int ell, const PhaseTolerances& tol = {}) {
  const double base = 1.0 / ell, lnl = std::log(static_cast<double>(ell));
  return std::abs(t.accuracy - base) <= tol.acc_factor * (1.0 - base) &&
         std::abs(t.entropy - lnl) <= tol.entropy_factor * lnl && t.agg_prob >= tol.p_min;
}

/// Longest run of consecutive trace entries inside the guess band (earliest
/// on ties), and the first epoch from which accuracy stays above 1/l + margin.
inline Phases phase_detect(std::span<const EpochTrace> trace, int ell, const PhaseTolerances& tol = {}) {
  detail::require(!trace.empty(), "phase_detect: empty trace");
  detail::require(ell >= 2, "phase_detect: alphabet size must be >= 2");
  Phases out;
  std::size_t best_len = 0, best_start = 0, run = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    run = in_guess_band(trace[i], ell, tol) ? run + 1 : 0;
    if (run > best_len) {
      best_len = run;
      best_start = i + 1 - run;
    }
  }
  if (best_len >= tol.min_entries)
    out.guess_plateau = EpochRange{trace[best_start].epoch, trace[best_start + best_len - 1].epoch};
  const double thr = 1.0 / ell + tol.margin;
  std::optional<std::size_t> from;
  for (std::size_t i = trace.size(); i-- > 0;) {
    if (trace[i].accuracy <= thr) break;
    from = i;
  }
  if (from) out.memorisation_onset = trace[*from].epoch;
  return out;
}

inline Phases phase_detect(std::span<const EpochTrace> trace, const Alphabet& alphabet, const PhaseTolerances& tol = {}) {
  return phase_detect(trace, alphabet.size(), tol);
}

// ---------------------------------------------------------------------------
// Manifest

inline constexpr const char* kAllMetrics[] = {"phase", "memorisation_order", "discrepancy", "contiguous_recall",
                                              "in_context_profile"};

struct StringEntry {
  std::string name;
  Json recipe;
};

struct ExperimentManifest {
  std::string name;
  std::uint64_t seed = 0;
  std::string output_dir;
  std::string mode = "memorisation";
  ModelConfig model;
  std::optional<std::string> bridge_endpoint;
  TrainConfig train;
  int epochs_per_string = 0;
  std::vector<StringEntry> strings;
  std::vector<std::string> metrics;
  std::vector<ProbeSpec> probes;
  std::vector<int> checkpoint_epochs;
  int repeats = 1;
  Json source;  // effective manifest, hashed

  bool wants(const std::string& metric) const {
    return std::find(metrics.begin(), metrics.end(), metric) != metrics.end();
  }
};

/// FNV-1a 64 over the compact, key-sorted JSON form; 16 hex digits.
inline std::string manifest_hash(const Json& manifest) {
  const std::string text = nlohmann::json::parse(manifest.dump()).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline ProbeSpec probe_spec_from_json(const Json& j, std::uint64_t default_seed) {
  ProbeSpec p;
  if (j.contains("prefix_lengths")) {
    p.prefix_lengths.clear();
    for (const auto& k : j["prefix_lengths"]) {
      if (k.is_string() && k.get<std::string>() == "full") p.prefix_lengths.push_back(kFullPrefix);
      else p.prefix_lengths.push_back(k.get<int>());
    }
  }
  if (j.contains("policies")) {
    p.policies.clear();
    for (const auto& x : j["policies"]) p.policies.push_back(probe_policy_from_string(x.get<std::string>()));
  } else if (j.contains("policy")) {
    p.policies = {probe_policy_from_string(j["policy"].get<std::string>())};
  }
  if (j.contains("gc_scales")) p.gc_scales = j["gc_scales"].get<std::vector<double>>();
  else if (j.contains("gc_scale")) p.gc_scales = {j["gc_scale"].get<double>()};
  p.samples_per_position = j.value("samples_per_position", p.samples_per_position);
  if (j.contains("subsample") && !j["subsample"].is_null()) p.subsample = j["subsample"].get<std::size_t>();
  p.position_seed = j.value("position_seed", default_seed);
  p.seed = j.value("seed", default_seed);
  p.validate();
  return p;
}

inline Json to_json(const ProbeSpec& p) {
  Json ks = Json::array();
  for (int k : p.prefix_lengths) ks.push_back(k == kFullPrefix ? Json("full") : Json(k));
  Json pols = Json::array();
  for (auto pol : p.policies) pols.push_back(to_string(pol));
  Json j{{"prefix_lengths", ks}, {"policies", pols}, {"gc_scales", p.gc_scales},
         {"samples_per_position", p.samples_per_position}};
  j["subsample"] = p.subsample ? Json(*p.subsample) : Json(nullptr);
  j["position_seed"] = p.position_seed;
  j["seed"] = p.seed;
  return j;
}

/// Parse and validate; `seed_override` / `out_override` come from the CLI.
inline ExperimentManifest parse_manifest(const Json& j, std::optional<std::uint64_t> seed_override = std::nullopt,
                                         std::optional<std::string> out_override = std::nullopt) {
  try {
    if (!j.is_object()) throw ManifestError("manifest must be a JSON object");
    ExperimentManifest m;
    m.source = j;
    if (!j.contains("name") || !j["name"].is_string() || j["name"].get<std::string>().empty())
      throw ManifestError("manifest needs a non-empty name");
    m.name = j["name"].get<std::string>();
    m.seed = seed_override ? *seed_override : j.value("seed", std::uint64_t{0});
    m.source["seed"] = m.seed;
    m.mode = j.value("mode", m.mode);
    if (m.mode != "memorisation" && m.mode != "sequential") throw ManifestError("mode must be memorisation or sequential");

    std::string out = out_override ? *out_override : j.value("output_dir", "out/" + m.name);
    if (!out_override) {
      if (const char* root = std::getenv("MEMLAB_OUT"); root && *root && std::filesystem::path(out).is_relative())
        out = (std::filesystem::path(root) / out).string();
    }
    m.output_dir = out;
    m.source.erase("output_dir");  // where results go is not part of the experiment

    if (j.contains("bridge_endpoint") && !j["bridge_endpoint"].is_null())
      m.bridge_endpoint = j["bridge_endpoint"].get<std::string>();
    Json model = j.value("model", Json::object());
    if (!model.contains("init_seed")) model["init_seed"] = m.seed;
    m.model = model_config_from_json(model);
    Json train = j.value("train", Json::object());
    if (!train.contains("seed")) train["seed"] = m.seed;
    m.train = train_config_from_json(train);
    m.epochs_per_string = j.value("epochs_per_string", m.train.epochs);
    if (m.mode == "sequential" && m.epochs_per_string < 1) throw ManifestError("epochs_per_string must be >= 1");

    if (!j.contains("strings") || !j["strings"].is_array() || j["strings"].empty())
      throw ManifestError("manifest needs a non-empty strings array");
    std::size_t idx = 0;
    for (const auto& s : j["strings"]) {
      if (!s.is_object()) throw ManifestError("each string entry must be an object");
      StringEntry e;
      e.name = s.value("name", "s" + std::to_string(idx));
      e.recipe = s;
      e.recipe.erase("name");
      if (!e.recipe.contains("seed")) e.recipe["seed"] = derive_seed(m.seed, {idx});
      for (const auto& other : m.strings)
        if (other.name == e.name) throw ManifestError("duplicate string name " + e.name);
      if (e.name.find('/') != std::string::npos || e.name == "." || e.name == "..")
        throw ManifestError("string name must be a plain file name: " + e.name);
      generate_string(e.recipe);  // resolves now, fails early
      m.strings.push_back(std::move(e));
      ++idx;
    }
    if (m.mode == "sequential") {
      for (const auto& e : m.strings) {
        const auto s = generate_string(e.recipe);
        const auto first = generate_string(m.strings.front().recipe);
        if (s.size() != first.size() || s.alphabet.tokens != first.alphabet.tokens)
          throw ManifestError("sequential strings must share length and alphabet");
      }
    }

    if (j.contains("metrics")) {
      m.metrics = j["metrics"].get<std::vector<std::string>>();
      for (const auto& x : m.metrics)
        if (std::find(std::begin(kAllMetrics), std::end(kAllMetrics), x) == std::end(kAllMetrics))
          throw ManifestError("unknown metric " + x);
    } else {
      m.metrics.assign(std::begin(kAllMetrics), std::end(kAllMetrics));
    }
    if (j.contains("probes"))
      for (const auto& p : j["probes"]) m.probes.push_back(probe_spec_from_json(p, m.seed));
    m.checkpoint_epochs = j.value("checkpoint_epochs", std::vector<int>{});
    m.repeats = j.value("repeats", 1);
    if (m.repeats < 1) throw ManifestError("repeats must be >= 1");
    return m;
  } catch (const ManifestError&) {
    throw;
  } catch (const std::exception& e) {
    throw ManifestError(std::string("invalid manifest: ") + e.what());
  }
}

inline ExperimentManifest load_manifest(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt,
                                        std::optional<std::string> out_override = std::nullopt) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const std::exception& e) {
    throw ManifestError("cannot read manifest " + path + ": " + e.what());
  }
  return parse_manifest(j, seed_override, out_override);
}

// ---------------------------------------------------------------------------
// Reports and plots

inline std::string csv_comment(const std::string& hash, int ell) {
  return "# memlab manifest=" + hash + " ell=" + std::to_string(ell) + "\n";
}

/// ell recorded in a summary CSV comment, if any.
inline std::optional<int> csv_ell(const std::string& csv) {
  const auto pos = csv.find(" ell=");
  if (csv.empty() || csv[0] != '#' || pos == std::string::npos || pos > csv.find('\n')) return std::nullopt;
  return std::atoi(csv.c_str() + pos + 5);
}

inline std::vector<Baseline> guess_baselines(const std::string& metric, std::optional<int> ell) {
  if (!ell) return {};
  if (metric == "accuracy") return {{"1/l = " + detail::tick_label(1.0 / *ell), 1.0 / *ell}};
  if (metric == "entropy" || metric == "loss")
    return {{"ln l = " + detail::tick_label(std::log(static_cast<double>(*ell))), std::log(static_cast<double>(*ell))}};
  return {};
}

inline constexpr const char* kPlotMetrics[] = {"accuracy", "loss", "agg_prob", "entropy", "kld"};

/// One SVG per summary metric from (name, summary CSV) pairs; plots need the CSVs only.
inline std::map<std::string, std::string> plots_from_csv(const std::vector<std::pair<std::string, std::string>>& csvs,
                                                         std::optional<int> ell = std::nullopt,
                                                         const std::string& tag = "") {
  std::vector<std::pair<std::string, Table>> tables;
  std::vector<int> ells;
  if (ell) ells.push_back(*ell);
  for (const auto& [name, text] : csvs) {
    tables.emplace_back(name, parse_numeric_csv(text));
    const auto e = csv_ell(text);
    if (!ell && e && std::find(ells.begin(), ells.end(), *e) == ells.end()) ells.push_back(*e);
  }
  std::map<std::string, std::string> out;
  for (const char* metric : kPlotMetrics) {
    PlotSpec spec;
    spec.title = std::string(metric) + " vs epoch";
    spec.ylabel = metric;
    for (int e : ells)
      for (auto& b : guess_baselines(metric, e)) spec.baselines.push_back(std::move(b));
    for (const auto& [name, t] : tables) {
      Series s;
      s.name = name;
      const auto ce = t.column("epoch"), cm = t.column(metric);
      for (const auto& row : t.rows) {
        s.xs.push_back(row[ce]);
        s.ys.push_back(row[cm]);
      }
      spec.series.push_back(std::move(s));
    }
    std::string svg = svg_line_plot(spec);
    if (!tag.empty()) svg.insert(svg.find('\n') + 1, "<!-- memlab manifest=" + tag + " -->\n");
    out[metric] = std::move(svg);
  }
  return out;
}

/// Metrics computed from a finished trace.
inline Json trace_metrics(const ExperimentManifest& m, const std::vector<EpochTrace>& traces, const Alphabet& alphabet,
                          const std::optional<ProbMatrix>& final_probs) {
  Json j = Json::object();
  if (m.wants("phase")) {
    const Phases ph = phase_detect(traces, alphabet);
    Json p;
    p["guess_plateau"] = ph.guess_plateau ? Json::array({ph.guess_plateau->first, ph.guess_plateau->last}) : Json(nullptr);
    p["memorisation_onset"] = ph.memorisation_onset ? Json(*ph.memorisation_onset) : Json(nullptr);
    j["phase"] = p;
  }
  std::vector<CorrectnessBitmap> bitmaps;
  for (const auto& t : traces) bitmaps.push_back(t.bitmap);
  if (m.wants("memorisation_order")) {
    const auto me = memorisation_epochs(bitmaps);
    Json o;
    o["initial"] = me.initial;
    o["stable"] = me.stable;
    for (const char* which : {"initial", "stable"}) {
      const auto& ep = std::string(which) == "initial" ? me.initial : me.stable;
      try {
        const auto c = position_epoch_correlation(ep);
        o[std::string("spearman_") + which] = c.rho;
        o[std::string("excluded_") + which] = c.excluded;
      } catch (const std::exception&) {
        o[std::string("spearman_") + which] = nullptr;
      }
    }
    j["memorisation_order"] = o;
  }
  if (m.wants("discrepancy")) {
    Json per = Json::array();
    double worst = 0.0;
    for (const auto& b : bitmaps) {
      if (b.size() < DiscrepancyOptions{}.window) break;
      DiscrepancyOptions opt;
      opt.seed = derive_seed(m.seed, {static_cast<std::uint64_t>(b.epoch)});
      const double d = discrepancy(b, opt);
      worst = std::max(worst, std::abs(d));
      per.push_back(Json::array({b.epoch, d}));
    }
    j["discrepancy"] = {{"max_abs", worst}, {"per_epoch", per}};
  }
  if (m.wants("contiguous_recall") && bitmaps.back().size() >= 50) {
    Json per = Json::array();
    for (const auto& b : bitmaps) per.push_back(Json::array({b.epoch, contiguous_recall(b, 50)}));
    j["contiguous_recall"] = {{"window", 50}, {"final", contiguous_recall(bitmaps.back(), 50)}, {"per_epoch", per}};
  }
  if (m.wants("in_context_profile") && final_probs && final_probs->rows() >= 50)
    j["in_context_profile"] = {{"window", 50}, {"final", in_context_profile(*final_probs, alphabet, 50)}};
  return j;
}

// ---------------------------------------------------------------------------
// Running

/// Single-regime training against a bridge: forward for the trace, then one
/// train_step per epoch.
inline std::vector<EpochTrace> run_memorisation(BridgeModel& model, const TokenString& s, const TrainConfig& cfg,
                                                const TrainHooks& hooks = {}) {
  cfg.validate();
  detail::require(cfg.regime == BatchRegime::single, "bridge training supports the single regime only");
  detail::require(!s.alphabet.contains(model.bos()), "alphabet contains the bridge model's BOS token");
  std::vector<EpochTrace> traces;
  auto record = [&](int epoch) {
    if (epoch % cfg.eval_every != 0 && epoch != cfg.epochs) return;
    EpochTrace tr = evaluate_span(span_distributions(model, s), s.random_part(), s.alphabet, epoch);
    if (hooks.on_trace) hooks.on_trace(tr);
    traces.push_back(std::move(tr));
  };
  for (int e = 0; e < cfg.epochs; ++e) {
    record(e);
    const double loss = model.train_step(s.tokens, lr_at(cfg, e));
    if (!std::isfinite(loss)) throw NumericalFailure("bridge reported a non-finite loss at epoch " + std::to_string(e));
  }
  record(cfg.epochs);
  return traces;
}

struct RunOutcome {
  std::string output_dir;
  std::string hash;
  Json report;
};

namespace detail {

inline void write_tagged_json(const std::filesystem::path& p, Json j, const std::string& hash) {
  j["manifest_hash"] = hash;
  write_file(p.string(), j.dump(2) + "\n");
}

inline void write_plots(const std::filesystem::path& dir, const std::map<std::string, std::string>& plots,
                        const std::string& prefix = "") {
  for (const auto& [metric, svg] : plots) write_file((dir / (prefix + metric + ".svg")).string(), svg);
}

}  // namespace detail

/// Execute a manifest; writes everything under m.output_dir. On failure a
/// FAILED marker (stage and message) is written, partial outputs stay, and
/// the exception propagates.
inline RunOutcome run_manifest(const ExperimentManifest& m, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  RunOutcome outcome;
  outcome.output_dir = m.output_dir;
  outcome.hash = manifest_hash(m.source);
  const std::string& hash = outcome.hash;
  const fs::path root(m.output_dir);
  std::string stage = "setup";
  try {
    fs::create_directories(root);
    fs::remove(root / "FAILED");
    detail::write_tagged_json(root / "manifest.json", m.source, hash);
    Json report;
    report["name"] = m.name;
    report["manifest_hash"] = hash;
    report["seed"] = m.seed;
    report["rng"] = kRngName;
    report["mode"] = m.mode;
    report["output_dir"] = m.output_dir;
    Json runs = Json::array();

    std::unique_ptr<BridgeModel> bridge;
    if (m.bridge_endpoint) {
      stage = "bridge";
      bridge = std::make_unique<BridgeModel>(*m.bridge_endpoint);
      report["bridge"] = bridge->info().raw;
    }

    for (int rep = 0; rep < m.repeats; ++rep) {
      const fs::path rep_dir = m.repeats == 1 ? root : root / ("rep" + std::to_string(rep));
      auto shifted = [&](std::uint64_t seed) { return rep == 0 ? seed : derive_seed(seed, {static_cast<std::uint64_t>(rep)}); };

      stage = "generation";
      std::vector<TokenString> strings;
      for (const auto& e : m.strings) {
        Json r = e.recipe;
        r["seed"] = shifted(r["seed"].get<std::uint64_t>());
        strings.push_back(generate_string(r));
        fs::create_directories(rep_dir / e.name);
        detail::write_tagged_json(rep_dir / e.name / "recipe.json", to_json(strings.back()), hash);
      }

      ModelConfig mc = m.model;
      mc.init_seed = shifted(mc.init_seed);
      TrainConfig tc = m.train;
      tc.seed = shifted(tc.seed);

      if (m.mode == "sequential") {
        stage = "training";
        if (bridge) throw InvalidArgument("sequential mode needs the micro model");
        MicroLm model(mc);
        const auto res = run_sequential(model, strings, m.epochs_per_string, tc);
        std::string csv = csv_comment(hash, strings.front().alphabet.size()) + "string";
        const std::size_t cols = res.accuracy.front().size();
        for (std::size_t g = 0; g < cols; ++g) csv += "," + std::to_string(g);
        csv += "\n";
        for (std::size_t j = 0; j < res.accuracy.size(); ++j) {
          csv += std::to_string(j);
          for (double a : res.accuracy[j]) csv += "," + format_number(a);
          csv += "\n";
        }
        write_file((rep_dir / "seqmem_accuracy.csv").string(), csv);
        PlotSpec spec;
        spec.title = "sequential memorisation";
        spec.ylabel = "accuracy";
        spec.baselines = guess_baselines("accuracy", strings.front().alphabet.size());
        for (std::size_t j = 0; j < res.accuracy.size(); ++j) {
          Series s;
          s.name = m.strings[j].name;
          for (std::size_t g = 0; g < cols; ++g) {
            s.xs.push_back(static_cast<double>(g));
            s.ys.push_back(res.accuracy[j][g]);
          }
          spec.series.push_back(std::move(s));
        }
        write_file((rep_dir / "seqmem_accuracy.svg").string(), svg_line_plot(spec));
        Json run{{"repeat", rep}, {"init_seed", mc.init_seed}, {"train_seed", tc.seed}};
        Json names = Json::array();
        for (const auto& e : m.strings) names.push_back(e.name);
        run["strings"] = names;
        Json to99 = Json::array();
        for (std::size_t j = 0; j < res.accuracy.size(); ++j) {
          Json hit = nullptr;
          for (int e = 0; e <= res.epochs_per_string; ++e) {
            const std::size_t g = j * static_cast<std::size_t>(res.epochs_per_string) + static_cast<std::size_t>(e);
            if (res.accuracy[j][g] >= 0.99) {
              hit = e;
              break;
            }
          }
          to99.push_back(hit);
        }
        run["epochs_to_99"] = to99;
        save_checkpoint(model, (rep_dir / "final.ckpt").string(), {{"manifest_hash", hash}});
        runs.push_back(run);
        continue;
      }

      std::vector<std::pair<std::string, std::string>> csvs;
      for (std::size_t si = 0; si < strings.size(); ++si) {
        const TokenString& s = strings[si];
        const fs::path dir = rep_dir / m.strings[si].name;
        stage = "training " + m.strings[si].name;
        if (log) *log << "[" << m.name << "] training " << m.strings[si].name << "\n";
        std::vector<EpochTrace> traces;
        std::optional<ProbMatrix> final_probs;
        std::unique_ptr<MicroLm> model;
        const LanguageModel* probe_model = nullptr;
        std::string jsonl;
        TrainHooks hooks;
        hooks.on_trace = [&](const EpochTrace& t) {
          Json j = to_json(t);
          j["manifest_hash"] = hash;
          jsonl += j.dump() + "\n";
        };
        try {
          if (bridge) {
            traces = run_memorisation(*bridge, s, tc, hooks);
            final_probs = span_distributions(*bridge, s);
            probe_model = bridge.get();
          } else {
            model = std::make_unique<MicroLm>(mc);
            hooks.checkpoint_epochs = m.checkpoint_epochs;
            hooks.on_checkpoint = [&](int epoch, const MicroLm& mdl) {
              save_checkpoint(mdl, (dir / ("epoch_" + std::to_string(epoch) + ".ckpt")).string(), {{"manifest_hash", hash}});
            };
            traces = run_memorisation(*model, s, tc, hooks);
            final_probs = span_distributions(*model, s);
            probe_model = model.get();
          }
        } catch (...) {
          write_file((dir / "trace.jsonl").string(), jsonl);
          throw;
        }
        write_file((dir / "trace.jsonl").string(), jsonl);
        const std::string csv = csv_comment(hash, s.alphabet.size()) + summary_csv(traces);
        write_file((dir / "summary.csv").string(), csv);
        csvs.emplace_back(m.strings[si].name, csv);
        detail::write_plots(dir, plots_from_csv({{m.strings[si].name, csv}}, s.alphabet.size(), hash));

        stage = "metrics " + m.strings[si].name;
        Json metrics = trace_metrics(m, traces, s.alphabet, final_probs);
        metrics["final_accuracy"] = traces.back().accuracy;
        const auto to99 = epochs_to_accuracy(traces, 0.99);
        metrics["epochs_to_99"] = to99 ? Json(*to99) : Json(nullptr);
        detail::write_tagged_json(dir / "metrics.json", metrics, hash);

        if (!m.probes.empty()) {
          stage = "probes " + m.strings[si].name;
          std::string pcsv = "# memlab manifest=" + hash + "\n";
          Json pjson = Json::array();
          bool first = true;
          for (const auto& spec : m.probes) {
            const ProbeReport rep_ = probe_sweep(*probe_model, s, spec);
            std::string body = probe_report_csv(rep_);
            if (!first) body.erase(0, body.find('\n') + 1);
            pcsv += body;
            first = false;
            Json pj = probe_report_json(rep_);
            pj["spec"] = to_json(spec);
            pjson.push_back(pj);
          }
          write_file((dir / "probes.csv").string(), pcsv);
          detail::write_tagged_json(dir / "probes.json", Json{{"reports", pjson}}, hash);
        }
        if (!bridge) save_checkpoint(*model, (dir / "final.ckpt").string(), {{"manifest_hash", hash}});
        runs.push_back(Json{{"repeat", rep},
                            {"string", m.strings[si].name},
                            {"recipe_seed", s.recipe.seed},
                            {"init_seed", bridge ? Json(nullptr) : Json(mc.init_seed)},
                            {"train_seed", tc.seed},
                            {"final_accuracy", traces.back().accuracy}});
      }
      if (csvs.size() > 1) detail::write_plots(rep_dir, plots_from_csv(csvs, std::nullopt, hash), "compare_");
    }
    report["runs"] = runs;
    report["status"] = "ok";
    detail::write_tagged_json(root / "run.json", report, hash);
    outcome.report = report;
    return outcome;
  } catch (const std::exception& e) {
    std::error_code ec;
    fs::create_directories(root, ec);
    write_file((root / "FAILED").string(), "stage: " + stage + "\nerror: " + e.what() + "\nmanifest_hash: " + hash + "\n");
    throw;
  }
}

}  // namespace memlab
