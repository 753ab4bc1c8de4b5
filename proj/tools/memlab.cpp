// memlab command line.
//
// Exit codes: 0 success, 1 other error, 2 invalid manifest or arguments,
// 3 numerical failure, 4 bridge unreachable.

#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "memlab/bridge_client.hpp"
#include "memlab/experiments.hpp"
#include "memlab/io.hpp"
#include "memlab/probes.hpp"

namespace fs = std::filesystem;
using namespace memlab;

namespace {

struct Options {
  std::string manifest;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string bridge_endpoint;
  std::string recipe;
  std::string checkpoint;
  std::string string_file;
  std::string spec;
  std::vector<std::string> csvs;
  std::optional<int> ell;
};

std::optional<std::string> opt_str(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return s;
}

int cmd_generate(const Options& o) {
  if (!o.recipe.empty() == !o.manifest.empty()) throw InvalidArgument("generate needs exactly one of --recipe or --manifest");
  if (o.out.empty()) throw InvalidArgument("generate needs --out");
  if (!o.recipe.empty()) {
    Json r = Json::parse(read_file(o.recipe));
    if (o.seed) r["seed"] = *o.seed;
    const TokenString s = generate_string(r);
    write_file(o.out, to_json(s).dump() + "\n");
    std::cout << o.out << "\n";
    return 0;
  }
  const ExperimentManifest m = load_manifest(o.manifest, o.seed);
  fs::create_directories(o.out);
  for (const auto& e : m.strings) {
    const fs::path p = fs::path(o.out) / (e.name + ".json");
    write_file(p.string(), to_json(generate_string(e.recipe)).dump() + "\n");
    std::cout << p.string() << "\n";
  }
  return 0;
}

int cmd_train(const Options& o, bool sequential) {
  if (o.manifest.empty()) throw ManifestError("--manifest is required");
  Json j;
  try {
    j = Json::parse(read_file(o.manifest));
  } catch (const std::exception& e) {
    throw ManifestError(std::string("cannot read manifest: ") + e.what());
  }
  if (sequential) j["mode"] = "sequential";
  if (!o.bridge_endpoint.empty()) j["bridge_endpoint"] = o.bridge_endpoint;
  const ExperimentManifest m = parse_manifest(j, o.seed, opt_str(o.out));
  const RunOutcome r = run_manifest(m, &std::cerr);
  std::cout << "output: " << r.output_dir << "\nmanifest_hash: " << r.hash << "\nseed: " << m.seed << "\n";
  return 0;
}

int cmd_probe(const Options& o) {
  if (o.string_file.empty() || o.spec.empty() || o.out.empty())
    throw InvalidArgument("probe needs --string, --spec and --out");
  if (o.checkpoint.empty() == o.bridge_endpoint.empty())
    throw InvalidArgument("probe needs exactly one of --checkpoint or --bridge-endpoint");
  const TokenString s = token_string_from_json(Json::parse(read_file(o.string_file)));
  const Json spec_json = Json::parse(read_file(o.spec));
  ProbeSpec spec = probe_spec_from_json(spec_json, spec_json.value("seed", std::uint64_t{0}));
  if (o.seed) spec.seed = *o.seed;
  std::unique_ptr<LanguageModel> model;
  if (!o.checkpoint.empty()) model = std::make_unique<MicroLm>(load_checkpoint(o.checkpoint));
  else model = std::make_unique<BridgeModel>(o.bridge_endpoint);
  const ProbeReport rep = probe_sweep(*model, s, spec);
  fs::create_directories(o.out);
  write_file((fs::path(o.out) / "probes.csv").string(), probe_report_csv(rep));
  Json pj = probe_report_json(rep);
  pj["spec"] = to_json(spec);
  write_file((fs::path(o.out) / "probes.json").string(), pj.dump(2) + "\n");
  std::cout << probe_report_csv(rep);
  return 0;
}

int cmd_report(const Options& o) {
  if (o.csvs.empty() || o.out.empty()) throw InvalidArgument("report needs --csv and --out");
  std::vector<std::pair<std::string, std::string>> csvs;
  for (const auto& path : o.csvs) {
    const fs::path p(path);
    const std::string name = p.stem() == "summary" && p.has_parent_path() ? p.parent_path().filename().string()
                                                                          : p.stem().string();
    csvs.emplace_back(name, read_file(path));
  }
  fs::create_directories(o.out);
  for (const auto& [metric, svg] : plots_from_csv(csvs, o.ell)) {
    const fs::path p = fs::path(o.out) / (metric + ".svg");
    write_file(p.string(), svg);
    std::cout << p.string() << "\n";
  }
  return 0;
}

int cmd_bridge_info(const Options& o) {
  BridgeModel m(o.bridge_endpoint);
  std::cout << m.info().raw.dump() << "\n";
  return 0;
}

void add_common(CLI::App* c, Options& o) {
  c->add_option("--manifest", o.manifest, "experiment manifest (JSON)");
  c->add_option("--seed", o.seed, "global seed override");
  c->add_option("--out", o.out, "output path");
  c->add_option("--bridge-endpoint", o.bridge_endpoint, "stdio:<command> or tcp:<host>:<port>");
}

int run(int argc, char** argv) {
  CLI::App app{"memlab: random-string memorisation lab"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "recipe -> string file");
  add_common(gen, o);
  gen->add_option("--recipe", o.recipe, "recipe JSON");

  auto* train = app.add_subcommand("train", "manifest -> traces, metrics, plots");
  add_common(train, o);

  auto* seq = app.add_subcommand("seqmem", "sequential memorisation from a manifest");
  add_common(seq, o);

  auto* probe = app.add_subcommand("probe", "checkpoint + probe spec -> probe report");
  add_common(probe, o);
  probe->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  probe->add_option("--string", o.string_file, "string JSON written by generate");
  probe->add_option("--spec", o.spec, "probe spec JSON");

  auto* report = app.add_subcommand("report", "summary CSV -> SVG plots");
  add_common(report, o);
  report->add_option("--csv", o.csvs, "summary CSV files")->expected(1, -1);
  report->add_option("--ell", o.ell, "alphabet size for the guess baselines");

  auto* bridge = app.add_subcommand("bridge", "run a subcommand against a bridge endpoint (no subcommand: print info)");
  bridge->add_option("--bridge-endpoint", o.bridge_endpoint, "stdio:<command> or tcp:<host>:<port>")->required();
  bridge->prefix_command();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (gen->parsed()) return cmd_generate(o);
  if (train->parsed()) return cmd_train(o, false);
  if (seq->parsed()) return cmd_train(o, true);
  if (probe->parsed()) return cmd_probe(o);
  if (report->parsed()) return cmd_report(o);
  if (bridge->parsed()) {
    const auto rest = bridge->remaining();
    if (rest.empty()) return cmd_bridge_info(o);
    std::vector<std::string> args{argv[0]};
    args.insert(args.end(), rest.begin(), rest.end());
    args.push_back("--bridge-endpoint");
    args.push_back(o.bridge_endpoint);
    std::vector<char*> cargs;
    for (auto& a : args) cargs.push_back(a.data());
    return run(static_cast<int>(cargs.size()), cargs.data());
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const BridgeError& e) {
    std::cerr << "bridge unreachable: " << e.what() << "\n";
    return 4;
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const ManifestError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "invalid JSON: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
