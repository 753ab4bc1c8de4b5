#pragma once

// Persistence: recipes and strings (JSON), model/train configs (JSON),
// traces (JSONL + summary CSV) and model checkpoints.
//
// Checkpoint layout:
//   8 bytes   "MEMLABCK"
//   u32 LE    format version (1)
//   u64 LE    header length h
//   h bytes   JSON header {config, step_count, tensors: [{name, rows, cols}]}
//   float32 LE tensor data, in header order, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "memlab/micro_lm.hpp"
#include "memlab/probes.hpp"
#include "memlab/string_lab.hpp"
#include "memlab/trainer.hpp"

namespace memlab {

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write " + path);
  out << data;
  if (!out) throw InvalidArgument("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Recipes and strings

inline Json to_json(const AlphabetSpec& a) {
  return Json{{"ell", a.ell}, {"vocab_size", a.vocab_size}, {"kind", to_string(a.kind)}, {"seed", a.seed}};
}

inline AlphabetSpec alphabet_spec_from_json(const Json& j) {
  AlphabetSpec a;
  a.ell = j.value("ell", a.ell);
  a.vocab_size = j.value("vocab_size", a.vocab_size);
  a.kind = alphabet_kind_from_string(j.value("kind", std::string("latin")));
  a.seed = j.value("seed", a.seed);
  return a;
}

/// Canonical form: kind, alphabet, the kind-specific fields, seed.
inline Json to_json(const Recipe& r) {
  Json j;
  j["kind"] = r.kind;
  j["alphabet"] = to_json(r.alphabet);
  for (const auto& [k, v] : r.params.items()) j[k] = v;
  j["seed"] = r.seed;
  return j;
}

/// Build a string from a recipe. Kinds: uniform {n}; entropy_matched {n,
/// target_entropy | target_ell}; conditional {n, ngram_order, map_seed,
/// rel_prob_k}; repeated_substring {n, unique_len}. Any kind may carry
/// "embedded": {total_len, offset?, seed, context_seed, zipf_exponent?}, which
/// places the string inside Zipf filler text that avoids the alphabet and the
/// id vocab_size - 1.
inline TokenString generate_string(const Json& recipe) {
  if (!recipe.is_object()) throw InvalidArgument("recipe must be a JSON object");
  const std::string kind = recipe.value("kind", std::string());
  const AlphabetSpec aspec = alphabet_spec_from_json(recipe.value("alphabet", Json::object()));
  const Alphabet alphabet = make_alphabet(aspec);
  const std::uint64_t seed = recipe.value("seed", std::uint64_t{0});
  if (!recipe.contains("n")) throw InvalidArgument("recipe needs n");
  const std::size_t n = recipe["n"].get<std::size_t>();
  TokenString s;
  if (kind == "uniform") {
    s = uniform_string(alphabet, n, seed);
  } else if (kind == "entropy_matched") {
    double target = 0.0;
    if (recipe.contains("target_ell")) target = std::log(recipe["target_ell"].get<double>());
    else if (recipe.contains("target_entropy")) target = recipe["target_entropy"].get<double>();
    else throw InvalidArgument("entropy_matched recipe needs target_entropy or target_ell");
    s = entropy_matched_string(alphabet, target, n, seed);
  } else if (kind == "conditional") {
    const auto map = balanced_privileged_map(alphabet, recipe.value("ngram_order", 1), recipe.value("map_seed", std::uint64_t{0}));
    s = conditional_string(map, recipe.value("rel_prob_k", 1.0), n, seed);
  } else if (kind == "repeated_substring") {
    if (!recipe.contains("unique_len")) throw InvalidArgument("repeated_substring recipe needs unique_len");
    s = repeated_substring_string(alphabet, recipe["unique_len"].get<std::size_t>(), n, seed);
  } else {
    throw InvalidArgument("unknown recipe kind: " + kind);
  }
  if (recipe.contains("embedded")) {
    const Json& e = recipe["embedded"];
    const std::size_t total = e.at("total_len").get<std::size_t>();
    detail::require(total >= n, "embedded total_len shorter than the string");
    std::vector<TokenId> excluded = alphabet.tokens;
    excluded.push_back(aspec.vocab_size - 1);
    ZipfTextSource src(aspec.vocab_size, excluded, e.value("zipf_exponent", 1.1), e.value("context_seed", std::uint64_t{0}));
    const auto ctx = src.take(total - n);
    std::optional<std::size_t> pos;
    if (e.contains("offset")) pos = e["offset"].get<std::size_t>();
    s = embed_in_context(s, ctx, total, pos, e.value("seed", std::uint64_t{0}));
    s.recipe.params["embedded"]["context_seed"] = e.value("context_seed", std::uint64_t{0});
    s.recipe.params["embedded"]["zipf_exponent"] = e.value("zipf_exponent", 1.1);
  }
  return s;
}

inline Json to_json(const TokenString& s) {
  return Json{{"recipe", to_json(s.recipe)},
              {"alphabet", {{"tokens", s.alphabet.tokens}, {"probs", s.alphabet.probs}}},
              {"span", {s.span.begin, s.span.length}},
              {"tokens", s.tokens}};
}

inline TokenString token_string_from_json(const Json& j) {
  TokenString s;
  const Json& r = j.at("recipe");
  s.recipe.kind = r.at("kind").get<std::string>();
  s.recipe.alphabet = alphabet_spec_from_json(r.at("alphabet"));
  s.recipe.seed = r.value("seed", std::uint64_t{0});
  s.recipe.params = Json::object();
  for (const auto& [k, v] : r.items())
    if (k != "kind" && k != "alphabet" && k != "seed") s.recipe.params[k] = v;
  s.alphabet.tokens = j.at("alphabet").at("tokens").get<std::vector<TokenId>>();
  s.alphabet.probs = j.at("alphabet").at("probs").get<std::vector<double>>();
  s.alphabet.vocab_size = s.recipe.alphabet.vocab_size;
  s.alphabet.spec = s.recipe.alphabet;
  s.alphabet.validate();
  s.tokens = j.at("tokens").get<std::vector<TokenId>>();
  const auto span = j.at("span").get<std::vector<std::size_t>>();
  detail::require(span.size() == 2 && span[0] + span[1] <= s.tokens.size(), "string span out of range");
  s.span = {span[0], span[1]};
  for (TokenId t : s.random_part()) detail::require(s.alphabet.contains(t), "string token outside its alphabet");
  return s;
}

// ---------------------------------------------------------------------------
// Configs

inline Json to_json(const ModelConfig& c) {
  return Json{{"vocab_size", c.vocab_size},     {"d_model", c.d_model},
              {"n_layers", c.n_layers},         {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},                 {"max_seq_len", c.max_seq_len},
              {"pos_encoding", c.pos_encoding == PosEncoding::rotary ? "rotary" : "absolute"},
              {"bos_token_id", c.bos()},        {"init_seed", c.init_seed},
              {"init_std", c.init_std},         {"rope_base", c.rope_base}};
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", 4 * c.d_model);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  const std::string pe = j.value("pos_encoding", std::string("rotary"));
  if (pe == "rotary") c.pos_encoding = PosEncoding::rotary;
  else if (pe == "absolute") c.pos_encoding = PosEncoding::absolute;
  else throw InvalidArgument("unknown pos_encoding: " + pe);
  c.bos_token_id = j.value("bos_token_id", c.bos_token_id);
  c.init_seed = j.value("init_seed", c.init_seed);
  c.init_std = j.value("init_std", c.init_std);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.validate();
  return c;
}

inline Json to_json(const TrainConfig& c) {
  return Json{{"epochs", c.epochs},
              {"initial_lr", c.initial_lr},
              {"lr_schedule", to_string(c.lr_schedule)},
              {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
              {"regime", to_string(c.regime)},
              {"pieces", c.pieces},
              {"batch_size", c.batch_size},
              {"context_size", c.context_size},
              {"context", {{"kind", c.context.kind}, {"path", c.context.path}, {"zipf_exponent", c.context.zipf_exponent}}},
              {"eval_every", c.eval_every},
              {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.initial_lr = j.value("initial_lr", c.initial_lr);
  const std::string sched = j.value("lr_schedule", std::string("linear_decay_to_zero"));
  if (sched == "constant") c.lr_schedule = LrSchedule::constant;
  else if (sched == "linear_decay_to_zero") c.lr_schedule = LrSchedule::linear_decay_to_zero;
  else throw InvalidArgument("unknown lr_schedule: " + sched);
  if (j.contains("adam")) {
    const Json& a = j["adam"];
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
  }
  const std::string regime = j.value("regime", std::string("single"));
  if (regime == "single") c.regime = BatchRegime::single;
  else if (regime == "partitioned") c.regime = BatchRegime::partitioned;
  else if (regime == "in_batch") c.regime = BatchRegime::in_batch;
  else if (regime == "embedded") c.regime = BatchRegime::embedded;
  else throw InvalidArgument("unknown regime: " + regime);
  c.pieces = j.value("pieces", c.pieces);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.context_size = j.value("context_size", c.context_size);
  if (j.contains("context")) {
    const Json& x = j["context"];
    c.context.kind = x.value("kind", c.context.kind);
    c.context.path = x.value("path", c.context.path);
    c.context.zipf_exponent = x.value("zipf_exponent", c.context.zipf_exponent);
  }
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Traces

inline std::string bitmap_string(const CorrectnessBitmap& b) {
  std::string s(b.correct.size(), '0');
  for (std::size_t i = 0; i < s.size(); ++i)
    if (b.correct[i]) s[i] = '1';
  return s;
}

inline CorrectnessBitmap bitmap_from_string(const std::string& s, int epoch) {
  CorrectnessBitmap b;
  b.epoch = epoch;
  b.correct.resize(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    detail::require(s[i] == '0' || s[i] == '1', "bitmap string must contain only 0 and 1");
    b.correct[i] = s[i] == '1' ? 1 : 0;
  }
  return b;
}

inline Json to_json(const EpochTrace& t) {
  return Json{{"epoch", t.epoch},       {"loss", t.loss}, {"accuracy", t.accuracy},
              {"agg_prob", t.agg_prob}, {"entropy", t.entropy}, {"kld", t.kld},
              {"kld_clamped", t.kld_clamped}, {"bitmap", bitmap_string(t.bitmap)}};
}

inline EpochTrace epoch_trace_from_json(const Json& j) {
  EpochTrace t;
  t.epoch = j.at("epoch").get<int>();
  t.loss = j.at("loss").get<double>();
  t.accuracy = j.at("accuracy").get<double>();
  t.agg_prob = j.at("agg_prob").get<double>();
  t.entropy = j.at("entropy").get<double>();
  t.kld = j.at("kld").get<double>();
  t.kld_clamped = j.value("kld_clamped", std::size_t{0});
  t.bitmap = bitmap_from_string(j.value("bitmap", std::string()), t.epoch);
  return t;
}

inline std::string traces_jsonl(const std::vector<EpochTrace>& traces) {
  std::string out;
  for (const auto& t : traces) out += to_json(t).dump() + "\n";
  return out;
}

inline std::vector<EpochTrace> traces_from_jsonl(const std::string& text) {
  std::vector<EpochTrace> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(epoch_trace_from_json(Json::parse(line)));
  return out;
}

inline constexpr const char* kSummaryHeader = "epoch,loss,accuracy,agg_prob,entropy,kld";

inline std::string summary_csv(const std::vector<EpochTrace>& traces) {
  std::string out = std::string(kSummaryHeader) + "\n";
  for (const auto& t : traces)
    out += std::to_string(t.epoch) + "," + format_number(t.loss) + "," + format_number(t.accuracy) + "," +
           format_number(t.agg_prob) + "," + format_number(t.entropy) + "," + format_number(t.kld) + "\n";
  return out;
}

/// Parsed CSV: header names and numeric rows ("nan" allowed).
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw InvalidArgument("CSV has no column " + name);
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline Table parse_numeric_csv(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  // Leading '#' lines are comments.
  do {
    if (!std::getline(in, line)) throw InvalidArgument("empty CSV");
  } while (!line.empty() && line[0] == '#');
  t.columns = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split_csv_line(line);
    detail::require(cells.size() == t.columns.size(), "CSV row has the wrong number of cells");
    std::vector<double> row;
    for (const auto& c : cells) {
      if (c == "nan" || c.empty()) {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      try {
        std::size_t used = 0;
        row.push_back(std::stod(c, &used));
        detail::require(used == c.size(), "CSV cell is not a number: " + c);
      } catch (const std::logic_error&) {
        throw InvalidArgument("CSV cell is not a number: " + c);
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'M', 'E', 'M', 'L', 'A', 'B', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_integral_v<T> || std::is_same_v<T, float>);
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <class T>
T get_le(const std::string& in, std::size_t& at) {
  if (at + sizeof(T) > in.size()) throw InvalidArgument("checkpoint truncated");
  unsigned char b[sizeof(T)];
  std::memcpy(b, in.data() + at, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  at += sizeof(T);
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace detail

inline std::string checkpoint_bytes(const MicroLm& model, const Json& extra = Json::object()) {
  Json header = extra;
  header["config"] = to_json(model.config());
  header["step_count"] = model.step_count();
  Json tensors = Json::array();
  model.params().for_each([&](const std::string& name, const Mat<float>& m) {
    tensors.push_back(Json{{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  header["tensors"] = tensors;
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, h.size());
  out += h;
  model.params().for_each([&](const std::string&, const Mat<float>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_le<float>(out, m.data()[i]);
  });
  return out;
}

inline MicroLm checkpoint_from_bytes(const std::string& in) {
  if (in.size() < sizeof(kCheckpointMagic) || std::memcmp(in.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw InvalidArgument("not a checkpoint file");
  std::size_t at = sizeof(kCheckpointMagic);
  const auto version = detail::get_le<std::uint32_t>(in, at);
  if (version != kCheckpointVersion) throw InvalidArgument("unsupported checkpoint version");
  const auto hlen = detail::get_le<std::uint64_t>(in, at);
  if (at + hlen > in.size()) throw InvalidArgument("checkpoint truncated");
  const Json header = Json::parse(in.substr(at, hlen));
  at += hlen;
  const ModelConfig cfg = model_config_from_json(header.at("config"));
  MicroLm model(cfg);
  const Json& tensors = header.at("tensors");
  std::size_t idx = 0;
  model.params().for_each([&](const std::string& name, Mat<float>& m) {
    if (idx >= tensors.size()) throw InvalidArgument("checkpoint is missing tensor " + name);
    const Json& t = tensors[idx++];
    if (t.at("name").get<std::string>() != name || t.at("rows").get<Eigen::Index>() != m.rows() ||
        t.at("cols").get<Eigen::Index>() != m.cols())
      throw InvalidArgument("checkpoint tensor mismatch at " + name);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = detail::get_le<float>(in, at);
  });
  if (idx != tensors.size() || at != in.size()) throw InvalidArgument("checkpoint has trailing data");
  model.set_step_count(header.value("step_count", std::uint64_t{0}));
  return model;
}

inline void save_checkpoint(const MicroLm& model, const std::string& path, const Json& extra = Json::object()) {
  write_file(path, checkpoint_bytes(model, extra));
}
inline MicroLm load_checkpoint(const std::string& path) { return checkpoint_from_bytes(read_file(path)); }

}  // namespace memlab
