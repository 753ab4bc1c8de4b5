#pragma once

// Client side of the out-of-process model bridge.
//
// Wire format: one JSON object per line, UTF-8, newline-terminated, the same
// over stdio and TCP. One request in flight at a time.
//
//   request  {"id": 7, "op": "forward", "payload": {"tokens": [...]}}
//   reply    {"id": 7, "op": "forward", "reply": {"logits": [[...], ...], "truncated": false}}
//   error    {"id": 7, "op": "forward", "error": "message"}
//
// ops: init {}, info {} -> {vocab_size, max_context, bos_id},
// forward {tokens} -> {logits, truncated}, train_step {tokens, lr} -> {loss},
// save {path} -> {status}.
//
// Endpoints: "stdio:<shell command>" spawns the bridge as a child process;
// "tcp:<host>:<port>" connects to a running one.

#include <netdb.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "memlab/error.hpp"
#include "memlab/language_model.hpp"
#include "memlab/metrics.hpp"

namespace memlab {

class LineTransport {
 public:
  virtual ~LineTransport() = default;
  virtual void send_line(const std::string& line) = 0;
  virtual std::string recv_line() = 0;
};

namespace detail {

inline void write_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t w = ::write(fd, data.data() + off, data.size() - off);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw BridgeError(std::string("bridge write failed: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(w);
  }
}

/// Buffered line reader over a file descriptor.
class FdLineReader {
 public:
  explicit FdLineReader(int fd) : fd_(fd) {}

  std::string read_line() {
    for (;;) {
      const auto nl = buf_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buf_.substr(0, nl);
        buf_.erase(0, nl + 1);
        return line;
      }
      char chunk[65536];
      const ssize_t r = ::read(fd_, chunk, sizeof chunk);
      if (r < 0) {
        if (errno == EINTR) continue;
        throw BridgeError(std::string("bridge read failed: ") + std::strerror(errno));
      }
      if (r == 0) throw BridgeError("bridge closed the connection");
      buf_.append(chunk, static_cast<std::size_t>(r));
    }
  }

 private:
  int fd_;
  std::string buf_;
};

}  // namespace detail

/// Bridge running as a child process, talking over its stdin/stdout.
class StdioTransport : public LineTransport {
 public:
  explicit StdioTransport(const std::string& command) {
    ::signal(SIGPIPE, SIG_IGN);
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0) throw BridgeError("pipe failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw BridgeError("pipe failed");
    }
    pid_ = ::fork();
    if (pid_ < 0) throw BridgeError("fork failed");
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    in_ = to_child[1];
    out_ = from_child[0];
    reader_ = std::make_unique<detail::FdLineReader>(out_);
  }

  ~StdioTransport() override {
    if (in_ >= 0) ::close(in_);
    if (out_ >= 0) ::close(out_);
    if (pid_ > 0) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
  }

  StdioTransport(const StdioTransport&) = delete;
  StdioTransport& operator=(const StdioTransport&) = delete;

  void send_line(const std::string& line) override { detail::write_all(in_, line + "\n"); }
  std::string recv_line() override { return reader_->read_line(); }

 private:
  pid_t pid_ = -1;
  int in_ = -1, out_ = -1;
  std::unique_ptr<detail::FdLineReader> reader_;
};

class TcpTransport : public LineTransport {
 public:
  TcpTransport(const std::string& host, const std::string& port) {
    ::signal(SIGPIPE, SIG_IGN);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0 || !res)
      throw BridgeError("cannot resolve bridge host " + host);
    for (addrinfo* a = res; a; a = a->ai_next) {
      fd_ = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
      if (fd_ < 0) continue;
      if (::connect(fd_, a->ai_addr, a->ai_addrlen) == 0) break;
      ::close(fd_);
      fd_ = -1;
    }
    ::freeaddrinfo(res);
    if (fd_ < 0) throw BridgeError("cannot connect to bridge at " + host + ":" + port);
    reader_ = std::make_unique<detail::FdLineReader>(fd_);
  }

  ~TcpTransport() override {
    if (fd_ >= 0) ::close(fd_);
  }

  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  void send_line(const std::string& line) override { detail::write_all(fd_, line + "\n"); }
  std::string recv_line() override { return reader_->read_line(); }

 private:
  int fd_ = -1;
  std::unique_ptr<detail::FdLineReader> reader_;
};

inline std::unique_ptr<LineTransport> open_transport(const std::string& endpoint) {
  if (endpoint.rfind("stdio:", 0) == 0) {
    const std::string cmd = endpoint.substr(6);
    if (cmd.empty()) throw InvalidArgument("stdio endpoint needs a command");
    return std::make_unique<StdioTransport>(cmd);
  }
  if (endpoint.rfind("tcp:", 0) == 0) {
    const std::string rest = endpoint.substr(4);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size())
      throw InvalidArgument("tcp endpoint must look like tcp:host:port");
    return std::make_unique<TcpTransport>(rest.substr(0, colon), rest.substr(colon + 1));
  }
  throw InvalidArgument("bridge endpoint must start with stdio: or tcp:");
}

struct BridgeInfo {
  int vocab_size = 0;
  std::size_t max_context = 0;
  TokenId bos_id = 0;
  nlohmann::json raw;
};

/// Lockstep request/reply client.
class BridgeClient {
 public:
  explicit BridgeClient(std::unique_ptr<LineTransport> transport) : t_(std::move(transport)) {}
  explicit BridgeClient(const std::string& endpoint) : t_(open_transport(endpoint)) {}

  nlohmann::json request(const std::string& op, const nlohmann::json& payload = nlohmann::json::object()) {
    const std::uint64_t id = ++next_id_;
    nlohmann::json msg{{"id", id}, {"op", op}, {"payload", payload}};
    t_->send_line(msg.dump());
    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(t_->recv_line());
    } catch (const nlohmann::json::parse_error& e) {
      throw BridgeError(std::string("bridge sent malformed JSON: ") + e.what());
    }
    if (!reply.is_object() || !reply.contains("id") || reply["id"] != id)
      throw BridgeError("bridge reply id does not match request " + std::to_string(id));
    if (reply.contains("error")) throw BridgeError("bridge error on " + op + ": " + reply["error"].dump());
    if (!reply.contains("reply")) throw BridgeError("bridge reply to " + op + " has no reply field");
    return reply["reply"];
  }

  BridgeInfo info() {
    const auto r = request("info");
    BridgeInfo i;
    i.raw = r;
    try {
      i.vocab_size = r.at("vocab_size").get<int>();
      i.max_context = r.at("max_context").get<std::size_t>();
      i.bos_id = r.at("bos_id").get<TokenId>();
    } catch (const nlohmann::json::exception& e) {
      throw BridgeError(std::string("bridge info reply incomplete: ") + e.what());
    }
    if (i.vocab_size < 2) throw BridgeError("bridge reports vocab_size < 2");
    return i;
  }

 private:
  std::unique_ptr<LineTransport> t_;
  std::uint64_t next_id_ = 0;
};

/// Row-wise softmax of transmitted logits, in double, stored as float.
inline ProbMatrix softmax_logit_rows(const std::vector<std::vector<double>>& logits, int vocab) {
  ProbMatrix p(static_cast<Eigen::Index>(logits.size()), vocab);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& row = logits[i];
    if (static_cast<int>(row.size()) != vocab) throw BridgeError("logits row width differs from vocab size");
    double mx = -INFINITY;
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    for (int j = 0; j < vocab; ++j)
      p(static_cast<Eigen::Index>(i), j) = static_cast<float>(std::exp(row[static_cast<std::size_t>(j)] - mx) / z);
  }
  return p;
}

/// An external model seen through the bridge.
class BridgeModel : public LanguageModel {
 public:
  explicit BridgeModel(const std::string& endpoint) : client_(endpoint) { init(); }
  explicit BridgeModel(std::unique_ptr<LineTransport> t) : client_(std::move(t)) { init(); }

  int vocab_size() const override { return info_.vocab_size; }
  std::size_t max_context() const override { return info_.max_context; }
  TokenId bos() const { return info_.bos_id; }
  const BridgeInfo& info() const { return info_; }

  ProbMatrix distributions(std::span<const TokenId> s) const override {
    if (s.size() > max_context()) throw InvalidArgument("input longer than the bridge model's context");
    if (s.empty()) return ProbMatrix(0, info_.vocab_size);
    std::vector<TokenId> input;
    input.reserve(s.size());
    input.push_back(info_.bos_id);
    if (!s.empty()) input.insert(input.end(), s.begin(), s.end() - 1);
    const auto r = client_.request("forward", {{"tokens", input}});
    if (r.value("truncated", false)) throw BridgeError("bridge returned truncated logits; probes need full distributions");
    std::vector<std::vector<double>> logits;
    try {
      logits = r.at("logits").get<std::vector<std::vector<double>>>();
    } catch (const nlohmann::json::exception& e) {
      throw BridgeError(std::string("bridge forward reply malformed: ") + e.what());
    }
    if (logits.size() != s.size()) throw BridgeError("bridge returned the wrong number of logit rows");
    return softmax_logit_rows(logits, info_.vocab_size);
  }

  /// One optimiser step on the bridge side; returns its loss (nats/token).
  double train_step(std::span<const TokenId> s, double lr) {
    std::vector<TokenId> tokens(s.begin(), s.end());
    const auto r = client_.request("train_step", {{"tokens", tokens}, {"lr", lr}});
    return r.at("loss").get<double>();
  }

  void save(const std::string& path) { client_.request("save", {{"path", path}}); }

 private:
  void init() {
    client_.request("init");
    info_ = client_.info();
  }

  mutable BridgeClient client_;
  BridgeInfo info_;
};

// ---------------------------------------------------------------------------
// Echo stub: logits are one-hot on the input token at each position plus a
// learnable per-token bias, so the greedy next token is the previous token
// until training moves the bias.

class EchoStub {
 public:
  explicit EchoStub(int vocab_size = 512, std::size_t max_context = 2048)
      : vocab_(vocab_size), max_context_(max_context), bias_(static_cast<std::size_t>(vocab_size), 0.0) {}

  int vocab_size() const { return vocab_; }
  std::size_t max_context() const { return max_context_; }
  TokenId bos() const { return vocab_ - 1; }

  std::vector<std::vector<double>> logits(std::span<const TokenId> input) const {
    std::vector<std::vector<double>> out(input.size(), bias_);
    for (std::size_t i = 0; i < input.size(); ++i) out[i][static_cast<std::size_t>(input[i])] += 1.0;
    return out;
  }

  /// Mean next-token NLL of `tokens` (BOS prepended), then a gradient step on the bias.
  double train_step(std::span<const TokenId> tokens, double lr) {
    std::vector<TokenId> input{bos()};
    input.insert(input.end(), tokens.begin(), tokens.end() - 1);
    const auto lg = logits(input);
    std::vector<double> grad(static_cast<std::size_t>(vocab_), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      double mx = -INFINITY;
      for (double v : lg[i]) mx = std::max(mx, v);
      double z = 0.0;
      for (double v : lg[i]) z += std::exp(v - mx);
      const auto t = static_cast<std::size_t>(tokens[i]);
      loss += -(lg[i][t] - mx - std::log(z));
      for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += std::exp(lg[i][j] - mx) / z;
      grad[t] -= 1.0;
    }
    const double n = static_cast<double>(tokens.size());
    for (std::size_t j = 0; j < grad.size(); ++j) bias_[j] -= lr * grad[j] / n;
    return loss / n;
  }

  /// Handle one request line; always returns exactly one reply line.
  std::string handle(const std::string& line) {
    nlohmann::json id = nullptr, op = nullptr;
    try {
      const auto msg = nlohmann::json::parse(line);
      if (!msg.is_object()) throw InvalidArgument("request must be a JSON object");
      id = msg.value("id", nlohmann::json(nullptr));
      op = msg.value("op", nlohmann::json(nullptr));
      const auto payload = msg.value("payload", nlohmann::json::object());
      if (!op.is_string()) throw InvalidArgument("request has no op");
      nlohmann::json reply;
      const std::string o = op.get<std::string>();
      if (o == "init") {
        reply = {{"status", "ok"}};
      } else if (o == "info") {
        reply = {{"vocab_size", vocab_}, {"max_context", max_context_}, {"bos_id", bos()}, {"name", "echo-stub"}};
      } else if (o == "forward") {
        const auto tokens = checked_tokens(payload);
        const auto lg = logits(tokens);
        std::vector<std::vector<float>> wire(lg.size());
        for (std::size_t i = 0; i < lg.size(); ++i) wire[i].assign(lg[i].begin(), lg[i].end());
        reply = {{"logits", wire}, {"truncated", false}};
      } else if (o == "train_step") {
        const auto tokens = checked_tokens(payload);
        if (tokens.empty()) throw InvalidArgument("train_step needs tokens");
        reply = {{"loss", train_step(tokens, payload.at("lr").get<double>())}};
      } else if (o == "save") {
        reply = {{"status", "ok"}};
      } else {
        throw InvalidArgument("unknown op " + o);
      }
      return nlohmann::json{{"id", id}, {"op", op}, {"reply", reply}}.dump();
    } catch (const std::exception& e) {
      return nlohmann::json{{"id", id}, {"op", op}, {"error", e.what()}}.dump();
    }
  }

 private:
  std::vector<TokenId> checked_tokens(const nlohmann::json& payload) const {
    auto tokens = payload.at("tokens").get<std::vector<TokenId>>();
    if (tokens.size() > max_context_) throw InvalidArgument("input longer than max_context");
    for (TokenId t : tokens)
      if (t < 0 || t >= vocab_) throw InvalidArgument("token outside vocabulary");
    return tokens;
  }

  int vocab_;
  std::size_t max_context_;
  std::vector<double> bias_;
};

/// The echo stub run in-process, for comparing against the bridged one.
class EchoModel : public LanguageModel {
 public:
  explicit EchoModel(const EchoStub& stub) : stub_(stub) {}

  int vocab_size() const override { return stub_.vocab_size(); }
  std::size_t max_context() const override { return stub_.max_context(); }

  ProbMatrix distributions(std::span<const TokenId> s) const override {
    std::vector<TokenId> input{stub_.bos()};
    if (!s.empty()) input.insert(input.end(), s.begin(), s.end() - 1);
    input.resize(s.size());
    // Round-trip through float32 like the wire does.
    auto lg = stub_.logits(input);
    for (auto& row : lg)
      for (auto& v : row) v = static_cast<double>(static_cast<float>(v));
    return softmax_logit_rows(lg, stub_.vocab_size());
  }

 private:
  const EchoStub& stub_;
};

}  // namespace memlab
