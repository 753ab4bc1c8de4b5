#pragma once

// A small decoder-only transformer with hand-written forward and backward
// passes.
//
// Architecture (fixed): token embedding (+ learned absolute position
// embedding when pos_encoding == absolute), n_layers pre-norm blocks of
// causal multi-head self-attention and a GELU (tanh approximation) MLP,
// final LayerNorm, untied output head with bias. Rotary encoding rotates
// query/key pairs (2i, 2i+1) of each head by t * base^(-2i/head_dim).
// Attention logits are scaled by 1/sqrt(head_dim). LayerNorm eps is 1e-5.
//
// Every input is prefixed with the BOS token, so the distribution for the
// first string position conditions on BOS alone.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "memlab/error.hpp"
#include "memlab/language_model.hpp"
#include "memlab/rng.hpp"
#include "memlab/string_lab.hpp"

namespace memlab {

enum class PosEncoding { rotary, absolute };

inline const char* to_string(PosEncoding p) { return p == PosEncoding::rotary ? "rotary" : "absolute"; }

inline PosEncoding pos_encoding_from_string(const std::string& s) {
  if (s == "rotary") return PosEncoding::rotary;
  if (s == "absolute") return PosEncoding::absolute;
  throw InvalidArgument("unknown position encoding: " + s);
}

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 512;
  int max_seq_len = 2112;
  PosEncoding pos_encoding = PosEncoding::rotary;
  TokenId bos_token_id = -1;  // -1: vocab_size - 1
  std::uint64_t init_seed = 0;
  double init_std = 0.02;
  double rope_base = 10000.0;

  TokenId bos() const { return bos_token_id < 0 ? vocab_size - 1 : bos_token_id; }
  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    detail::require(vocab_size >= 2, "ModelConfig: vocab_size must be >= 2");
    detail::require(d_model > 0 && n_layers > 0 && n_heads > 0 && d_ff > 0, "ModelConfig: sizes must be positive");
    detail::require(d_model % n_heads == 0, "ModelConfig: d_model must be divisible by n_heads");
    detail::require(pos_encoding != PosEncoding::rotary || head_dim() % 2 == 0,
                    "ModelConfig: rotary encoding needs an even head_dim");
    detail::require(max_seq_len >= 2, "ModelConfig: max_seq_len must be >= 2");
    detail::require(bos() >= 0 && bos() < vocab_size, "ModelConfig: bos_token_id outside vocabulary");
    detail::require(init_std > 0.0, "ModelConfig: init_std must be positive");
  }

  /// Closed-form parameter count.
  std::size_t parameter_count() const {
    const std::size_t V = static_cast<std::size_t>(vocab_size), d = static_cast<std::size_t>(d_model),
                      f = static_cast<std::size_t>(d_ff), L = static_cast<std::size_t>(n_layers),
                      T = static_cast<std::size_t>(max_seq_len);
    const std::size_t per_layer = 4 * d            // two LayerNorms
                                  + 3 * d * d + 3 * d  // qkv
                                  + d * d + d          // attention output
                                  + d * f + f          // fc
                                  + f * d + d;         // proj
    return V * d + (pos_encoding == PosEncoding::absolute ? T * d : 0) + L * per_layer + 2 * d + d * V + V;
  }
};

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct LayerParams {
  Mat<S> ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
};

/// All trainable tensors. Biases and LayerNorm vectors are 1 x N matrices.
template <class S>
struct Params {
  Mat<S> tok_emb;
  Mat<S> pos_emb;  // 0 x 0 under rotary encoding
  std::vector<LayerParams<S>> layers;
  Mat<S> lnf_g, lnf_b, w_head, b_head;

  /// Visits every tensor in canonical order with its stable name.
  template <class F>
  void for_each(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    if (pos_emb.size() > 0) f(std::string("pos_emb"), pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = layers[l];
      f(p + "ln1_g", L.ln1_g);
      f(p + "ln1_b", L.ln1_b);
      f(p + "w_qkv", L.w_qkv);
      f(p + "b_qkv", L.b_qkv);
      f(p + "w_o", L.w_o);
      f(p + "b_o", L.b_o);
      f(p + "ln2_g", L.ln2_g);
      f(p + "ln2_b", L.ln2_b);
      f(p + "w_fc", L.w_fc);
      f(p + "b_fc", L.b_fc);
      f(p + "w_proj", L.w_proj);
      f(p + "b_proj", L.b_proj);
    }
    f(std::string("lnf_g"), lnf_g);
    f(std::string("lnf_b"), lnf_b);
    f(std::string("w_head"), w_head);
    f(std::string("b_head"), b_head);
  }

  template <class F>
  void for_each(F&& f) const {
    const_cast<Params*>(this)->for_each([&](const std::string& name, Mat<S>& m) { f(name, static_cast<const Mat<S>&>(m)); });
  }

  /// Same shapes, all zeros.
  Params zeros_like() const {
    Params z = *this;
    z.for_each([](const std::string&, Mat<S>& m) { m.setZero(); });
    return z;
  }

  std::size_t size() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Mat<S>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const Mat<S>& m) { ok = ok && m.allFinite(); });
    return ok;
  }
};

template <class S>
struct LossAndGrads {
  double loss = 0.0;  // nats per token
  Params<S> grads;
};

namespace detail {

template <class S>
struct LayerCache {
  Mat<S> x_in, ln1_hat, ln1_out, qkv, att, o, x_mid, ln2_hat, ln2_out, fc, act;
  std::vector<S> ln1_rstd, ln2_rstd;
};

template <class S>
struct ForwardCache {
  std::vector<TokenId> input;
  std::vector<LayerCache<S>> layers;
  Mat<S> x_final, lnf_hat, lnf_out;
  std::vector<S> lnf_rstd;
};

constexpr double kLnEps = 1e-5;

template <class S>
inline S gelu(S u) {
  constexpr S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  return static_cast<S>(0.5) * u * (static_cast<S>(1) + std::tanh(c * (u + static_cast<S>(0.044715) * u * u * u)));
}

template <class S>
inline S gelu_grad(S u) {
  constexpr S c = static_cast<S>(0.7978845608028654);
  const S th = std::tanh(c * (u + static_cast<S>(0.044715) * u * u * u));
  return static_cast<S>(0.5) * (static_cast<S>(1) + th) +
         static_cast<S>(0.5) * u * (static_cast<S>(1) - th * th) * c *
             (static_cast<S>(1) + static_cast<S>(3 * 0.044715) * u * u);
}

/// Row-wise LayerNorm; writes normalised values and 1/sigma when asked.
template <class S>
void layer_norm(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b, Mat<S>& out, Mat<S>* hat, std::vector<S>* rstd) {
  const Eigen::Index T = x.rows(), d = x.cols();
  out.resize(T, d);
  if (hat) hat->resize(T, d);
  if (rstd) rstd->resize(static_cast<std::size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t) {
    const S mean = x.row(t).mean();
    const S var = (x.row(t).array() - mean).square().mean();
    const S r = static_cast<S>(1) / std::sqrt(var + static_cast<S>(kLnEps));
    for (Eigen::Index j = 0; j < d; ++j) {
      const S h = (x(t, j) - mean) * r;
      if (hat) (*hat)(t, j) = h;
      out(t, j) = h * g(0, j) + b(0, j);
    }
    if (rstd) (*rstd)[static_cast<std::size_t>(t)] = r;
  }
}

/// Accumulates dg, db and returns dx.
template <class S>
Mat<S> layer_norm_backward(const Mat<S>& dy, const Mat<S>& hat, const std::vector<S>& rstd, const Mat<S>& g,
                           Mat<S>& dg, Mat<S>& db) {
  const Eigen::Index T = dy.rows(), d = dy.cols();
  Mat<S> dx(T, d);
  dg.row(0) += (dy.array() * hat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  for (Eigen::Index t = 0; t < T; ++t) {
    S mean_dh = 0, mean_dh_h = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const S dh = dy(t, j) * g(0, j);
      mean_dh += dh;
      mean_dh_h += dh * hat(t, j);
    }
    mean_dh /= static_cast<S>(d);
    mean_dh_h /= static_cast<S>(d);
    const S r = rstd[static_cast<std::size_t>(t)];
    for (Eigen::Index j = 0; j < d; ++j) dx(t, j) = r * (dy(t, j) * g(0, j) - mean_dh - hat(t, j) * mean_dh_h);
  }
  return dx;
}

/// Rotates column pairs of a [T x head_dim] block in place; inverse when `inverse`.
template <class S, class Block>
void rotate(Block&& x, const std::vector<S>& cos_t, const std::vector<S>& sin_t, int half, bool inverse) {
  const Eigen::Index T = x.rows();
  for (Eigen::Index t = 0; t < T; ++t) {
    for (int i = 0; i < half; ++i) {
      const std::size_t k = static_cast<std::size_t>(t) * static_cast<std::size_t>(half) + static_cast<std::size_t>(i);
      const S c = cos_t[k], s = inverse ? -sin_t[k] : sin_t[k];
      const S a = x(t, 2 * i), b = x(t, 2 * i + 1);
      x(t, 2 * i) = a * c - b * s;
      x(t, 2 * i + 1) = a * s + b * c;
    }
  }
}

}  // namespace detail

template <class S>
class MicroModel : public LanguageModel {
 public:
  MicroModel() = default;

  /// Deterministic initialisation from config.init_seed.
  explicit MicroModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    const int V = config_.vocab_size, d = config_.d_model, f = config_.d_ff;
    Rng rng(config_.init_seed);
    const double std0 = config_.init_std;
    const double std_resid = std0 / std::sqrt(2.0 * config_.n_layers);
    auto normal = [&](int r, int c, double sd) {
      Mat<S> m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(sd * rng.normal());
      return m;
    };
    auto constant = [](int c, double v) { return Mat<S>::Constant(1, c, static_cast<S>(v)); };
    params_.tok_emb = normal(V, d, std0);
    if (config_.pos_encoding == PosEncoding::absolute) params_.pos_emb = normal(config_.max_seq_len, d, std0);
    for (int l = 0; l < config_.n_layers; ++l) {
      LayerParams<S> L;
      L.ln1_g = constant(d, 1.0);
      L.ln1_b = constant(d, 0.0);
      L.w_qkv = normal(d, 3 * d, std0);
      L.b_qkv = constant(3 * d, 0.0);
      L.w_o = normal(d, d, std_resid);
      L.b_o = constant(d, 0.0);
      L.ln2_g = constant(d, 1.0);
      L.ln2_b = constant(d, 0.0);
      L.w_fc = normal(d, f, std0);
      L.b_fc = constant(f, 0.0);
      L.w_proj = normal(f, d, std_resid);
      L.b_proj = constant(d, 0.0);
      params_.layers.push_back(std::move(L));
    }
    params_.lnf_g = constant(d, 1.0);
    params_.lnf_b = constant(d, 0.0);
    params_.w_head = normal(d, V, std0);
    params_.b_head = constant(V, 0.0);
    build_rope_tables();
  }

  MicroModel(const ModelConfig& config, Params<S> params, std::uint64_t step_count)
      : config_(config), params_(std::move(params)), step_count_(step_count) {
    config_.validate();
    build_rope_tables();
  }

  const ModelConfig& config() const { return config_; }
  const Params<S>& params() const { return params_; }
  Params<S>& params() { return params_; }
  std::uint64_t step_count() const { return step_count_; }
  void set_step_count(std::uint64_t n) { step_count_ = n; }

  int vocab_size() const override { return config_.vocab_size; }
  std::size_t max_context() const override { return static_cast<std::size_t>(config_.max_seq_len); }

  /// Raw logits, row i conditioned on BOS + s[0, i).
  Mat<S> logits(std::span<const TokenId> s) const {
    auto cache = run(s, false);
    return head(cache.lnf_out);
  }

  ProbMatrix distributions(std::span<const TokenId> s) const override {
    Mat<S> z = logits(s);
    softmax_rows(z);
    return z.template cast<float>();
  }

  /// Full-precision probabilities (used by tests in double builds).
  Mat<S> probabilities(std::span<const TokenId> s) const {
    Mat<S> z = logits(s);
    softmax_rows(z);
    return z;
  }

  TokenId predict_next(std::span<const TokenId> context) const override {
    detail::require(context.size() < max_context(), "predict_next: context too long");
    std::vector<TokenId> padded(context.begin(), context.end());
    padded.push_back(0);
    auto cache = run(padded, false);
    const Eigen::Index last = cache.lnf_out.rows() - 1;
    Mat<S> z = cache.lnf_out.row(last) * params_.w_head;
    z.row(0) += params_.b_head.row(0);
    return argmax_lowest(z.row(0));
  }

  std::vector<TokenId> predict_greedy(std::span<const TokenId> s) const override {
    Mat<S> z = logits(s);
    std::vector<TokenId> out(static_cast<std::size_t>(z.rows()));
    for (Eigen::Index i = 0; i < z.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_lowest(z.row(i));
    return out;
  }

  /// Adds scale * d(sum_i -log P(s_i | BOS + s[0,i)))/dparams into `grads` and
  /// returns the summed negative log-likelihood. When `probs_out` is given it
  /// receives the forward distributions (so evaluation can share the pass).
  double accumulate_grads(std::span<const TokenId> s, S scale, Params<S>& grads, Mat<S>* probs_out = nullptr) const {
    auto cache = run(s, true);
    Mat<S> probs = head(cache.lnf_out);
    softmax_rows(probs);
    const Eigen::Index T = probs.rows();
    double nll = 0.0;
    Mat<S> dlogits = probs;
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto target = static_cast<Eigen::Index>(s[static_cast<std::size_t>(t)]);
      nll -= std::log(std::max(static_cast<double>(probs(t, target)), 1e-300));
      dlogits(t, target) -= static_cast<S>(1);
    }
    if (!std::isfinite(nll)) throw NumericalFailure("loss is not finite");
    dlogits *= scale;
    backward(cache, dlogits, grads);
    if (probs_out) *probs_out = std::move(probs);
    return nll;
  }

  /// Mean cross-entropy (nats/token) and its gradient.
  LossAndGrads<S> loss_and_grads(std::span<const TokenId> s) const {
    LossAndGrads<S> out{0.0, params_.zeros_like()};
    const double nll = accumulate_grads(s, static_cast<S>(1.0 / static_cast<double>(s.size())), out.grads);
    out.loss = nll / static_cast<double>(s.size());
    if (!out.grads.all_finite()) throw NumericalFailure("gradient contains NaN/Inf");
    return out;
  }

  /// Mean cross-entropy without gradients.
  double loss(std::span<const TokenId> s) const {
    Mat<S> p = probabilities(s);
    double nll = 0.0;
    for (Eigen::Index t = 0; t < p.rows(); ++t)
      nll -= std::log(std::max(static_cast<double>(p(t, s[static_cast<std::size_t>(t)])), 1e-300));
    return nll / static_cast<double>(s.size());
  }

  static void softmax_rows(Mat<S>& z) {
    for (Eigen::Index t = 0; t < z.rows(); ++t) {
      const S m = z.row(t).maxCoeff();
      z.row(t) = (z.row(t).array() - m).exp().matrix();
      z.row(t) /= z.row(t).sum();
    }
  }

 private:
  void build_rope_tables() {
    if (config_.pos_encoding != PosEncoding::rotary) return;
    const int half = config_.head_dim() / 2;
    const auto T = static_cast<std::size_t>(config_.max_seq_len);
    cos_.resize(T * static_cast<std::size_t>(half));
    sin_.resize(T * static_cast<std::size_t>(half));
    for (std::size_t t = 0; t < T; ++t) {
      for (int i = 0; i < half; ++i) {
        const double freq = std::pow(config_.rope_base, -2.0 * i / config_.head_dim());
        const double a = static_cast<double>(t) * freq;
        cos_[t * static_cast<std::size_t>(half) + static_cast<std::size_t>(i)] = static_cast<S>(std::cos(a));
        sin_[t * static_cast<std::size_t>(half) + static_cast<std::size_t>(i)] = static_cast<S>(std::sin(a));
      }
    }
  }

  Mat<S> head(const Mat<S>& h) const {
    Mat<S> z = h * params_.w_head;
    z.rowwise() += params_.b_head.row(0);
    return z;
  }

  detail::ForwardCache<S> run(std::span<const TokenId> s, bool keep) const {
    detail::require(!s.empty(), "forward: empty input");
    detail::require(s.size() <= max_context(), "forward: input longer than max_seq_len");
    const int d = config_.d_model, H = config_.n_heads, hd = config_.head_dim();
    const auto T = static_cast<Eigen::Index>(s.size());
    detail::ForwardCache<S> c;
    c.input.reserve(s.size());
    c.input.push_back(config_.bos());
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      detail::require(s[i] >= 0 && s[i] < config_.vocab_size, "forward: token id outside vocabulary");
      c.input.push_back(s[i]);
    }
    Mat<S> x(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
      x.row(t) = params_.tok_emb.row(c.input[static_cast<std::size_t>(t)]);
      if (config_.pos_encoding == PosEncoding::absolute) x.row(t) += params_.pos_emb.row(t);
    }
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    for (const auto& L : params_.layers) {
      detail::LayerCache<S> lc;
      if (keep) lc.x_in = x;
      Mat<S> h;
      detail::layer_norm(x, L.ln1_g, L.ln1_b, h, keep ? &lc.ln1_hat : nullptr, keep ? &lc.ln1_rstd : nullptr);
      Mat<S> qkv = h * L.w_qkv;
      qkv.rowwise() += L.b_qkv.row(0);
      if (config_.pos_encoding == PosEncoding::rotary) {
        for (int hh = 0; hh < H; ++hh) {
          detail::rotate<S>(qkv.block(0, hh * hd, T, hd), cos_, sin_, hd / 2, false);
          detail::rotate<S>(qkv.block(0, d + hh * hd, T, hd), cos_, sin_, hd / 2, false);
        }
      }
      Mat<S> o(T, d);
      if (keep) lc.att.resize(T * H, T);
      Mat<S> att(T, T);
      for (int hh = 0; hh < H; ++hh) {
        att.noalias() = qkv.block(0, hh * hd, T, hd) * qkv.block(0, d + hh * hd, T, hd).transpose();
        for (Eigen::Index t = 0; t < T; ++t) {
          S m = att(t, 0) * scale;
          for (Eigen::Index j = 0; j <= t; ++j) m = std::max(m, att(t, j) * scale);
          S sum = 0;
          for (Eigen::Index j = 0; j <= t; ++j) {
            const S e = std::exp(att(t, j) * scale - m);
            att(t, j) = e;
            sum += e;
          }
          const S inv = static_cast<S>(1) / sum;
          for (Eigen::Index j = 0; j <= t; ++j) att(t, j) *= inv;
          for (Eigen::Index j = t + 1; j < T; ++j) att(t, j) = 0;
        }
        o.block(0, hh * hd, T, hd).noalias() = att * qkv.block(0, 2 * d + hh * hd, T, hd);
        if (keep) lc.att.block(hh * T, 0, T, T) = att;
      }
      Mat<S> a = o * L.w_o;
      a.rowwise() += L.b_o.row(0);
      x += a;
      if (keep) {
        lc.ln1_out = std::move(h);
        lc.qkv = std::move(qkv);
        lc.o = std::move(o);
        lc.x_mid = x;
      }
      Mat<S> h2;
      detail::layer_norm(x, L.ln2_g, L.ln2_b, h2, keep ? &lc.ln2_hat : nullptr, keep ? &lc.ln2_rstd : nullptr);
      Mat<S> u = h2 * L.w_fc;
      u.rowwise() += L.b_fc.row(0);
      Mat<S> g = u.unaryExpr([](S v) { return detail::gelu(v); });
      Mat<S> m = g * L.w_proj;
      m.rowwise() += L.b_proj.row(0);
      x += m;
      if (keep) {
        lc.ln2_out = std::move(h2);
        lc.fc = std::move(u);
        lc.act = std::move(g);
        c.layers.push_back(std::move(lc));
      }
    }
    if (keep) c.x_final = x;
    detail::layer_norm(x, params_.lnf_g, params_.lnf_b, c.lnf_out, keep ? &c.lnf_hat : nullptr,
                       keep ? &c.lnf_rstd : nullptr);
    return c;
  }

  void backward(const detail::ForwardCache<S>& c, const Mat<S>& dlogits, Params<S>& g) const {
    const int d = config_.d_model, H = config_.n_heads, hd = config_.head_dim();
    const Eigen::Index T = dlogits.rows();
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

    g.w_head.noalias() += c.lnf_out.transpose() * dlogits;
    g.b_head.row(0) += dlogits.colwise().sum();
    Mat<S> dh = dlogits * params_.w_head.transpose();
    Mat<S> dx = detail::layer_norm_backward(dh, c.lnf_hat, c.lnf_rstd, params_.lnf_g, g.lnf_g, g.lnf_b);

    for (std::size_t li = params_.layers.size(); li-- > 0;) {
      const auto& L = params_.layers[li];
      const auto& lc = c.layers[li];
      auto& G = g.layers[li];

      // MLP branch
      G.w_proj.noalias() += lc.act.transpose() * dx;
      G.b_proj.row(0) += dx.colwise().sum();
      Mat<S> du = dx * L.w_proj.transpose();
      du.array() *= lc.fc.unaryExpr([](S v) { return detail::gelu_grad(v); }).array();
      G.w_fc.noalias() += lc.ln2_out.transpose() * du;
      G.b_fc.row(0) += du.colwise().sum();
      Mat<S> dh2 = du * L.w_fc.transpose();
      dx += detail::layer_norm_backward(dh2, lc.ln2_hat, lc.ln2_rstd, L.ln2_g, G.ln2_g, G.ln2_b);

      // attention branch
      G.w_o.noalias() += lc.o.transpose() * dx;
      G.b_o.row(0) += dx.colwise().sum();
      Mat<S> d_o = dx * L.w_o.transpose();
      Mat<S> dqkv = Mat<S>::Zero(T, 3 * d);
      Mat<S> dP(T, T);
      for (int hh = 0; hh < H; ++hh) {
        auto P = lc.att.block(hh * T, 0, T, T);
        auto q = lc.qkv.block(0, hh * hd, T, hd);
        auto k = lc.qkv.block(0, d + hh * hd, T, hd);
        auto v = lc.qkv.block(0, 2 * d + hh * hd, T, hd);
        auto dout = d_o.block(0, hh * hd, T, hd);
        dP.noalias() = dout * v.transpose();
        dqkv.block(0, 2 * d + hh * hd, T, hd).noalias() = P.transpose() * dout;
        for (Eigen::Index t = 0; t < T; ++t) {
          S dot = 0;
          for (Eigen::Index j = 0; j <= t; ++j) dot += dP(t, j) * P(t, j);
          for (Eigen::Index j = 0; j <= t; ++j) dP(t, j) = P(t, j) * (dP(t, j) - dot) * scale;
          for (Eigen::Index j = t + 1; j < T; ++j) dP(t, j) = 0;
        }
        dqkv.block(0, hh * hd, T, hd).noalias() = dP * k;
        dqkv.block(0, d + hh * hd, T, hd).noalias() = dP.transpose() * q;
        if (config_.pos_encoding == PosEncoding::rotary) {
          detail::rotate<S>(dqkv.block(0, hh * hd, T, hd), cos_, sin_, hd / 2, true);
          detail::rotate<S>(dqkv.block(0, d + hh * hd, T, hd), cos_, sin_, hd / 2, true);
        }
      }
      G.w_qkv.noalias() += lc.ln1_out.transpose() * dqkv;
      G.b_qkv.row(0) += dqkv.colwise().sum();
      Mat<S> dh1 = dqkv * L.w_qkv.transpose();
      dx += detail::layer_norm_backward(dh1, lc.ln1_hat, lc.ln1_rstd, L.ln1_g, G.ln1_g, G.ln1_b);
    }

    for (Eigen::Index t = 0; t < T; ++t) {
      g.tok_emb.row(c.input[static_cast<std::size_t>(t)]) += dx.row(t);
      if (config_.pos_encoding == PosEncoding::absolute) g.pos_emb.row(t) += dx.row(t);
    }
  }

  ModelConfig config_;
  Params<S> params_;
  std::uint64_t step_count_ = 0;
  std::vector<S> cos_, sin_;
};

using MicroLm = MicroModel<float>;

/// Same weights in another scalar type (e.g. double for gradient checks).
template <class To, class From>
MicroModel<To> convert_model(const MicroModel<From>& m) {
  Params<To> p;
  const auto& src = m.params();
  auto cast = [](const Mat<From>& x) { return Mat<To>(x.template cast<To>()); };
  p.tok_emb = cast(src.tok_emb);
  p.pos_emb = cast(src.pos_emb);
  for (const auto& L : src.layers) {
    p.layers.push_back({cast(L.ln1_g), cast(L.ln1_b), cast(L.w_qkv), cast(L.b_qkv), cast(L.w_o), cast(L.b_o),
                        cast(L.ln2_g), cast(L.ln2_b), cast(L.w_fc), cast(L.b_fc), cast(L.w_proj), cast(L.b_proj)});
  }
  p.lnf_g = cast(src.lnf_g);
  p.lnf_b = cast(src.lnf_b);
  p.w_head = cast(src.w_head);
  p.b_head = cast(src.b_head);
  return MicroModel<To>(m.config(), std::move(p), m.step_count());
}

}  // namespace memlab
