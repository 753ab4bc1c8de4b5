#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "memlab/micro_lm.hpp"

namespace memlab {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
std::vector<Mat<S>*> tensor_list(Params<S>& p) {
  std::vector<Mat<S>*> out;
  p.for_each([&](const std::string&, Mat<S>& m) { out.push_back(&m); });
  return out;
}

/// Plain Adam: no weight decay, no clipping, bias-corrected moments.
template <class S>
class Adam {
 public:
  Adam(const Params<S>& shape, AdamConfig cfg = {}) : cfg_(cfg), m_(shape.zeros_like()), v_(shape.zeros_like()) {}

  void step(Params<S>& params, Params<S>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S step = static_cast<S>(lr / bc1);
    const S inv_bc2 = static_cast<S>(1.0 / bc2);
    const S eps = static_cast<S>(cfg_.eps);
    auto P = tensor_list(params), G = tensor_list(grads), M = tensor_list(m_), V = tensor_list(v_);
    for (std::size_t k = 0; k < P.size(); ++k) {
      auto p = P[k]->array();
      auto g = G[k]->array();
      auto m = M[k]->array();
      auto v = V[k]->array();
      m = b1 * m + (static_cast<S>(1) - b1) * g;
      v = b2 * v + (static_cast<S>(1) - b2) * g * g;
      p -= step * m / ((v * inv_bc2).sqrt() + eps);
    }
  }

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  Params<S> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace memlab
