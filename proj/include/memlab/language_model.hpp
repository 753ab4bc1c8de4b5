#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <span>
#include <vector>

#include "memlab/string_lab.hpp"

namespace memlab {

/// Row i is a distribution over the vocabulary for position i of the string.
using ProbMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Greedy choice over one row; ties go to the lowest id.
template <class Row>
TokenId argmax_lowest(const Row& row) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j)
    if (row(j) > row(best)) best = j;
  return static_cast<TokenId>(best);
}

/// Anything that assigns next-token distributions to a token string, with a
/// BOS token implicitly in front: row i of distributions(s) conditions on
/// BOS + s[0, i). The micro model and the out-of-process bridge both satisfy it.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual int vocab_size() const = 0;
  /// Longest string (BOS excluded) distributions() accepts.
  virtual std::size_t max_context() const = 0;
  virtual ProbMatrix distributions(std::span<const TokenId> s) const = 0;

  /// Greedy next token after BOS + context.
  virtual TokenId predict_next(std::span<const TokenId> context) const {
    std::vector<TokenId> padded(context.begin(), context.end());
    padded.push_back(0);
    ProbMatrix p = distributions(padded);
    return argmax_lowest(p.row(p.rows() - 1));
  }

  /// Greedy prediction at every position of s.
  virtual std::vector<TokenId> predict_greedy(std::span<const TokenId> s) const {
    ProbMatrix p = distributions(s);
    std::vector<TokenId> out(static_cast<std::size_t>(p.rows()));
    for (Eigen::Index i = 0; i < p.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_lowest(p.row(i));
    return out;
  }
};

}  // namespace memlab
