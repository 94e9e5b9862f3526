#pragma once

#include <optional>
#include <span>
#include <vector>

#include "nsd/numerics.hpp"

namespace nsd {

using Tokens = std::vector<int>;

/// Length-L sequence of categorical rows over a vocabulary of size V.
class CategoricalSequence {
 public:
  CategoricalSequence() = default;
  /// All rows must share one vocabulary size.
  explicit CategoricalSequence(std::vector<SimplexRow> rows);

  static CategoricalSequence from_tokens(const Tokens& tokens, std::size_t vocab);
  /// Row-major flat probabilities (L * V values); each row is renormalized.
  static CategoricalSequence from_flat(std::span<const double> flat,
                                       std::size_t vocab);

  std::size_t length() const { return rows_.size(); }
  std::size_t vocab() const { return rows_.empty() ? 0 : rows_.front().size(); }
  const SimplexRow& row(std::size_t i) const { return rows_[i]; }
  const std::vector<SimplexRow>& rows() const { return rows_; }
  void set_row(std::size_t i, SimplexRow row);

  /// Per-position argmax, lowest token id on ties.
  Tokens decode() const;
  Vec flat() const;
  /// Token at position i when row i is exactly one-hot.
  std::optional<int> hot_token(std::size_t i) const;
  bool is_one_hot() const;

 private:
  std::vector<SimplexRow> rows_;
};

Tokens decode_argmax(const CategoricalSequence& x);

}  // namespace nsd
