#include "nsd/sequence.hpp"

#include <stdexcept>

namespace nsd {

CategoricalSequence::CategoricalSequence(std::vector<SimplexRow> rows)
    : rows_(std::move(rows)) {
  for (const auto& r : rows_) {
    if (r.size() != rows_.front().size()) {
      throw std::invalid_argument("sequence: rows differ in vocabulary size");
    }
  }
}

CategoricalSequence CategoricalSequence::from_tokens(const Tokens& tokens,
                                                     std::size_t vocab) {
  std::vector<SimplexRow> rows;
  rows.reserve(tokens.size());
  for (int tok : tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
      throw std::out_of_range("sequence: token outside vocabulary");
    }
    rows.push_back(SimplexRow::one_hot(vocab, static_cast<std::size_t>(tok)));
  }
  return CategoricalSequence(std::move(rows));
}

CategoricalSequence CategoricalSequence::from_flat(std::span<const double> flat,
                                                   std::size_t vocab) {
  if (vocab == 0 || flat.size() % vocab != 0) {
    throw std::invalid_argument("sequence: flat size not a multiple of vocab");
  }
  std::vector<SimplexRow> rows;
  for (std::size_t i = 0; i < flat.size(); i += vocab) {
    rows.push_back(SimplexRow::normalized(
        std::vector<double>(flat.begin() + i, flat.begin() + i + vocab)));
  }
  return CategoricalSequence(std::move(rows));
}

void CategoricalSequence::set_row(std::size_t i, SimplexRow row) {
  if (row.size() != vocab()) throw std::invalid_argument("sequence: vocabulary mismatch");
  rows_.at(i) = std::move(row);
}

Tokens CategoricalSequence::decode() const {
  Tokens out;
  out.reserve(rows_.size());
  for (const auto& r : rows_) out.push_back(static_cast<int>(r.argmax()));
  return out;
}

Vec CategoricalSequence::flat() const {
  Vec out;
  out.reserve(length() * vocab());
  for (const auto& r : rows_) out.insert(out.end(), r.probs().begin(), r.probs().end());
  return out;
}

std::optional<int> CategoricalSequence::hot_token(std::size_t i) const {
  const auto& r = rows_.at(i);
  const std::size_t k = r.argmax();
  if (r[k] != 1.0) return std::nullopt;
  return static_cast<int>(k);
}

bool CategoricalSequence::is_one_hot() const {
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    if (!hot_token(i)) return false;
  }
  return true;
}

Tokens decode_argmax(const CategoricalSequence& x) { return x.decode(); }

}  // namespace nsd
