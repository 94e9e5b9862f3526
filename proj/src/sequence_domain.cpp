#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "nsd/constraints_domain.hpp"

namespace nsd {

namespace {

bool matches_at(const Tokens& s, std::size_t start, const Tokens& pattern) {
  if (start + pattern.size() > s.size()) return false;
  return std::equal(pattern.begin(), pattern.end(), s.begin() + static_cast<std::ptrdiff_t>(start));
}

struct Match {
  std::size_t start;
  std::size_t rule;
};

std::optional<Match> leftmost_match(const Tokens& s, const std::vector<PatternRule>& rules) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t r = 0; r < rules.size(); ++r) {
      if (matches_at(s, i, rules[r].pattern)) return Match{i, r};
    }
  }
  return std::nullopt;
}

// Whether some match overlaps [lo, hi), or spans the junction at lo when the
// interval is empty.
bool site_clean(const Tokens& s, std::size_t lo, std::size_t hi, const std::vector<PatternRule>& rules) {
  for (std::size_t r = 0; r < rules.size(); ++r) {
    const std::size_t len = rules[r].pattern.size();
    for (std::size_t m = 0; m < s.size(); ++m) {
      const bool touches = hi > lo ? (m < hi && m + len > lo) : (m < lo && m + len > lo);
      if (touches && matches_at(s, m, rules[r].pattern)) return false;
    }
  }
  return true;
}

Tokens splice(const Tokens& s, std::size_t start, std::size_t len, const Tokens& insert) {
  Tokens out(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(start));
  out.insert(out.end(), insert.begin(), insert.end());
  out.insert(out.end(), s.begin() + static_cast<std::ptrdiff_t>(start + len), s.end());
  return out;
}

// Soft n-gram count sum_start prod_k x[start + k][ngram[k]] over row-major
// rows; adds weight * d count / dx to grad when it is non-empty.
double soft_ngram_count(std::span<const double> x, std::size_t length, std::size_t vocab,
                        const Tokens& ngram, double weight, std::span<double> grad) {
  const std::size_t n = ngram.size();
  if (n == 0 || n > length) return 0.0;
  double total = 0.0;
  for (std::size_t s = 0; s + n <= length; ++s) {
    double prod = 1.0;
    for (std::size_t k = 0; k < n; ++k) prod *= x[(s + k) * vocab + static_cast<std::size_t>(ngram[k])];
    total += prod;
    if (grad.empty()) continue;
    for (std::size_t k = 0; k < n; ++k) {
      double others = 1.0;
      for (std::size_t q = 0; q < n; ++q) {
        if (q != k) others *= x[(s + q) * vocab + static_cast<std::size_t>(ngram[q])];
      }
      grad[(s + k) * vocab + static_cast<std::size_t>(ngram[k])] += weight * others;
    }
  }
  return weight * total;
}

void check_tokens(const Tokens& t, std::size_t vocab, const char* what) {
  for (int v : t) {
    if (v < 0 || static_cast<std::size_t>(v) >= vocab) {
      throw std::invalid_argument(std::string(what) + ": token out of range");
    }
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void PatternRule::validate() const {
  if (pattern.empty()) throw std::invalid_argument("pattern rule: empty pattern");
  for (const auto& r : replacements) {
    if (r.size() > pattern.size()) throw std::invalid_argument("pattern rule: replacement longer than pattern");
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (matches_at(r, i, pattern)) throw std::invalid_argument("pattern rule: replacement contains the pattern");
    }
  }
}

std::vector<PatternRule> default_pattern_rules() {
  return {
      {{1, 2}, {{1, 3}, {1, 4}}},
      {{5, 5}, {{5, 6}, {5, 0}}},
      {{7, 0, 7}, {{7, 0, 6}}},
      {{3, 3, 3}, {{3, 4, 3}}},
      {{6, 2}, {{6, 1}}},
  };
}

std::vector<PatternRule> pattern_rules_from_json_text(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (!j.is_array()) throw std::invalid_argument("rule file: expected a list of rules");
  std::vector<PatternRule> rules;
  for (const auto& item : j) {
    PatternRule r{item.at("pattern").get<Tokens>(), item.value("replacements", std::vector<Tokens>{})};
    r.validate();
    rules.push_back(std::move(r));
  }
  return rules;
}

std::vector<PatternRule> load_pattern_rules(const std::string& path) {
  return pattern_rules_from_json_text(read_file(path));
}

std::size_t count_pattern_matches(const Tokens& tokens, const std::vector<PatternRule>& rules) {
  std::size_t n = 0;
  for (const auto& r : rules) {
    for (std::size_t i = 0; i < tokens.size(); ++i) n += matches_at(tokens, i, r.pattern) ? 1 : 0;
  }
  return n;
}

Tokens pattern_repair(Tokens tokens, const std::vector<PatternRule>& rules) {
  for (const auto& r : rules) r.validate();
  while (const auto m = leftmost_match(tokens, rules)) {
    const auto& rule = rules[m->rule];
    bool fixed = false;
    for (const auto& cand : rule.replacements) {
      Tokens next = splice(tokens, m->start, rule.pattern.size(), cand);
      if (site_clean(next, m->start, m->start + cand.size(), rules)) {
        tokens = std::move(next);
        fixed = true;
        break;
      }
    }
    if (!fixed) tokens = splice(tokens, m->start, rule.pattern.size(), {});
  }
  return tokens;
}

PatternConstraint::PatternConstraint(std::size_t length, std::size_t vocab,
                                     std::vector<PatternRule> rules, std::size_t data_vocab)
    : SequenceConstraint(length, vocab), rules_(std::move(rules)),
      data_vocab_(data_vocab == 0 ? vocab : data_vocab) {
  for (const auto& r : rules_) {
    r.validate();
    check_tokens(r.pattern, vocab, "pattern rule");
    for (const auto& c : r.replacements) check_tokens(c, vocab, "pattern rule");
  }
}

double PatternConstraint::residual(std::span<const double> x) const {
  check_size(x);
  double r = 0.0;
  for (const auto& rule : rules_) r += soft_ngram_count(x, length(), vocab(), rule.pattern, 1.0, {});
  return r;
}

void PatternConstraint::residual_gradient(std::span<const double> x, std::span<double> grad) const {
  check_size(x);
  std::fill(grad.begin(), grad.end(), 0.0);
  for (const auto& rule : rules_) soft_ngram_count(x, length(), vocab(), rule.pattern, 1.0, grad);
}

bool PatternConstraint::satisfied_tokens(const Tokens& tokens) const {
  return count_pattern_matches(tokens, rules_) == 0;
}

std::optional<Tokens> PatternConstraint::repair(const Tokens& tokens, const CategoricalSequence&) const {
  Tokens out = pattern_repair(tokens, rules_);
  while (out.size() < length()) {
    bool extended = false;
    for (std::size_t v = 0; v < data_vocab_ && !extended; ++v) {
      out.push_back(static_cast<int>(v));
      if (count_pattern_matches(out, rules_) == 0) extended = true;
      else out.pop_back();
    }
    if (!extended) return std::nullopt;
  }
  return out;
}

DatasetView::DatasetView(std::vector<Tokens> sequences) : set_(sequences.begin(), sequences.end()) {}

DatasetView DatasetView::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Tokens> seqs;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    Tokens t;
    int v;
    while (ls >> v) t.push_back(v);
    if (!t.empty()) seqs.push_back(std::move(t));
  }
  return DatasetView(std::move(seqs));
}

NoveltyConstraint::NoveltyConstraint(std::size_t length, std::size_t vocab,
                                     std::shared_ptr<const DatasetView> dataset, std::size_t data_vocab)
    : SequenceConstraint(length, vocab), dataset_(std::move(dataset)),
      data_vocab_(data_vocab == 0 ? vocab : data_vocab) {
  if (!dataset_) throw std::invalid_argument("novelty constraint: null dataset");
}

double NoveltyConstraint::residual(std::span<const double> x) const {
  check_size(x);
  double r = 0.0;
  for (const auto& s : dataset_->sequences()) {
    if (s.size() != length()) continue;
    double prod = 1.0;
    for (std::size_t i = 0; i < length() && prod != 0.0; ++i) {
      const auto v = static_cast<std::size_t>(s[i]);
      prod *= v < vocab() ? x[i * vocab() + v] : 0.0;
    }
    r += prod;
  }
  return r;
}

void NoveltyConstraint::residual_gradient(std::span<const double> x, std::span<double> grad) const {
  check_size(x);
  std::fill(grad.begin(), grad.end(), 0.0);
  const std::size_t len = length();
  Vec prefix(len + 1), suffix(len + 1);
  for (const auto& s : dataset_->sequences()) {
    if (s.size() != len) continue;
    bool in_range = true;
    for (int v : s) in_range = in_range && v >= 0 && static_cast<std::size_t>(v) < vocab();
    if (!in_range) continue;
    prefix[0] = 1.0;
    for (std::size_t i = 0; i < len; ++i) prefix[i + 1] = prefix[i] * x[i * vocab() + static_cast<std::size_t>(s[i])];
    suffix[len] = 1.0;
    for (std::size_t i = len; i-- > 0;) suffix[i] = suffix[i + 1] * x[i * vocab() + static_cast<std::size_t>(s[i])];
    for (std::size_t i = 0; i < len; ++i) {
      grad[i * vocab() + static_cast<std::size_t>(s[i])] += prefix[i] * suffix[i + 1];
    }
  }
}

bool NoveltyConstraint::satisfied_tokens(const Tokens& tokens) const {
  return !dataset_->contains(tokens);
}

std::optional<Tokens> NoveltyConstraint::repair(const Tokens& tokens,
                                                const CategoricalSequence& rows) const {
  if (!dataset_->contains(tokens)) return tokens;
  const auto found = best_first_search(
      rows, [&](const Tokens& s) { return !dataset_->contains(s); }, data_vocab_);
  if (!found) return std::nullopt;
  return found->tokens;
}

CategoricalSequence novelty_project(const CategoricalSequence& x, DatasetView& dataset,
                                    std::size_t vocab_limit, std::size_t max_expansions) {
  if (x.length() == 0) throw std::invalid_argument("novelty_project: empty sequence");
  const std::size_t limit = vocab_limit == 0 ? x.vocab() : std::min(vocab_limit, x.vocab());
  // Saturation check: count dataset sequences inside the search space.
  double space = 1.0;
  for (std::size_t i = 0; i < x.length(); ++i) space *= static_cast<double>(limit);
  std::size_t covered = 0;
  for (const auto& s : dataset.sequences()) {
    bool inside = s.size() == x.length();
    for (int v : s) inside = inside && v >= 0 && static_cast<std::size_t>(v) < limit;
    covered += inside ? 1 : 0;
  }
  if (static_cast<double>(covered) >= space) throw Infeasible("novelty_project: dataset covers every sequence");

  const Tokens current = x.decode();
  bool current_ok = !dataset.contains(current);
  for (int v : current) current_ok = current_ok && static_cast<std::size_t>(v) < limit;
  if (current_ok) {
    dataset.add(current);
    return x;
  }
  const auto found = best_first_search(
      x, [&](const Tokens& s) { return !dataset.contains(s); }, limit, max_expansions);
  if (!found) throw Infeasible("novelty_project: search budget exhausted");
  dataset.add(found->tokens);
  std::vector<SimplexRow> rows;
  rows.reserve(x.length());
  for (std::size_t i = 0; i < x.length(); ++i) {
    rows.push_back(kl_project_argmax(x.row(i), static_cast<std::size_t>(found->tokens[i])));
  }
  return CategoricalSequence(std::move(rows));
}

double SurrogateScorer::hard_score(const Tokens& tokens) const {
  double s = 0.0;
  for (const auto& e : entries) {
    for (std::size_t i = 0; i < tokens.size(); ++i) s += matches_at(tokens, i, e.ngram) ? e.weight : 0.0;
  }
  return s;
}

double SurrogateScorer::soft_score(std::span<const double> rows, std::size_t length,
                                   std::size_t vocab) const {
  double s = 0.0;
  for (const auto& e : entries) s += soft_ngram_count(rows, length, vocab, e.ngram, e.weight, {});
  return s;
}

void SurrogateScorer::soft_score_gradient(std::span<const double> rows, std::size_t length,
                                          std::size_t vocab, std::span<double> grad) const {
  std::fill(grad.begin(), grad.end(), 0.0);
  for (const auto& e : entries) soft_ngram_count(rows, length, vocab, e.ngram, e.weight, grad);
}

SurrogateScorer random_surrogate(std::size_t data_vocab, std::size_t n_entries, double tau,
                                 SeededRng& rng) {
  if (data_vocab == 0) throw std::invalid_argument("random_surrogate: empty vocabulary");
  n_entries = std::min(n_entries, data_vocab * data_vocab);
  SurrogateScorer scorer;
  scorer.tau = tau;
  std::set<Tokens> used;
  while (scorer.entries.size() < n_entries) {
    Tokens bigram{static_cast<int>(rng.below(data_vocab)), static_cast<int>(rng.below(data_vocab))};
    const double w = 0.5 + rng.uniform();
    if (used.insert(bigram).second) scorer.entries.push_back({bigram, w});
  }
  return scorer;
}

SurrogateConstraint::SurrogateConstraint(std::size_t length, std::size_t vocab, SurrogateScorer scorer)
    : SequenceConstraint(length, vocab), scorer_(std::move(scorer)) {
  for (const auto& e : scorer_.entries) {
    if (e.ngram.empty()) throw std::invalid_argument("surrogate: empty n-gram");
    check_tokens(e.ngram, vocab, "surrogate");
  }
}

double SurrogateConstraint::residual(std::span<const double> x) const {
  check_size(x);
  return std::max(0.0, scorer_.soft_score(x, length(), vocab()) - scorer_.tau);
}

void SurrogateConstraint::residual_gradient(std::span<const double> x, std::span<double> grad) const {
  check_size(x);
  if (scorer_.soft_score(x, length(), vocab()) <= scorer_.tau) {
    std::fill(grad.begin(), grad.end(), 0.0);
    return;
  }
  scorer_.soft_score_gradient(x, length(), vocab(), grad);
}

bool SurrogateConstraint::satisfied_tokens(const Tokens& tokens) const {
  return scorer_.hard_score(tokens) <= scorer_.tau;
}

std::vector<Tokens> toy_sequence_data(std::size_t data_vocab, std::size_t length, std::size_t n,
                                      const std::vector<PatternRule>& rules, SeededRng& rng) {
  if (data_vocab == 0 || length == 0) throw std::invalid_argument("toy_sequence_data: empty shape");
  std::vector<double> trans(data_vocab * data_vocab);
  for (std::size_t u = 0; u < data_vocab; ++u) {
    for (std::size_t v = 0; v < data_vocab; ++v) trans[u * data_vocab + v] = 0.05 + rng.uniform();
  }
  for (const auto& r : rules) {
    for (std::size_t k = 0; k + 1 < r.pattern.size(); ++k) {
      const auto u = static_cast<std::size_t>(r.pattern[k]);
      const auto v = static_cast<std::size_t>(r.pattern[k + 1]);
      if (u < data_vocab && v < data_vocab) trans[u * data_vocab + v] += 1.5;
    }
  }
  std::vector<Tokens> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Tokens t{static_cast<int>(rng.below(data_vocab))};
    while (t.size() < length) {
      const auto u = static_cast<std::size_t>(t.back());
      t.push_back(static_cast<int>(rng.categorical(
          SimplexRow::normalized({trans.begin() + static_cast<std::ptrdiff_t>(u * data_vocab),
                                  trans.begin() + static_cast<std::ptrdiff_t>((u + 1) * data_vocab)})
              .probs())));
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace nsd
