#include "nsd/sampler_discrete.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <stdexcept>
#include <string>

namespace nsd {

namespace {

constexpr double kTieTolerance = 1e-12;
constexpr double kTargetFloor = 1e-3;

Tokens argmax_rows(std::span<const double> flat, std::size_t vocab) {
  const std::size_t length = flat.size() / vocab;
  Tokens out(length);
  for (std::size_t i = 0; i < length; ++i) {
    const auto row = flat.subspan(i * vocab, vocab);
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Vec one_hot_flat(const Tokens& tokens, std::size_t vocab) {
  Vec flat(tokens.size() * vocab, 0.0);
  for (std::size_t i = 0; i < tokens.size(); ++i) flat[i * vocab + static_cast<std::size_t>(tokens[i])] = 1.0;
  return flat;
}

const SequenceConstraint& as_sequence_constraint(const Constraint& c) {
  const auto* s = dynamic_cast<const SequenceConstraint*>(&c);
  if (!s) throw std::invalid_argument("constraint '" + c.name() + "' is not a sequence constraint");
  return *s;
}

}  // namespace

SequenceConstraint::SequenceConstraint(std::size_t length, std::size_t vocab)
    : length_(length), vocab_(vocab) {
  if (length == 0 || vocab == 0) throw std::invalid_argument("sequence constraint: empty shape");
}

bool SequenceConstraint::satisfied(std::span<const double> x) const {
  check_size(x);
  return satisfied_tokens(argmax_rows(x, vocab_));
}

std::optional<Tokens> SequenceConstraint::repair(const Tokens&,
                                                 const CategoricalSequence&) const {
  return std::nullopt;
}

void SequenceConstraint::check_size(std::span<const double> x) const {
  if (x.size() != length_ * vocab_) {
    throw std::invalid_argument(name() + ": expected " + std::to_string(length_ * vocab_) +
                                " relaxed values, got " + std::to_string(x.size()));
  }
}

TokenAtConstraint::TokenAtConstraint(std::size_t length, std::size_t vocab,
                                     std::size_t position, int token, Kind kind)
    : SequenceConstraint(length, vocab), position_(position), token_(token), kind_(kind) {
  if (position >= length) throw std::invalid_argument("token constraint: position out of range");
  if (token < 0 || static_cast<std::size_t>(token) >= vocab) {
    throw std::invalid_argument("token constraint: token out of range");
  }
}

std::string TokenAtConstraint::name() const {
  return std::string(kind_ == Kind::kRequire ? "require" : "forbid") + "_token";
}

double TokenAtConstraint::residual(std::span<const double> x) const {
  check_size(x);
  const double p = x[position_ * vocab() + static_cast<std::size_t>(token_)];
  return kind_ == Kind::kRequire ? std::max(0.0, 1.0 - p) : std::max(0.0, p);
}

void TokenAtConstraint::residual_gradient(std::span<const double> x,
                                          std::span<double> grad) const {
  check_size(x);
  std::fill(grad.begin(), grad.end(), 0.0);
  grad[position_ * vocab() + static_cast<std::size_t>(token_)] =
      kind_ == Kind::kRequire ? -1.0 : 1.0;
}

bool TokenAtConstraint::satisfied_tokens(const Tokens& tokens) const {
  const bool hit = tokens.at(position_) == token_;
  return kind_ == Kind::kRequire ? hit : !hit;
}

void GumbelConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("gumbel: temperature must be > 0");
  }
}

SimplexRow gumbel_softmax(const SimplexRow& row, double temperature, SeededRng& rng) {
  if (!(temperature > 0.0)) throw std::invalid_argument("gumbel: temperature must be > 0");
  Vec logits(row.size());
  for (std::size_t v = 0; v < row.size(); ++v) {
    logits[v] = (std::log(std::max(row[v], kGumbelFloor)) + rng.gumbel()) / temperature;
  }
  return softmax(logits);
}

SimplexRow gumbel_softmax(const SimplexRow& row, const GumbelConfig& cfg) {
  cfg.validate();
  SeededRng rng(cfg.seed);
  return gumbel_softmax(row, cfg.temperature, rng);
}

CategoricalSequence forward_marginal(const CategoricalSequence& x0,
                                     const DiscreteNoiseSpec& noise, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("forward_marginal: beta outside [0, 1]");
  if (x0.vocab() != noise.vocab()) throw std::invalid_argument("forward_marginal: vocabulary mismatch");
  std::vector<SimplexRow> rows;
  rows.reserve(x0.length());
  for (const auto& r : x0.rows()) {
    std::vector<double> p(r.size());
    for (std::size_t v = 0; v < r.size(); ++v) p[v] = (1.0 - beta) * r[v] + beta * noise.nu[v];
    rows.push_back(SimplexRow::normalized(std::move(p)));
  }
  return CategoricalSequence(std::move(rows));
}

namespace {

std::vector<SimplexRow> prediction_for(const CategoricalSequence& xt, const DiscreteDenoiser& d,
                                       int t, const std::vector<SimplexRow>* prediction) {
  if (!xt.is_one_hot()) throw std::invalid_argument("reverse step: input rows must be one-hot");
  if (t < 1) throw std::invalid_argument("reverse step: t must be >= 1");
  if (!prediction) return discrete_predict(d, xt, t);
  if (prediction->size() != xt.length()) throw std::invalid_argument("reverse step: prediction length mismatch");
  return *prediction;
}

}  // namespace

CategoricalSequence reverse_step_masked(const CategoricalSequence& xt,
                                        const DiscreteDenoiser& d,
                                        const NoiseSchedule& sched, int t,
                                        SeededRng& rng,
                                        const std::vector<SimplexRow>* prediction) {
  const auto& noise = d.noise();
  if (noise.kind != NoiseKind::kMask) throw std::invalid_argument("reverse_step_masked: noise is not masking");
  const auto pred = prediction_for(xt, d, t, prediction);
  const int mask = *noise.mask_token;
  const double beta_t = sched.beta(t);
  const double beta_s = sched.beta(t - 1);
  const double unmask = (beta_t - beta_s) / beta_t;
  const std::size_t vocab = noise.vocab();

  Tokens next = xt.decode();
  for (std::size_t i = 0; i < next.size(); ++i) {
    if (next[i] != mask) continue;
    if (rng.uniform() >= unmask) continue;
    std::vector<double> p(pred[i].probs().begin(), pred[i].probs().end());
    p[static_cast<std::size_t>(mask)] = 0.0;
    next[i] = static_cast<int>(rng.categorical(p));
  }
  return CategoricalSequence::from_tokens(next, vocab);
}

SimplexRow uniform_posterior_row(std::size_t observed, const SimplexRow& prediction,
                                 double beta_t, double beta_s) {
  const std::size_t n = prediction.size();
  if (observed >= n) throw std::invalid_argument("uniform posterior: observed token out of range");
  const double inv_n = 1.0 / static_cast<double>(n);
  const double a = (1.0 - beta_t) / (1.0 - beta_s);
  std::vector<double> out(n, 0.0);
  for (std::size_t u = 0; u < n; ++u) {
    const double pu = prediction[u];
    if (pu == 0.0) continue;
    const double norm_u = (1.0 - beta_t) * (u == observed ? 1.0 : 0.0) + beta_t * inv_n;
    for (std::size_t v = 0; v < n; ++v) {
      const double trans = a * (v == observed ? 1.0 : 0.0) + (1.0 - a) * inv_n;
      const double prior = (1.0 - beta_s) * (v == u ? 1.0 : 0.0) + beta_s * inv_n;
      out[v] += pu * trans * prior / norm_u;
    }
  }
  return SimplexRow::normalized(std::move(out));
}

CategoricalSequence reverse_step_uniform(const CategoricalSequence& xt,
                                         const DiscreteDenoiser& d,
                                         const NoiseSchedule& sched, int t,
                                         SeededRng& rng,
                                         const std::vector<SimplexRow>* prediction) {
  if (d.noise().kind != NoiseKind::kUniform) throw std::invalid_argument("reverse_step_uniform: noise is not uniform");
  const auto pred = prediction_for(xt, d, t, prediction);
  const double beta_t = sched.beta(t);
  const double beta_s = sched.beta(t - 1);
  Tokens next = xt.decode();
  for (std::size_t i = 0; i < next.size(); ++i) {
    const auto row = uniform_posterior_row(static_cast<std::size_t>(next[i]), pred[i], beta_t, beta_s);
    next[i] = static_cast<int>(rng.categorical(row.probs()));
  }
  return CategoricalSequence::from_tokens(next, xt.vocab());
}

SimplexRow kl_project_argmax(const SimplexRow& x, std::size_t token) {
  const std::size_t n = x.size();
  if (token >= n) throw std::invalid_argument("kl_project_argmax: token out of range");
  std::vector<std::size_t> order;
  for (std::size_t v = 0; v < n; ++v) {
    if (v != token) order.push_back(v);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] > x[b]; });
  std::vector<std::size_t> pool = {token};
  double sum = x[token];
  for (std::size_t v : order) {
    if (x[v] * static_cast<double>(pool.size()) <= sum) break;
    pool.push_back(v);
    sum += x[v];
  }
  const double mean = sum / static_cast<double>(pool.size());
  std::vector<double> y(x.probs().begin(), x.probs().end());
  for (std::size_t v : pool) y[v] = mean;
  // Ties go to the lowest id, so nudge `token` up when something ties with it.
  double eta = 1e-12 * std::max(mean, 1e-300);
  for (int k = 0; k < 200; ++k) {
    auto row = SimplexRow::normalized(y);
    if (row.argmax() == token) return row;
    y[token] = mean + eta;
    eta *= 2.0;
  }
  throw std::logic_error("kl_project_argmax: failed to break the tie");
}

namespace {

// Precomputed layout for the logit problem.
struct KlLayout {
  std::size_t length;
  std::size_t vocab;
  std::vector<bool> movable;  // per flat index
};

// Coordinate descent on a feasible argmax pattern: each free row moves to the
// cheapest token (by cone-projection KL) that keeps every predicate true.
// The relaxed solver only finds some feasible pattern; this removes choices
// driven by the relaxation noise.
Tokens refine_pattern(const CategoricalSequence& x, const ConstraintSet& cs, Tokens pattern,
                      const std::vector<bool>& frozen, std::size_t active) {
  const std::size_t length = x.length();
  std::vector<std::vector<std::pair<double, int>>> options(length);
  for (std::size_t i = 0; i < length; ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    for (std::size_t v = 0; v < active; ++v) {
      options[i].emplace_back(kl_div(x.row(i), kl_project_argmax(x.row(i), v)), static_cast<int>(v));
    }
    std::stable_sort(options[i].begin(), options[i].end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
  }
  const auto cost_of = [&](std::size_t i, int tok) {
    for (const auto& [c, v] : options[i]) {
      if (v == tok) return c;
    }
    return std::numeric_limits<double>::infinity();
  };
  for (std::size_t pass = 0; pass < length * x.vocab(); ++pass) {
    bool changed = false;
    for (std::size_t i = 0; i < length; ++i) {
      const int current = pattern[i];
      const double current_cost = cost_of(i, current);
      for (const auto& [c, v] : options[i]) {
        if (c >= current_cost) break;
        pattern[i] = v;
        if (sequence_satisfies(cs, pattern)) {
          changed = true;
          break;
        }
        pattern[i] = current;
      }
    }
    if (!changed) break;
  }
  return pattern;
}

}  // namespace

ProjectionResult kl_project_sequence(const CategoricalSequence& xt,
                                     const ConstraintSet& cs, const AlmConfig& cfg,
                                     const GumbelConfig& gcfg,
                                     const KlProjectionOptions& options) {
  cfg.validate();
  gcfg.validate();
  const std::size_t length = xt.length();
  const std::size_t vocab = xt.vocab();
  for (const auto& c : cs.items()) {
    const auto& sc = as_sequence_constraint(*c);
    if (sc.length() != length || sc.vocab() != vocab) {
      throw std::invalid_argument("kl_project_sequence: constraint shape does not match the sequence");
    }
  }
  if (!options.frozen.empty() && options.frozen.size() != length) {
    throw std::invalid_argument("kl_project_sequence: frozen mask length mismatch");
  }
  const std::size_t active = options.active_vocab == 0 ? vocab : options.active_vocab;
  if (active > vocab) throw std::invalid_argument("kl_project_sequence: active_vocab exceeds vocabulary");

  ProjectionResult result;
  if (sequence_satisfies(cs, xt.decode())) {
    result.point = xt.flat();
    result.converged = true;
    return result;
  }

  const Vec x = xt.flat();
  const std::size_t n = x.size();
  KlLayout layout{length, vocab, std::vector<bool>(n, true)};
  for (std::size_t i = 0; i < length; ++i) {
    const bool frozen = !options.frozen.empty() && options.frozen[i];
    for (std::size_t v = 0; v < vocab; ++v) {
      if (frozen || v >= active) layout.movable[i * vocab + v] = false;
    }
  }
  // The relaxed solve only has to find an argmax pattern, so movable rows are
  // fitted to a floored copy of x. Against a one-hot x the softmax would
  // saturate and the residual gradients would vanish. The final rows are
  // still exact KL projections of x.
  Vec target = x;
  for (std::size_t i = 0; i < length; ++i) {
    if (!layout.movable[i * vocab]) continue;
    double total = 0.0;
    for (std::size_t v = 0; v < active; ++v) total += (target[i * vocab + v] = std::max(x[i * vocab + v], kTargetFloor));
    for (std::size_t v = 0; v < active; ++v) target[i * vocab + v] /= total;
  }
  Vec z0(n);
  for (std::size_t k = 0; k < n; ++k) {
    z0[k] = std::log(std::max(target[k], kGumbelFloor));
  }

  const double temp = gcfg.temperature;
  Vec gumbel(n, 0.0);
  Vec scratch(vocab);

  AlmProblem problem;
  problem.num_vars = n;
  problem.cost = [&](std::span<const double> z, std::span<double> grad) {
    double total = 0.0;
    for (std::size_t i = 0; i < length; ++i) {
      const auto zi = z.subspan(i * vocab, vocab);
      const double lse = log_sum_exp(zi);
      for (std::size_t v = 0; v < vocab; ++v) {
        const std::size_t k = i * vocab + v;
        const double logy = zi[v] - lse;
        if (target[k] > 0.0) total += target[k] * (std::log(target[k]) - logy);
        if (!grad.empty()) grad[k] = layout.movable[k] ? std::exp(logy) - target[k] : 0.0;
      }
    }
    return total;
  };
  problem.to_point = [&](std::span<const double> z, Vec& point) {
    point.resize(n);
    for (std::size_t i = 0; i < length; ++i) {
      for (std::size_t v = 0; v < vocab; ++v) {
        scratch[v] = (z[i * vocab + v] + gumbel[i * vocab + v]) / temp;
      }
      const auto row = softmax(scratch);
      std::copy(row.probs().begin(), row.probs().end(), point.begin() + static_cast<std::ptrdiff_t>(i * vocab));
    }
  };
  Vec psi;
  problem.pullback = [&](std::span<const double> z, std::span<const double> g,
                         std::span<double> out) {
    problem.to_point(z, psi);
    for (std::size_t i = 0; i < length; ++i) {
      double inner = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) inner += psi[i * vocab + v] * g[i * vocab + v];
      for (std::size_t v = 0; v < vocab; ++v) {
        const std::size_t k = i * vocab + v;
        out[k] = layout.movable[k] ? psi[k] * (g[k] - inner) / temp : 0.0;
      }
    }
  };
  problem.hard_check = [&](std::span<const double> z) {
    return sequence_satisfies(cs, argmax_rows(z, vocab));
  };
  problem.final_residual = [&](std::span<const double> z) {
    return cs.residual(one_hot_flat(argmax_rows(z, vocab), vocab));
  };
  problem.on_outer = [&](int outer) {
    SeededRng rng(mix_seed(gcfg.seed, static_cast<std::uint64_t>(outer)));
    for (double& g : gumbel) g = rng.gumbel();
  };
  problem.check_every_inner_step = true;
  problem.polish = false;

  auto solved = alm_solve(problem, cs, z0, cfg, nullptr);
  result.iterations = solved.iterations;
  result.inner_iterations = solved.inner_iterations;
  result.converged = solved.converged;
  Tokens pattern = argmax_rows(solved.point, vocab);
  if (!solved.converged && options.search_fallback > 0) {
    const auto goal = [&](const Tokens& s) {
      for (std::size_t i = 0; i < length; ++i) {
        const bool frozen = !options.frozen.empty() && options.frozen[i];
        if (frozen && s[i] != static_cast<int>(xt.row(i).argmax())) return false;
      }
      return sequence_satisfies(cs, s);
    };
    if (auto found = best_first_search(xt, goal, active, options.search_fallback)) {
      pattern = std::move(found->tokens);
      solved.converged = true;
      result.converged = true;
    }
  }
  if (solved.converged) {
    pattern = refine_pattern(xt, cs, std::move(pattern), options.frozen, active);
  }
  std::vector<SimplexRow> rows;
  rows.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    if (solved.converged) {
      const bool frozen = !options.frozen.empty() && options.frozen[i];
      rows.push_back(frozen ? xt.row(i) : kl_project_argmax(xt.row(i), static_cast<std::size_t>(pattern[i])));
    } else {
      rows.push_back(softmax(std::span<const double>(solved.point).subspan(i * vocab, vocab)));
    }
  }
  result.point = CategoricalSequence(std::move(rows)).flat();
  result.residual_final = cs.residual(one_hot_flat(pattern, vocab));
  return result;
}

double flip_cost(const SimplexRow& row, std::size_t v) {
  const double top = row[row.argmax()];
  return std::log(std::max(top, kKlFloor)) - std::log(std::max(row[v], kKlFloor));
}

std::optional<SearchResult> best_first_search(const CategoricalSequence& rows,
                                              const std::function<bool(const Tokens&)>& goal,
                                              std::size_t vocab_limit,
                                              std::size_t max_expansions) {
  const std::size_t length = rows.length();
  const std::size_t vocab = vocab_limit == 0 ? rows.vocab() : std::min(vocab_limit, rows.vocab());
  if (length == 0 || vocab == 0) throw std::invalid_argument("best_first_search: empty problem");

  // Per position: allowed tokens by nondecreasing cost (ties: lower id), with
  // costs measured from the best allowed token.
  std::vector<std::vector<int>> alt(length);
  std::vector<std::vector<double>> alt_cost(length);
  for (std::size_t i = 0; i < length; ++i) {
    const auto& r = rows.row(i);
    std::vector<int> toks(vocab);
    for (std::size_t v = 0; v < vocab; ++v) toks[v] = static_cast<int>(v);
    const auto logp = [&](int v) { return std::log(std::max(r[static_cast<std::size_t>(v)], kKlFloor)); };
    std::stable_sort(toks.begin(), toks.end(), [&](int a, int b) { return logp(a) > logp(b); });
    const double top = logp(toks.front());
    alt[i] = toks;
    for (int v : toks) alt_cost[i].push_back(top - logp(v));
  }

  struct Node {
    double cost;
    std::vector<int> ranks;
    int last;
  };
  const auto tokens_of = [&](const Node& nd) {
    Tokens s(length);
    for (std::size_t i = 0; i < length; ++i) s[i] = alt[i][static_cast<std::size_t>(nd.ranks[i])];
    return s;
  };
  const auto worse = [&](const Node& a, const Node& b) {
    if (a.cost != b.cost) return a.cost > b.cost;
    return tokens_of(a) > tokens_of(b);
  };
  std::priority_queue<Node, std::vector<Node>, decltype(worse)> open(worse);
  open.push({0.0, std::vector<int>(length, 0), -1});

  std::optional<SearchResult> best;
  std::size_t pops = 0;
  while (!open.empty()) {
    Node nd = open.top();
    if (best && nd.cost > best->cost + kTieTolerance) break;
    open.pop();
    if (++pops > max_expansions) return best;
    Tokens s = tokens_of(nd);
    if (goal(s)) {
      if (!best || s < best->tokens) {
        const double c = best ? best->cost : nd.cost;
        best = SearchResult{std::move(s), c, pops};
      }
      best->expansions = pops;
    }
    const auto push_child = [&](std::size_t q, int rank, int last) {
      Node child{nd.cost, nd.ranks, last};
      child.cost += alt_cost[q][static_cast<std::size_t>(rank)] -
                    alt_cost[q][static_cast<std::size_t>(nd.ranks[q])];
      child.ranks[q] = rank;
      open.push(std::move(child));
    };
    if (nd.last >= 0) {
      const auto p = static_cast<std::size_t>(nd.last);
      if (static_cast<std::size_t>(nd.ranks[p]) + 1 < alt[p].size()) push_child(p, nd.ranks[p] + 1, nd.last);
    }
    for (std::size_t q = static_cast<std::size_t>(nd.last + 1); q < length; ++q) {
      if (alt[q].size() > 1) push_child(q, 1, static_cast<int>(q));
    }
  }
  if (best) {
    // Report the exact cost of the chosen sequence.
    double c = 0.0;
    for (std::size_t i = 0; i < length; ++i) {
      const auto it = std::find(alt[i].begin(), alt[i].end(), best->tokens[i]);
      c += alt_cost[i][static_cast<std::size_t>(it - alt[i].begin())];
    }
    best->cost = c;
  }
  return best;
}

bool sequence_satisfies(const ConstraintSet& cs, const Tokens& tokens) {
  for (const auto& c : cs.items()) {
    if (!as_sequence_constraint(*c).satisfied_tokens(tokens)) return false;
  }
  return true;
}

namespace {

struct DiscreteChain {
  Tokens tokens;
  bool repaired = false;
  bool failed = false;
  std::size_t projection_failures = 0;
};

std::optional<Tokens> exact_repair(const ConstraintSet& cs, Tokens tokens,
                                   const CategoricalSequence& rows, std::size_t vocab_limit,
                                   std::size_t budget) {
  for (const auto& c : cs.items()) {
    const auto& sc = as_sequence_constraint(*c);
    if (sc.satisfied_tokens(tokens)) continue;
    if (auto fixed = sc.repair(tokens, rows)) tokens = std::move(*fixed);
  }
  if (sequence_satisfies(cs, tokens)) return tokens;
  const auto found = best_first_search(
      rows, [&](const Tokens& s) { return sequence_satisfies(cs, s); }, vocab_limit, budget);
  if (!found) return std::nullopt;
  return found->tokens;
}

// Whether some sequence keeping the frozen positions satisfies cs, found
// within `budget` search pops. Without frozen positions the answer is
// assumed to be yes.
bool completion_exists(const CategoricalSequence& rows, const ConstraintSet& cs,
                       const KlProjectionOptions& opts, std::size_t budget) {
  if (std::find(opts.frozen.begin(), opts.frozen.end(), true) == opts.frozen.end()) return true;
  const Tokens current = rows.decode();
  const auto goal = [&](const Tokens& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (opts.frozen[i] && s[i] != current[i]) return false;
    }
    return sequence_satisfies(cs, s);
  };
  return best_first_search(rows, goal, opts.active_vocab, budget).has_value();
}

DiscreteChain run_discrete_chain(const DiscreteDenoiser& d, const NoiseSchedule& sched,
                                 const ConstraintSet& cs, const DiscreteSamplerConfig& cfg,
                                 SeededRng rng) {
  const auto& noise = d.noise();
  const std::size_t vocab = noise.vocab();
  const std::size_t length = d.length();
  const bool masked = noise.kind == NoiseKind::kMask;

  Tokens start(length);
  for (auto& tok : start) {
    tok = masked ? *noise.mask_token : static_cast<int>(rng.below(vocab));
  }
  CategoricalSequence x = CategoricalSequence::from_tokens(start, vocab);
  DiscreteChain chain;
  std::vector<SimplexRow> last_rows;
  for (int t = sched.steps(); t >= 1; --t) {
    auto pred = discrete_predict(d, x, t);
    if (cfg.mode == DiscreteMode::kNsd && !cs.empty()) {
      KlProjectionOptions opts;
      opts.active_vocab = noise.data_vocab();
      opts.search_fallback = cfg.feasibility_budget;
      std::vector<SimplexRow> rows = pred;
      if (masked) {
        opts.frozen.assign(length, false);
        for (std::size_t i = 0; i < length; ++i) {
          if (x.hot_token(i) != *noise.mask_token) {
            opts.frozen[i] = true;
            rows[i] = x.row(i);
          }
        }
      }
      GumbelConfig g = cfg.gumbel;
      g.seed = rng.next_u64();
      const CategoricalSequence relaxed(rows);
      if (!completion_exists(relaxed, cs, opts, cfg.feasibility_budget)) {
        ++chain.projection_failures;
      } else if (const auto pr = kl_project_sequence(relaxed, cs, cfg.alm, g, opts); pr.converged) {
        pred = CategoricalSequence::from_flat(pr.point, vocab).rows();
      } else {
        ++chain.projection_failures;
      }
    }
    x = masked ? reverse_step_masked(x, d, sched, t, rng, &pred)
               : reverse_step_uniform(x, d, sched, t, rng, &pred);
    last_rows = std::move(pred);
  }
  chain.tokens = x.decode();
  if (cfg.mode != DiscreteMode::kUnconstrained && !sequence_satisfies(cs, chain.tokens)) {
    chain.repaired = true;
    // Flip costs are measured against the rows of the final step.
    const auto repaired = exact_repair(cs, chain.tokens, CategoricalSequence(last_rows),
                                       noise.data_vocab(), cfg.search_budget);
    if (repaired) chain.tokens = *repaired;
    else chain.failed = true;
  }
  return chain;
}

}  // namespace

DiscreteSampleBatch sample_discrete_constrained(const DiscreteDenoiser& d,
                                                const NoiseSchedule& sched,
                                                const ConstraintSet& cs,
                                                const DiscreteSamplerConfig& cfg,
                                                std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_discrete_constrained: n must be >= 1");
  if (cfg.retry_cap < 0) throw std::invalid_argument("sample_discrete_constrained: retry_cap must be >= 0");
  cfg.alm.validate();
  cfg.gumbel.validate();
  for (const auto& c : cs.items()) {
    const auto& sc = as_sequence_constraint(*c);
    if (sc.length() != d.length() || sc.vocab() != d.noise().vocab()) {
      throw std::invalid_argument("sample_discrete_constrained: constraint '" + sc.name() +
                                  "' does not match the model's sequence shape");
    }
  }
  DiscreteSampleBatch batch;
  batch.sequences.reserve(n);
  std::size_t failed = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const SeededRng chain_rng(mix_seed(seed, i));
    DiscreteChain chain;
    for (int attempt = 0;; ++attempt) {
      chain = run_discrete_chain(d, sched, cs, cfg,
                                 attempt == 0 ? chain_rng : chain_rng.fork(static_cast<std::uint64_t>(attempt)));
      batch.projection_failures += chain.projection_failures;
      if (!chain.failed || attempt >= cfg.retry_cap) break;
      ++batch.retries;
    }
    if (chain.failed) ++failed;
    batch.repaired += chain.repaired ? 1 : 0;
    batch.sequences.push_back(std::move(chain.tokens));
  }
  if (failed > 0) throw RetryExhausted(failed);
  return batch;
}

}  // namespace nsd
