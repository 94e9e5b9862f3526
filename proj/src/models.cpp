#include "nsd/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

namespace nsd {

GaussianMixture::GaussianMixture(SimplexRow weights, std::vector<Vec> means,
                                 std::vector<Vec> variances)
    : weights_(std::move(weights)),
      means_(std::move(means)),
      variances_(std::move(variances)) {
  if (means_.empty()) throw std::invalid_argument("mixture: no components");
  if (weights_.size() != means_.size() || variances_.size() != means_.size()) {
    throw std::invalid_argument("mixture: component count mismatch");
  }
  const std::size_t d = means_.front().size();
  if (d == 0) throw std::invalid_argument("mixture: zero dimension");
  for (std::size_t k = 0; k < means_.size(); ++k) {
    if (means_[k].size() != d || variances_[k].size() != d) {
      throw std::invalid_argument("mixture: dimension mismatch");
    }
    for (double v : variances_[k]) {
      if (!(v > 0.0)) throw std::invalid_argument("mixture: variances must be > 0");
    }
  }
}

GaussianMixture GaussianMixture::isotropic(std::vector<Vec> means,
                                           double variance) {
  if (means.empty()) throw std::invalid_argument("mixture: no components");
  std::vector<Vec> vars(means.size(), Vec(means.front().size(), variance));
  auto weights = SimplexRow::uniform(means.size());
  return GaussianMixture(std::move(weights), std::move(means),
                         std::move(vars));
}

namespace {

// Per-component log N(x; m_k, v_k) + log w_k at corruption level beta.
std::vector<double> component_log_terms(const GaussianMixture& m,
                                        std::span<const double> x,
                                        double beta) {
  constexpr double kLog2Pi = 1.8378770664093453;
  const double keep = std::sqrt(1.0 - beta);
  std::vector<double> terms(m.components());
  for (std::size_t k = 0; k < m.components(); ++k) {
    double s = std::log(std::max(m.weights()[k], 1e-300));
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double var = (1.0 - beta) * m.variances()[k][i] + beta;
      const double diff = x[i] - keep * m.means()[k][i];
      s -= 0.5 * (kLog2Pi + std::log(var) + diff * diff / var);
    }
    terms[k] = s;
  }
  return terms;
}

}  // namespace

double GaussianMixture::log_density(std::span<const double> x,
                                    double beta) const {
  if (x.size() != dim()) throw std::invalid_argument("mixture: dimension mismatch");
  return log_sum_exp(component_log_terms(*this, x, beta));
}

Vec GaussianMixture::score(std::span<const double> x, double beta) const {
  if (x.size() != dim()) throw std::invalid_argument("mixture: dimension mismatch");
  const auto terms = component_log_terms(*this, x, beta);
  const double lse = log_sum_exp(terms);
  const double keep = std::sqrt(1.0 - beta);
  Vec g(dim(), 0.0);
  for (std::size_t k = 0; k < components(); ++k) {
    const double resp = std::exp(terms[k] - lse);
    if (resp == 0.0) continue;
    for (std::size_t i = 0; i < dim(); ++i) {
      const double var = (1.0 - beta) * variances_[k][i] + beta;
      g[i] += resp * (keep * means_[k][i] - x[i]) / var;
    }
  }
  return g;
}

Vec GaussianMixture::sample(SeededRng& rng) const {
  const std::size_t k = rng.categorical(weights_.span());
  Vec x(dim());
  for (std::size_t i = 0; i < dim(); ++i) {
    x[i] = means_[k][i] + std::sqrt(variances_[k][i]) * rng.normal();
  }
  return x;
}

Vec GmmScoreModel::score(std::span<const double> x, int t) const {
  return mixture_.score(x, schedule_.eval(t).beta);
}

Vec gmm_score(const GaussianMixture& mixture, const NoiseSchedule& schedule,
              std::span<const double> x, int t) {
  return mixture.score(x, schedule.eval(t).beta);
}

DenoiserMlp::DenoiserMlp(std::size_t dim, std::vector<int> sizes,
                         NoiseSchedule schedule)
    : dim_(dim), sizes_(std::move(sizes)), schedule_(schedule) {
  build_layers();
}

DenoiserMlp::DenoiserMlp(std::size_t dim, std::vector<int> hidden,
                         NoiseSchedule schedule, std::uint64_t init_seed)
    : dim_(dim), schedule_(schedule) {
  if (dim == 0) throw std::invalid_argument("denoiser: zero dimension");
  sizes_.push_back(static_cast<int>(dim) + 1);
  for (int h : hidden) {
    if (h < 1) throw std::invalid_argument("denoiser: hidden width must be >= 1");
    sizes_.push_back(h);
  }
  sizes_.push_back(static_cast<int>(dim));
  build_layers();
  SeededRng rng(init_seed);
  for (const auto& layer : layers_) {
    // Glorot-uniform weights, zero biases.
    const double bound = std::sqrt(6.0 / (layer.in + layer.out));
    for (int i = 0; i < layer.in * layer.out; ++i) {
      params_[layer.weight_offset + i] = (2.0 * rng.uniform() - 1.0) * bound;
    }
  }
}

void DenoiserMlp::build_layers() {
  if (sizes_.size() < 2) throw std::invalid_argument("denoiser: need >= 2 layers");
  std::size_t offset = 0;
  layers_.clear();
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    Layer layer{sizes_[l], sizes_[l + 1], offset, 0};
    offset += static_cast<std::size_t>(layer.in) * layer.out;
    layer.bias_offset = offset;
    offset += layer.out;
    layers_.push_back(layer);
  }
  params_.assign(offset, 0.0);
}

Vec DenoiserMlp::forward(std::span<const double> input,
                         std::vector<Vec>* activations) const {
  Vec a(input.begin(), input.end());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    if (activations) activations->push_back(a);
    Vec z(layer.out);
    for (int o = 0; o < layer.out; ++o) {
      double s = params_[layer.bias_offset + o];
      const double* w = &params_[layer.weight_offset + static_cast<std::size_t>(o) * layer.in];
      for (int i = 0; i < layer.in; ++i) s += w[i] * a[i];
      z[o] = s;
    }
    if (l + 1 < layers_.size()) {
      for (double& v : z) v = std::tanh(v);
    }
    a = std::move(z);
  }
  return a;
}

Vec DenoiserMlp::predict_noise(std::span<const double> x, double beta) const {
  if (x.size() != dim_) throw std::invalid_argument("denoiser: dimension mismatch");
  Vec input(x.begin(), x.end());
  input.push_back(beta);
  return forward(input, nullptr);
}

Vec DenoiserMlp::score(std::span<const double> x, int t) const {
  const double beta = schedule_.eval(t).beta;
  Vec eps = predict_noise(x, beta);
  const double inv = -1.0 / std::sqrt(beta);
  for (double& v : eps) v *= inv;
  return eps;
}

double DenoiserMlp::loss(std::span<const NoisyExample> batch,
                         std::span<double> grad) const {
  if (batch.empty()) throw std::invalid_argument("denoiser: empty batch");
  const bool want_grad = !grad.empty();
  if (want_grad) {
    if (grad.size() != params_.size()) {
      throw std::invalid_argument("denoiser: gradient size mismatch");
    }
    std::fill(grad.begin(), grad.end(), 0.0);
  }
  const double scale = 1.0 / (static_cast<double>(batch.size()) * dim_);
  double total = 0.0;
  std::vector<Vec> acts;
  for (const auto& ex : batch) {
    Vec input(ex.noisy.begin(), ex.noisy.end());
    input.push_back(ex.beta);
    acts.clear();
    const Vec out = forward(input, want_grad ? &acts : nullptr);
    Vec delta(dim_);
    for (std::size_t i = 0; i < dim_; ++i) {
      const double r = out[i] - ex.noise[i];
      total += r * r;
      delta[i] = 2.0 * r * scale;
    }
    if (!want_grad) continue;
    // Backpropagate; delta holds dL/dz for the current layer's pre-activation.
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const Layer& layer = layers_[l];
      const Vec& a = acts[l];
      Vec prev(layer.in, 0.0);
      for (int o = 0; o < layer.out; ++o) {
        const double d = delta[o];
        grad[layer.bias_offset + o] += d;
        const std::size_t row = layer.weight_offset + static_cast<std::size_t>(o) * layer.in;
        for (int i = 0; i < layer.in; ++i) {
          grad[row + i] += d * a[i];
          prev[i] += d * params_[row + i];
        }
      }
      if (l > 0) {
        // a = tanh(z_prev), so dz_prev = prev * (1 - a^2).
        for (int i = 0; i < layer.in; ++i) prev[i] *= 1.0 - a[i] * a[i];
      }
      delta = std::move(prev);
    }
  }
  return total * scale;
}

namespace {

constexpr const char* kCheckpointMagic = "nsd-checkpoint";
constexpr int kCheckpointVersion = 1;

void write_tensor(std::ostream& out, const std::string& name,
                  const std::vector<std::size_t>& shape,
                  std::span<const double> values) {
  out << name << ' ' << shape.size();
  for (auto d : shape) out << ' ' << d;
  char buf[32];
  for (double v : values) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out << ' ' << buf;
  }
  out << '\n';
}

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

}  // namespace

void DenoiserMlp::save(std::ostream& out) const {
  out << kCheckpointMagic << ' ' << kCheckpointVersion << " denoiser_mlp\n";
  const double kind = schedule_.kind() == ScheduleKind::kLinear ? 0.0 : 1.0;
  const std::vector<double> sched = {kind, static_cast<double>(schedule_.steps()),
                                     schedule_.beta_max(), schedule_.gamma_max(),
                                     schedule_.gamma_power()};
  write_tensor(out, "schedule", {sched.size()}, sched);
  std::vector<double> sizes(sizes_.begin(), sizes_.end());
  write_tensor(out, "layer_sizes", {sizes.size()}, sizes);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    const auto base = "layer" + std::to_string(l);
    write_tensor(out, base + ".weight",
                 {static_cast<std::size_t>(layer.out), static_cast<std::size_t>(layer.in)},
                 std::span<const double>(params_).subspan(
                     layer.weight_offset, static_cast<std::size_t>(layer.in) * layer.out));
    write_tensor(out, base + ".bias", {static_cast<std::size_t>(layer.out)},
                 std::span<const double>(params_).subspan(layer.bias_offset, layer.out));
  }
}

DenoiserMlp DenoiserMlp::load(std::istream& in) {
  std::string magic, kind_name;
  int version = 0;
  in >> magic >> version >> kind_name;
  if (magic != kCheckpointMagic) throw std::runtime_error("checkpoint: bad header");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  if (kind_name != "denoiser_mlp") {
    throw std::runtime_error("checkpoint: unexpected model kind " + kind_name);
  }
  std::map<std::string, Tensor> tensors;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    std::size_t rank = 0;
    ls >> name >> rank;
    Tensor t;
    std::size_t count = 1;
    for (std::size_t r = 0; r < rank; ++r) {
      std::size_t d = 0;
      ls >> d;
      t.shape.push_back(d);
      count *= d;
    }
    t.values.resize(count);
    for (auto& v : t.values) {
      std::string tok;
      if (!(ls >> tok)) throw std::runtime_error("checkpoint: short tensor " + name);
      v = std::stod(tok);
    }
    tensors[name] = std::move(t);
  }
  const auto need = [&](const std::string& name) -> const Tensor& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint: missing " + name);
    return it->second;
  };
  const auto& sched = need("schedule").values;
  if (sched.size() != 5) throw std::runtime_error("checkpoint: bad schedule");
  NoiseSchedule schedule(sched[0] == 0.0 ? ScheduleKind::kLinear : ScheduleKind::kCosine,
                         static_cast<int>(sched[1]), sched[2], sched[3], sched[4]);
  std::vector<int> sizes;
  for (double v : need("layer_sizes").values) sizes.push_back(static_cast<int>(v));
  if (sizes.size() < 2) throw std::runtime_error("checkpoint: bad layer sizes");
  DenoiserMlp model(static_cast<std::size_t>(sizes.back()), sizes, schedule);
  for (std::size_t l = 0; l < model.layers_.size(); ++l) {
    const Layer& layer = model.layers_[l];
    const auto base = "layer" + std::to_string(l);
    const auto& w = need(base + ".weight");
    const auto& b = need(base + ".bias");
    if (w.values.size() != static_cast<std::size_t>(layer.in) * layer.out ||
        b.values.size() != static_cast<std::size_t>(layer.out)) {
      throw std::runtime_error("checkpoint: shape mismatch in " + base);
    }
    std::copy(w.values.begin(), w.values.end(), model.params_.begin() + layer.weight_offset);
    std::copy(b.values.begin(), b.values.end(), model.params_.begin() + layer.bias_offset);
  }
  return model;
}

DenoiserMlp train_denoiser(std::span<const Vec> data,
                           const NoiseSchedule& schedule,
                           const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  if (!(cfg.learning_rate > 0.0)) {
    throw std::invalid_argument("train_denoiser: learning rate must be > 0");
  }
  if (cfg.epochs < 1) throw std::invalid_argument("train_denoiser: epochs must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("train_denoiser: batch size must be >= 1");
  const std::size_t d = data.front().size();
  for (const auto& x : data) {
    if (x.size() != d) throw std::invalid_argument("train_denoiser: ragged dataset");
  }

  SeededRng rng(cfg.seed);
  DenoiserMlp model(d, cfg.hidden, schedule, rng.fork(0).next_u64());
  auto params = model.params();
  Vec grad(params.size()), m(params.size(), 0.0), v(params.size(), 0.0);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  long step = 0;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> history;
  std::vector<NoisyExample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with the portable generator.
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t b = start; b < stop; ++b) {
        const Vec& x0 = data[order[b]];
        const int t = 1 + static_cast<int>(rng.below(schedule.steps()));
        const double beta = schedule.beta(t);
        NoisyExample ex{Vec(d), beta, rng.normal_vec(d)};
        const double keep = std::sqrt(1.0 - beta), spread = std::sqrt(beta);
        for (std::size_t i = 0; i < d; ++i) ex.noisy[i] = keep * x0[i] + spread * ex.noise[i];
        batch.push_back(std::move(ex));
      }
      const double l = model.loss(batch, grad);
      if (!std::isfinite(l) || !all_finite(grad)) {
        throw TrainingDiverged("train_denoiser: non-finite loss at epoch " +
                               std::to_string(epoch));
      }
      epoch_loss += l * static_cast<double>(batch.size());
      seen += batch.size();
      ++step;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
        params[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
      }
    }
    history.push_back(epoch_loss / static_cast<double>(seen));
  }
  model.set_loss_history(std::move(history));
  return model;
}

}  // namespace nsd
