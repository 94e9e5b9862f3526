#include <cmath>
#include <sstream>

#include "doctest.h"
#include "nsd/models.hpp"
#include "nsd/schedule.hpp"

namespace {

using nsd::GaussianMixture;
using nsd::NoiseSchedule;
using nsd::ScheduleKind;
using nsd::SeededRng;
using nsd::Vec;

// Density of the smoothed mixture written out directly, for finite differences.
double smoothed_density(const GaussianMixture& g, const Vec& x, double beta) {
  double total = 0.0;
  for (std::size_t k = 0; k < g.components(); ++k) {
    double logp = std::log(g.weights()[k]);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double m = std::sqrt(1.0 - beta) * g.means()[k][j];
      const double v = (1.0 - beta) * g.variances()[k][j] + beta;
      logp += -0.5 * std::log(2.0 * M_PI * v) - 0.5 * (x[j] - m) * (x[j] - m) / v;
    }
    total += std::exp(logp);
  }
  return total;
}

}  // namespace

TEST_CASE("linear schedule values") {
  const NoiseSchedule s = NoiseSchedule::linear(10);
  CHECK(s.beta(0) == 0.0);
  CHECK(s.beta(10) == doctest::Approx(0.999));
  CHECK(s.beta(5) == doctest::Approx(0.4995));
  CHECK(s.gamma(10) == doctest::Approx(0.1));
  CHECK_THROWS_AS(s.eval(0), std::out_of_range);
  CHECK_THROWS_AS(s.eval(11), std::out_of_range);
}

TEST_CASE("schedules are monotone and step sizes shrink toward t = 0") {
  for (auto kind : {ScheduleKind::kLinear, ScheduleKind::kCosine}) {
    for (double power : {1.0, 3.0}) {
      const NoiseSchedule s(kind, 100, 0.999, 0.1, power);
      for (int t = 1; t <= 100; ++t) {
        CHECK(s.beta(t) > s.beta(t - 1));
        CHECK(s.beta(t) <= 0.999 + 1e-15);
        if (t > 1) CHECK(s.gamma(t) > s.gamma(t - 1));
        CHECK(s.gamma(t) > 0.0);
      }
    }
  }
  CHECK(nsd::schedule_kind_from_string("cosine") == ScheduleKind::kCosine);
  CHECK_THROWS(nsd::schedule_kind_from_string("sigmoid"));
}

TEST_CASE("gmm score for a standard normal is -x") {
  const auto g = GaussianMixture::isotropic({{0.0, 0.0}}, 1.0);
  const NoiseSchedule s = NoiseSchedule::linear(50);
  SeededRng rng(2);
  for (int i = 0; i < 20; ++i) {
    const Vec x = rng.normal_vec(2);
    const int t = 1 + static_cast<int>(rng.below(50));
    const Vec sc = nsd::gmm_score(g, s, x, t);
    CHECK(sc[0] == doctest::Approx(-x[0]).epsilon(1e-12));
    CHECK(sc[1] == doctest::Approx(-x[1]).epsilon(1e-12));
  }
}

TEST_CASE("gmm score matches finite differences of the smoothed log density") {
  const GaussianMixture g(nsd::SimplexRow({0.3, 0.7}), {{-2.0, 1.0}, {1.5, -0.5}},
                          {{0.2, 0.5}, {0.4, 0.1}});
  SeededRng rng(9);
  const double h = 1e-5;
  for (double beta : {0.01, 0.3, 0.9}) {
    for (int trial = 0; trial < 20; ++trial) {
      Vec x = rng.normal_vec(2);
      for (double& v : x) v *= 2.0;
      const Vec sc = g.score(x, beta);
      CHECK(g.log_density(x, beta) == doctest::Approx(std::log(smoothed_density(g, x, beta))).epsilon(1e-10));
      for (std::size_t j = 0; j < 2; ++j) {
        Vec xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        const double fd = (std::log(smoothed_density(g, xp, beta)) -
                           std::log(smoothed_density(g, xm, beta))) / (2.0 * h);
        CHECK(sc[j] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
      }
    }
  }
}

TEST_CASE("gmm sampling matches the mixture moments") {
  const auto g = GaussianMixture::isotropic({{-3.0}, {3.0}}, 0.25);
  SeededRng rng(4);
  double mean = 0.0, sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = g.sample(rng)[0];
    mean += v;
    sq += v * v;
  }
  CHECK(std::abs(mean / n) < 0.05);
  CHECK(sq / n == doctest::Approx(9.25).epsilon(0.02));
}

TEST_CASE("denoiser loss gradient matches finite differences") {
  const NoiseSchedule s = NoiseSchedule::linear(20);
  nsd::DenoiserMlp net(3, {8, 5}, s, 17);
  SeededRng rng(6);
  std::vector<nsd::NoisyExample> batch;
  for (int i = 0; i < 4; ++i) {
    batch.push_back({rng.normal_vec(3), 0.1 + 0.2 * i, rng.normal_vec(3)});
  }
  Vec grad(net.params().size());
  net.loss(batch, grad);
  const double h = 1e-6;
  for (std::size_t p = 0; p < grad.size(); p += 3) {
    const double saved = net.params()[p];
    net.params()[p] = saved + h;
    const double up = net.loss(batch, {});
    net.params()[p] = saved - h;
    const double down = net.loss(batch, {});
    net.params()[p] = saved;
    CHECK(grad[p] == doctest::Approx((up - down) / (2.0 * h)).epsilon(1e-5).scale(1e-3));
  }
}

TEST_CASE("denoiser training lowers the loss and checkpoints round-trip") {
  SeededRng rng(12);
  std::vector<Vec> data;
  for (int i = 0; i < 256; ++i) {
    Vec x = rng.normal_vec(2);
    x[0] = 0.3 * x[0] + 1.0;
    x[1] = 0.3 * x[1] - 1.0;
    data.push_back(x);
  }
  const NoiseSchedule s = NoiseSchedule::linear(50);
  nsd::TrainConfig cfg;
  cfg.epochs = 60;
  cfg.hidden = {32, 32};
  cfg.seed = 3;
  const auto net = nsd::train_denoiser(data, s, cfg);
  const auto& hist = net.loss_history();
  REQUIRE(hist.size() == 60);
  CHECK(hist.back() < hist.front());

  // The trained score at a mid noise level points toward the data mean.
  const Vec far = {-2.0, 2.0};
  const Vec sc = net.score(far, 25);
  CHECK(sc[0] > 0.0);
  CHECK(sc[1] < 0.0);

  std::stringstream buf;
  net.save(buf);
  const auto loaded = nsd::DenoiserMlp::load(buf);
  const Vec probe = {0.4, -0.7};
  for (int t : {1, 10, 50}) {
    const Vec a = net.score(probe, t);
    const Vec b = loaded.score(probe, t);
    CHECK(a[0] == b[0]);
    CHECK(a[1] == b[1]);
  }

  std::stringstream bad("nsd-checkpoint 99 denoiser_mlp\n");
  CHECK_THROWS(nsd::DenoiserMlp::load(bad));

  nsd::TrainConfig broken = cfg;
  broken.epochs = 0;
  CHECK_THROWS_AS(nsd::train_denoiser(data, s, broken), std::invalid_argument);
}
