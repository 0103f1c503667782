#include "mabn/theorem.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

namespace mabn {

void McConfig::validate() const {
  if (trials < 1000)
    throw std::invalid_argument("mc config: need >= 1000 trials for variance estimates");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("mc config: alpha must be in (0,1)");
  if (window < 1) throw std::invalid_argument("mc config: window must be >= 1");
  if (horizon < window)
    throw std::invalid_argument("mc config: horizon shorter than window");
  if (batch < 2) throw std::invalid_argument("mc config: batch must be >= 2");
  if (truncation <= 0.0)
    throw std::invalid_argument("mc config: truncation must be positive");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Standard normal truncated at +-C, by rejection.
class TruncatedNormal {
 public:
  explicit TruncatedNormal(double c) : c_(c) {}
  template <typename Rng>
  double operator()(Rng& rng) {
    for (;;) {
      const double v = dist_(rng);
      if (std::abs(v) < c_) return v;
    }
  }

  // Analytic variance of the truncated distribution.
  double variance() const {
    const double phi = std::exp(-0.5 * c_ * c_) / std::sqrt(2.0 * M_PI);
    const double mass = std::erf(c_ / std::sqrt(2.0));
    return 1.0 - 2.0 * c_ * phi / mass;
  }

 private:
  double c_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

struct RunningVar {
  double mean = 0.0, m2 = 0.0;
  std::size_t n = 0;
  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
};

}  // namespace

TheoremReport verify_ema_variance(const McConfig& cfg) {
  cfg.validate();
  TruncatedNormal src(cfg.truncation);
  RunningVar acc;
  for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
    std::mt19937_64 rng(splitmix64(cfg.seed + trial));
    double e = 0.0;
    for (std::size_t t = 0; t < cfg.horizon; ++t)
      e = cfg.alpha * e + (1.0 - cfg.alpha) * src(rng);
    acc.add(e);
  }
  const double t2 = 2.0 * static_cast<double>(cfg.horizon);
  const double predicted = (1.0 - std::pow(cfg.alpha, t2)) *
                           (1.0 - cfg.alpha) / (1.0 + cfg.alpha) *
                           src.variance();
  TheoremReport rep;
  rep.theorem = "ema_variance";
  rep.empirical = acc.variance();
  rep.predicted = predicted;
  rep.rel_dev = std::abs(rep.empirical - rep.predicted) / rep.predicted;
  rep.pass = rep.rel_dev < cfg.tolerance;
  return rep;
}

TheoremReport verify_sma_variance(const McConfig& cfg) {
  cfg.validate();
  TruncatedNormal src(cfg.truncation);
  RunningVar acc;
  const std::size_t m = cfg.window;
  for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
    std::mt19937_64 rng(splitmix64(cfg.seed + 0x5151000000ull + trial));
    std::normal_distribution<double> walk(0.0, 1.0);
    double mu = 0.0;
    std::vector<double> ring(m, 0.0);
    for (std::size_t t = 0; t < cfg.horizon; ++t) {
      mu += cfg.drift * walk(rng);  // drifting source mean
      ring[t % m] = mu + src(rng);
    }
    double s = 0.0;
    for (double v : ring) s += v;
    acc.add(s / static_cast<double>(m));
  }
  TheoremReport rep;
  rep.theorem = "sma_variance";
  rep.empirical = acc.variance();
  rep.predicted = src.variance() / static_cast<double>(m);
  rep.rel_dev = std::abs(rep.empirical - rep.predicted) / rep.predicted;
  rep.pass = rep.rel_dev < cfg.tolerance;
  return rep;
}

TheoremReport verify_variance_gap(const McConfig& cfg) {
  cfg.validate();
  TruncatedNormal src(cfg.truncation);
  // sigma_hat = chi_hat = 1, fixed (assumption 1); y centered (assumption 3);
  // per-sample incoming gradients iid (assumption 2).
  const double sigma_hat = 1.0, chi_hat = 1.0;
  RunningVar var_vanilla, var_modified, var_g;
  const std::size_t B = cfg.batch;
  for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
    std::mt19937_64 rng(splitmix64(cfg.seed + 0xA0A0000000ull + trial));
    double g = 0.0, psi = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const double yb = src(rng);
      const double dyb = src(rng);
      g += dyb;
      psi += yb * dyb;
    }
    g /= static_cast<double>(B);
    psi /= static_cast<double>(B);
    var_g.add(g);
    // Probe sample drawn independently of the batch, so the sample-batch
    // covariances of assumption 2 vanish exactly. Both forms are evaluated
    // on the same probe to keep the gap estimate low-noise.
    const double yp = src(rng);
    const double dyp = src(rng);
    var_vanilla.add((dyp - g - yp * psi) / sigma_hat);
    var_modified.add((dyp - yp * psi) / chi_hat);
  }
  TheoremReport rep;
  rep.theorem = "variance_gap";
  rep.empirical = var_vanilla.variance() - var_modified.variance();
  rep.predicted = var_g.variance() / (sigma_hat * sigma_hat);
  rep.rel_dev = std::abs(rep.empirical - rep.predicted) / rep.predicted;
  rep.pass = rep.empirical >= (1.0 - cfg.tolerance / 2.0) * rep.predicted;
  return rep;
}

}  // namespace mabn
