#ifndef MABN_THEOREM_HPP_
#define MABN_THEOREM_HPP_

#include <cstdint>
#include <string>

namespace mabn {

// Monte-Carlo setup for the moving-average variance checks and the
// vanilla-vs-modified gradient variance gap.
struct McConfig {
  std::size_t trials = 10000;
  std::size_t horizon = 500;   // t
  double alpha = 0.98;         // EMA momentum
  std::size_t window = 16;     // SMA window m
  double drift = 0.0;          // random-walk step of the source mean
  double truncation = 10.0;    // source truncated at +-C standard deviations
  std::size_t batch = 2;       // B for the variance-gap check
  double tolerance = 0.10;
  std::uint64_t seed = 1;

  void validate() const;
};

struct TheoremReport {
  std::string theorem;
  double empirical = 0.0;
  double predicted = 0.0;
  double rel_dev = 0.0;
  bool pass = false;
};

// Var(E_t) = (1 - alpha^{2t}) (1 - alpha) / (1 + alpha) * Var(xi)
// for an iid truncated-normal source.
TheoremReport verify_ema_variance(const McConfig& cfg);

// Var(S_t) = Var(xi) / m for an iid or slowly drifting source.
TheoremReport verify_sma_variance(const McConfig& cfg);

// Gradient-variance gap between the vanilla and modified backward forms:
// Var_vanilla - Var_modified >= Var[g_B] / sigma_hat^2 (up to tolerance),
// under fixed sigma_hat = chi_hat, iid per-sample gradients and centered y.
// `empirical` is the measured gap, `predicted` the measured Var[g_B].
TheoremReport verify_variance_gap(const McConfig& cfg);

}  // namespace mabn

#endif  // MABN_THEOREM_HPP_
