#ifndef MABN_NORM_HPP_
#define MABN_NORM_HPP_

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mabn/stats.hpp"
#include "mabn/tensor.hpp"

namespace mabn {

enum class NormForm { vanilla, modified };
enum class StatSource { batch, ema, sma };

inline const char* to_string(NormForm f) {
  return f == NormForm::vanilla ? "vanilla" : "modified";
}
inline const char* to_string(StatSource s) {
  switch (s) {
    case StatSource::batch: return "batch";
    case StatSource::ema: return "ema";
    default: return "sma";
  }
}

// One value for the whole ablation matrix. fp_source selects the forward
// statistics: batch = plain batch statistics, ema = batch statistics with a
// renormalizing correction towards the EMA (the BRN mechanism), sma = moving
// window statistics with the correction towards the EMA (the MABN mechanism).
// bp_source selects where g/psi come from in backward.
struct NormVariantConfig {
  NormForm form = NormForm::vanilla;
  StatSource fp_source = StatSource::batch;
  StatSource bp_source = StatSource::batch;
  double momentum = 0.9;
  std::size_t sma_capacity = 16;
  double clip_lambda = 5.0;   // r clipped to [1/lambda, lambda]
  double brn_d_max = 2.5;     // d clipped to [-d_max, d_max]
  std::size_t warmup_iters = 100;
  double epsilon = 1e-5;
  bool affine = true;

  static NormVariantConfig bn() {
    NormVariantConfig c;
    c.form = NormForm::vanilla;
    c.fp_source = StatSource::batch;
    c.bp_source = StatSource::batch;
    c.momentum = 0.9;
    c.warmup_iters = 0;
    return c;
  }

  static NormVariantConfig brn() {
    NormVariantConfig c;
    c.form = NormForm::vanilla;
    c.fp_source = StatSource::ema;
    c.bp_source = StatSource::batch;
    c.momentum = 0.98;
    return c;
  }

  static NormVariantConfig mabn() {
    NormVariantConfig c;
    c.form = NormForm::modified;
    c.fp_source = StatSource::sma;
    c.bp_source = StatSource::sma;
    c.momentum = 0.98;
    c.sma_capacity = 16;
    return c;
  }

  void validate() const {
    if (!(momentum > 0.0 && momentum < 1.0))
      throw std::invalid_argument("norm config: momentum must be in (0,1)");
    if (clip_lambda < 1.0)
      throw std::invalid_argument("norm config: clip bound must be >= 1");
    if (brn_d_max < 0.0)
      throw std::invalid_argument("norm config: d_max must be >= 0");
    if (epsilon < 0.0)
      throw std::invalid_argument("norm config: epsilon must be >= 0");
    if ((fp_source == StatSource::sma || bp_source == StatSource::sma) &&
        sma_capacity < 1)
      throw std::invalid_argument("norm config: sma sources require m >= 1");
  }

  // Table-reported-divergent combination; constructible, but flagged.
  bool paper_reported_divergent() const {
    return form == NormForm::vanilla && bp_source == StatSource::sma;
  }
};

// Per-channel linear map for inference: z = scale * x + shift.
struct InferenceTransform {
  std::vector<double> scale;
  std::vector<double> shift;
};

// A normalization layer covering BN, BRN, the chi^2-modified form and MABN,
// depending on the variant config. Single-writer during training.
template <typename T>
class NormLayer {
 public:
  NormLayer() = default;
  NormLayer(std::size_t channels, NormVariantConfig config)
      : cfg_(config),
        channels_(channels),
        gamma(channels, T(1)),
        beta(channels, T(0)),
        mu_ema_(channels, T(0), static_cast<T>(config.momentum)),
        var_ema_(channels, T(1), static_cast<T>(config.momentum)),
        chi2_ema_(channels, T(1), static_cast<T>(config.momentum)),
        mu_sma_(channels, std::max<std::size_t>(1, config.sma_capacity)),
        var_sma_(channels, std::max<std::size_t>(1, config.sma_capacity)),
        chi2_sma_(channels, std::max<std::size_t>(1, config.sma_capacity)),
        g_sma_(channels, std::max<std::size_t>(1, config.sma_capacity)),
        psi_sma_(channels, std::max<std::size_t>(1, config.sma_capacity)),
        g_ema_(channels, T(0), static_cast<T>(config.momentum)),
        psi_ema_(channels, T(0), static_cast<T>(config.momentum)) {
    cfg_.validate();
  }

  const NormVariantConfig& config() const { return cfg_; }
  std::size_t channels() const { return channels_; }
  std::size_t iteration() const { return iter_; }

  bool in_warmup() const { return iter_ < cfg_.warmup_iters; }

  // Training-mode forward. Updates moving statistics, caches what backward
  // needs, returns Z.
  Tensor<T> forward(const Tensor<T>& x) {
    if (channel_count(x) != channels_)
      throw std::invalid_argument("norm: input channels " +
                                  std::to_string(channel_count(x)) + " vs " +
                                  std::to_string(channels_));
    const bool warm = in_warmup();
    ++iter_;
    const T eps = static_cast<T>(cfg_.epsilon);

    // Batch statistics of this iteration, always computed and pushed.
    batch_moments(x, mu_b_, var_b_);
    chi2_b_ = chi_squared(x);
    mu_ema_.update(mu_b_);
    var_ema_.update(var_b_);
    chi2_ema_.update(chi2_b_);
    mu_sma_.push(mu_b_);
    var_sma_.push(var_b_);
    chi2_sma_.push(chi2_b_);

    const StatSource fp = warm ? StatSource::batch : cfg_.fp_source;
    r_.assign(channels_, T(1));
    d_.assign(channels_, T(0));
    denom_.assign(channels_, T(0));
    center_.assign(channels_, T(0));

    if (cfg_.form == NormForm::vanilla) {
      switch (fp) {
        case StatSource::batch:
        case StatSource::ema: {
          // Y always uses batch statistics; the ema source adds the
          // renormalizing (r, d) correction against the EMA.
          for (std::size_t c = 0; c < channels_; ++c) {
            center_[c] = mu_b_[c];
            denom_[c] = std::sqrt(var_b_[c] + eps);
            check_denom(denom_[c]);
          }
          if (fp == StatSource::ema) set_vanilla_rd(mu_b_, var_b_, eps);
          break;
        }
        case StatSource::sma: {
          const std::vector<T> mu_bar = mu_sma_.mean();
          const std::vector<T> var_bar = var_sma_.mean();
          for (std::size_t c = 0; c < channels_; ++c) {
            center_[c] = mu_bar[c];
            denom_[c] = std::sqrt(std::max(var_bar[c], T(0)) + eps);
            check_denom(denom_[c]);
          }
          set_vanilla_rd(mu_bar, var_bar, eps);
          break;
        }
      }
    } else {
      switch (fp) {
        case StatSource::batch:
        case StatSource::ema: {
          for (std::size_t c = 0; c < channels_; ++c) {
            denom_[c] = std::sqrt(chi2_b_[c] + eps);
            check_denom(denom_[c]);
          }
          if (fp == StatSource::ema) set_modified_r(chi2_b_, eps);
          break;
        }
        case StatSource::sma: {
          const std::vector<T> chi2_bar = chi2_sma_.mean();
          for (std::size_t c = 0; c < channels_; ++c) {
            denom_[c] = std::sqrt(chi2_bar[c] + eps);
            check_denom(denom_[c]);
          }
          set_modified_r(chi2_bar, eps);
          break;
        }
      }
    }

    y_ = Tensor<T>(x.shape());
    Tensor<T> z(x.shape());
    for (std::size_t c = 0; c < channels_; ++c) {
      const T inv = T(1) / denom_[c];
      const T ctr = center_[c];
      const T rc = r_[c], dc = d_[c];
      const T gc = cfg_.affine ? gamma[c] : T(1);
      const T bc = cfg_.affine ? beta[c] : T(0);
      for_each_in_channel(x, c, [&](std::size_t i) {
        const T yv = (x[i] - ctr) * inv;
        y_[i] = yv;
        z[i] = (rc * yv + dc) * gc + bc;
      });
    }
    warm_fwd_ = warm;
    has_cache_ = true;
    return z;
  }

  // Training-mode backward. Returns dL/dX; per-channel dgamma/dbeta are
  // stored on the layer. r, d and all moving statistics are constants here.
  Tensor<T> backward(const Tensor<T>& dz) {
    if (!has_cache_) throw std::runtime_error("norm: backward before forward");
    if (!dz.same_shape(y_))
      throw std::invalid_argument("norm: gradient shape mismatch");
    has_cache_ = false;

    dgamma.assign(channels_, T(0));
    dbeta.assign(channels_, T(0));
    Tensor<T> dy(dz.shape());
    for (std::size_t c = 0; c < channels_; ++c) {
      const T gc = cfg_.affine ? gamma[c] : T(1);
      const T rc = r_[c], dc = d_[c];
      T dg = T(0), db = T(0);
      for_each_in_channel(dz, c, [&](std::size_t i) {
        const T g = dz[i];
        dg += (rc * y_[i] + dc) * g;  // gradient w.r.t. gamma sees y-hat
        db += g;
        dy[i] = rc * gc * g;  // dL/dY = r * gamma * dL/dZ
      });
      dgamma[c] = dg;
      dbeta[c] = db;
    }

    // Batch statistics of the incoming (r-scaled) gradient.
    grad_stats(y_, dy, g_b_, psi_b_);
    g_sma_.push(g_b_);
    psi_sma_.push(psi_b_);
    g_ema_.update(g_b_);
    psi_ema_.update(psi_b_);

    const StatSource bp = warm_fwd_ ? StatSource::batch : cfg_.bp_source;
    const std::vector<T>* g_use = &g_b_;
    const std::vector<T>* psi_use = &psi_b_;
    std::vector<T> g_m, psi_m;
    if (bp == StatSource::sma) {
      g_m = g_sma_.mean();
      psi_m = psi_sma_.mean();
      g_use = &g_m;
      psi_use = &psi_m;
    } else if (bp == StatSource::ema) {
      g_use = &g_ema_.value();
      psi_use = &psi_ema_.value();
    }

    Tensor<T> dx(dz.shape());
    for (std::size_t c = 0; c < channels_; ++c) {
      const T inv = T(1) / denom_[c];
      const T gv = (*g_use)[c];
      const T pv = (*psi_use)[c];
      if (cfg_.form == NormForm::vanilla) {
        for_each_in_channel(dz, c, [&](std::size_t i) {
          dx[i] = inv * (dy[i] - gv - y_[i] * pv);
        });
      } else {
        for_each_in_channel(dz, c, [&](std::size_t i) {
          dx[i] = inv * (dy[i] - y_[i] * pv);
        });
      }
    }
    return dx;
  }

  // Inference uses EMA values only.
  InferenceTransform finalize_for_inference() const {
    InferenceTransform t;
    t.scale.resize(channels_);
    t.shift.resize(channels_);
    for (std::size_t c = 0; c < channels_; ++c) {
      const double gc = cfg_.affine ? static_cast<double>(gamma[c]) : 1.0;
      const double bc = cfg_.affine ? static_cast<double>(beta[c]) : 0.0;
      double denom2;
      if (cfg_.form == NormForm::vanilla) {
        denom2 = static_cast<double>(var_ema_.value()[c]) + cfg_.epsilon;
      } else {
        denom2 = static_cast<double>(chi2_ema_.value()[c]) + cfg_.epsilon;
      }
      if (!(denom2 > 0.0) || !std::isfinite(denom2))
        throw std::runtime_error("norm: nonpositive inference denominator in channel " +
                                 std::to_string(c));
      const double s = gc / std::sqrt(denom2);
      t.scale[c] = s;
      if (cfg_.form == NormForm::vanilla) {
        t.shift[c] = bc - s * static_cast<double>(mu_ema_.value()[c]);
      } else {
        t.shift[c] = bc;
      }
    }
    return t;
  }

  Tensor<T> infer(const Tensor<T>& x) const {
    const InferenceTransform t = finalize_for_inference();
    Tensor<T> z(x.shape());
    for (std::size_t c = 0; c < channels_; ++c) {
      const T s = static_cast<T>(t.scale[c]);
      const T b = static_cast<T>(t.shift[c]);
      for_each_in_channel(x, c, [&](std::size_t i) { z[i] = s * x[i] + b; });
    }
    return z;
  }

  // Last-iteration batch statistics, for trace recording.
  const std::vector<T>& last_mu() const { return mu_b_; }
  const std::vector<T>& last_var() const { return var_b_; }
  const std::vector<T>& last_chi2() const { return chi2_b_; }
  const std::vector<T>& last_g() const { return g_b_; }
  const std::vector<T>& last_psi() const { return psi_b_; }
  const std::vector<T>& last_r() const { return r_; }

  EmaState<T>& mu_ema() { return mu_ema_; }
  EmaState<T>& var_ema() { return var_ema_; }
  EmaState<T>& chi2_ema() { return chi2_ema_; }
  const EmaState<T>& mu_ema() const { return mu_ema_; }
  const EmaState<T>& var_ema() const { return var_ema_; }
  const EmaState<T>& chi2_ema() const { return chi2_ema_; }
  SmaBuffer<T>& chi2_sma() { return chi2_sma_; }
  SmaBuffer<T>& g_sma() { return g_sma_; }
  SmaBuffer<T>& psi_sma() { return psi_sma_; }
  SmaBuffer<T>& mu_sma() { return mu_sma_; }
  SmaBuffer<T>& var_sma() { return var_sma_; }
  EmaState<T>& g_ema() { return g_ema_; }
  EmaState<T>& psi_ema() { return psi_ema_; }
  void set_iteration(std::size_t it) { iter_ = it; }

  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> dgamma;
  std::vector<T> dbeta;

 private:
  static void check_denom(T denom) {
    if (!(denom > T(0)))
      throw std::runtime_error("norm: zero normalization denominator");
  }

  T clip_r(T ratio) const {
    const T lo = T(1) / static_cast<T>(cfg_.clip_lambda);
    const T hi = static_cast<T>(cfg_.clip_lambda);
    return std::min(hi, std::max(lo, ratio));
  }

  void set_vanilla_rd(const std::vector<T>& mu_src,
                      const std::vector<T>& var_src, T eps) {
    for (std::size_t c = 0; c < channels_; ++c) {
      const T sig_hat = std::sqrt(var_ema_.value()[c] + eps);
      check_denom(sig_hat);
      const T sig_src = std::sqrt(std::max(var_src[c], T(0)) + eps);
      r_[c] = clip_r(sig_src / sig_hat);
      const T dm = static_cast<T>(cfg_.brn_d_max);
      const T d_raw = (mu_src[c] - mu_ema_.value()[c]) / sig_hat;
      d_[c] = std::min(dm, std::max(-dm, d_raw));
    }
  }

  void set_modified_r(const std::vector<T>& chi2_src, T eps) {
    for (std::size_t c = 0; c < channels_; ++c) {
      const T chi_hat = std::sqrt(chi2_ema_.value()[c] + eps);
      check_denom(chi_hat);
      const T chi_src = std::sqrt(chi2_src[c] + eps);
      r_[c] = clip_r(chi_src / chi_hat);
    }
  }

  NormVariantConfig cfg_;
  std::size_t channels_ = 0;
  std::size_t iter_ = 0;

  EmaState<T> mu_ema_, var_ema_, chi2_ema_;
  SmaBuffer<T> mu_sma_, var_sma_, chi2_sma_, g_sma_, psi_sma_;
  EmaState<T> g_ema_, psi_ema_;

  // Forward cache.
  Tensor<T> y_;
  std::vector<T> mu_b_, var_b_, chi2_b_, g_b_, psi_b_;
  std::vector<T> r_, d_, denom_, center_;
  bool warm_fwd_ = false;
  bool has_cache_ = false;
};

using NormLayerF = NormLayer<float>;
using NormLayerD = NormLayer<double>;

}  // namespace mabn

#endif  // MABN_NORM_HPP_
