#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mabn/gradcheck.hpp"
#include "mabn/layers.hpp"
#include "mabn/norm.hpp"
#include "mabn/stats.hpp"

using namespace mabn;

namespace {

NormVariantConfig batch_cfg(NormForm form, double eps = 0.0) {
  NormVariantConfig c;
  c.form = form;
  c.fp_source = StatSource::batch;
  c.bp_source = StatSource::batch;
  c.warmup_iters = 0;
  c.epsilon = eps;
  return c;
}

// Random NCHW input with per-channel mean ~ N(0,1) and biased std exactly 1,
// so the normalization denominators stay well conditioned for finite
// differencing even at batch 2.
TensorD conditioned_input(std::size_t B, std::size_t C, std::mt19937_64& rng) {
  TensorD x = TensorD::randn({B, C, 2, 2}, rng);
  std::normal_distribution<double> mean_dist;
  const double count = static_cast<double>(B * 4);
  for (std::size_t c = 0; c < C; ++c) {
    double m = 0.0;
    for_each_in_channel(x, c, [&](std::size_t i) { m += x[i]; });
    m /= count;
    double s2 = 0.0;
    for_each_in_channel(x, c, [&](std::size_t i) {
      s2 += (x[i] - m) * (x[i] - m);
    });
    const double s = std::sqrt(s2 / count);
    const double target_mean = mean_dist(rng);
    for_each_in_channel(
        x, c, [&](std::size_t i) { x[i] = target_mean + (x[i] - m) / s; });
  }
  return x;
}

}  // namespace

TEST_CASE("standardizing forward on [1,2,3]") {
  NormLayerD layer(1, batch_cfg(NormForm::vanilla));
  TensorD x({3, 1}, {1.0, 2.0, 3.0});
  TensorD z = layer.forward(x);
  CHECK(z[0] == doctest::Approx(-1.22474).epsilon(1e-5));
  CHECK(z[1] == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
  CHECK(z[2] == doctest::Approx(1.22474).epsilon(1e-5));
}

TEST_CASE("standardized output has zero mean and unit biased variance") {
  std::mt19937_64 rng(31);
  NormLayerD layer(3, batch_cfg(NormForm::vanilla));
  TensorD x = TensorD::randn({6, 3, 2, 2}, rng, 1.7);
  TensorD z = layer.forward(x);
  std::vector<double> mu, sigma2;
  batch_moments(z, mu, sigma2);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(std::abs(mu[c]) < 1e-12);
    CHECK(sigma2[c] == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("standardization is invariant to input affine maps") {
  std::mt19937_64 rng(32);
  TensorD x = TensorD::randn({5, 2}, rng);
  TensorD x2 = x;
  for (auto& v : x2.vec()) v = 5.0 * v + 7.0;
  NormLayerD a(2, batch_cfg(NormForm::vanilla));
  NormLayerD b(2, batch_cfg(NormForm::vanilla));
  TensorD za = a.forward(x), zb = b.forward(x2);
  for (std::size_t i = 0; i < za.numel(); ++i)
    CHECK(za[i] == doctest::Approx(zb[i]).epsilon(1e-9));
}

TEST_CASE("standardizing backward on known one-hot upstream gradient") {
  NormLayerD layer(1, batch_cfg(NormForm::vanilla));
  TensorD x({3, 1}, {1.0, 2.0, 3.0});
  layer.forward(x);
  TensorD dz({3, 1}, {1.0, 0.0, 0.0});
  TensorD dx = layer.backward(dz);
  CHECK(dx[0] == doctest::Approx(0.20412).epsilon(1e-4));
  CHECK(dx[1] == doctest::Approx(-0.40825).epsilon(1e-4));
  CHECK(dx[2] == doctest::Approx(0.20412).epsilon(1e-4));
}

TEST_CASE("standardizing backward kills mean and variance directions") {
  std::mt19937_64 rng(33);
  TensorD x = TensorD::randn({5, 1}, rng);
  {
    NormLayerD layer(1, batch_cfg(NormForm::vanilla));
    TensorD y = layer.forward(x);
    TensorD dx = layer.backward(TensorD::full(x.shape(), 1.0));
    for (std::size_t i = 0; i < dx.numel(); ++i) CHECK(std::abs(dx[i]) < 1e-12);
  }
  {
    NormLayerD layer(1, batch_cfg(NormForm::vanilla));
    TensorD y = layer.forward(x);
    TensorD dx = layer.backward(y);  // gamma=1, beta=0, so dz = y
    for (std::size_t i = 0; i < dx.numel(); ++i) CHECK(std::abs(dx[i]) < 1e-12);
  }
}

TEST_CASE("backward sum identities hold per channel") {
  std::mt19937_64 rng(34);
  for (int rep = 0; rep < 10; ++rep) {
    TensorD x = TensorD::randn({6, 3, 2, 2}, rng);
    TensorD dz = TensorD::randn({6, 3, 2, 2}, rng);
    {
      NormLayerD layer(3, batch_cfg(NormForm::vanilla));
      TensorD y = layer.forward(x);
      TensorD dx = layer.backward(dz);
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0, sy = 0.0;
        for_each_in_channel(dx, c, [&](std::size_t i) {
          s += dx[i];
          sy += y[i] * dx[i];
        });
        CHECK(std::abs(s) < 1e-10);
        CHECK(std::abs(sy) < 1e-10);
      }
    }
    {
      NormLayerD layer(3, batch_cfg(NormForm::modified));
      layer.forward(x);
      TensorD dx = layer.backward(dz);
      for (std::size_t c = 0; c < 3; ++c) {
        double sx = 0.0;
        for_each_in_channel(dx, c, [&](std::size_t i) { sx += x[i] * dx[i]; });
        CHECK(std::abs(sx) < 1e-10);
      }
    }
  }
}

TEST_CASE("second-moment form on [3,4]") {
  NormLayerD layer(1, batch_cfg(NormForm::modified));
  TensorD x({2, 1}, {3.0, 4.0});
  TensorD y = layer.forward(x);
  CHECK(y[0] == doctest::Approx(0.84853).epsilon(1e-5));
  CHECK(y[1] == doctest::Approx(1.13137).epsilon(1e-5));

  TensorD dz({2, 1}, {1.0, 0.0});
  TensorD dx = layer.backward(dz);
  CHECK(dx[0] == doctest::Approx(0.18102).epsilon(1e-4));
  CHECK(dx[1] == doctest::Approx(-0.13576).epsilon(1e-4));
}

TEST_CASE("second-moment form is scale invariant") {
  std::mt19937_64 rng(35);
  TensorD x = TensorD::randn({4, 2}, rng);
  TensorD x2 = x;
  for (auto& v : x2.vec()) v *= 3.7;
  NormLayerD a(2, batch_cfg(NormForm::modified));
  NormLayerD b(2, batch_cfg(NormForm::modified));
  TensorD ya = a.forward(x), yb = b.forward(x2);
  for (std::size_t i = 0; i < ya.numel(); ++i)
    CHECK(ya[i] == doctest::Approx(yb[i]).epsilon(1e-9));
}

TEST_CASE("gradcheck across batch sizes and channel counts") {
  for (NormForm form : {NormForm::vanilla, NormForm::modified}) {
    for (std::size_t B : {2u, 4u, 8u}) {
      for (std::size_t C : {1u, 3u, 16u}) {
        std::mt19937_64 rng(1000 + B * 100 + C + (form == NormForm::modified));
        TensorD x = conditioned_input(B, C, rng);
        // Redraw the coefficients until every analytic gradient element is
        // bounded away from zero; near-zero elements make the relative
        // comparison measure finite-difference roundoff instead of the layer.
        TensorD coeff(x.shape());
        TensorD dx(x.shape());
        for (int attempt = 0; attempt < 100; ++attempt) {
          coeff = TensorD::randn(x.shape(), rng);
          NormLayerD layer(C, batch_cfg(form));
          layer.forward(x);
          dx = layer.backward(coeff);
          double lo = std::abs(dx[0]);
          for (std::size_t i = 1; i < dx.numel(); ++i)
            lo = std::min(lo, std::abs(dx[i]));
          if (lo >= 1e-3) break;
        }
        const double e = gradcheck(
            [&](const TensorD& probe) {
              NormLayerD fresh(C, batch_cfg(form));
              TensorD z = fresh.forward(probe);
              double s = 0.0;
              for (std::size_t i = 0; i < z.numel(); ++i) s += coeff[i] * z[i];
              return s;
            },
            x, dx);
        CAPTURE(B);
        CAPTURE(C);
        CAPTURE(static_cast<int>(form));
        CHECK(e < 1e-6);
      }
    }
  }
}

TEST_CASE("renormalizing correction is identity when moving stats match") {
  // With moving values pinned to the batch statistics, r = 1 and d = 0 and the
  // corrected output equals plain standardization.
  std::mt19937_64 rng(36);
  TensorD x = TensorD::randn({8, 2}, rng);
  std::vector<double> mu, var;
  batch_moments(x, mu, var);

  NormVariantConfig cfg = batch_cfg(NormForm::vanilla, 1e-5);
  cfg.fp_source = StatSource::ema;
  cfg.momentum = 0.999999;  // keep the pinned values in place
  NormLayerD corrected(2, cfg);
  corrected.mu_ema().value() = mu;
  corrected.var_ema().value() = var;

  NormLayerD plain(2, batch_cfg(NormForm::vanilla, 1e-5));
  TensorD zc = corrected.forward(x);
  TensorD zp = plain.forward(x);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(corrected.last_r()[c] == doctest::Approx(1.0).epsilon(1e-5));
  }
  for (std::size_t i = 0; i < zc.numel(); ++i)
    CHECK(zc[i] == doctest::Approx(zp[i]).epsilon(1e-4));
}

TEST_CASE("clip bounds on the correction ratio") {
  // lambda = 1 forces r = 1 regardless of the statistics.
  std::mt19937_64 rng(37);
  TensorD x = TensorD::randn({8, 1}, rng, 10.0);
  {
    NormVariantConfig cfg = batch_cfg(NormForm::vanilla, 1e-5);
    cfg.fp_source = StatSource::ema;
    cfg.clip_lambda = 1.0;
    NormLayerD layer(1, cfg);
    layer.forward(x);
    CHECK(layer.last_r()[0] == 1.0);
  }
  {
    // batch sigma far above the moving sigma: r hits the upper clip
    NormVariantConfig cfg = batch_cfg(NormForm::vanilla, 0.0);
    cfg.fp_source = StatSource::ema;
    cfg.clip_lambda = 5.0;
    cfg.momentum = 0.999999;
    NormLayerD layer(1, cfg);
    layer.var_ema().value() = {1.0};
    TensorD wide({4, 1}, {-15.0, -5.0, 5.0, 15.0});  // sigma_B > 10
    layer.forward(wide);
    CHECK(layer.last_r()[0] == doctest::Approx(5.0));
  }
  {
    // moving chi far above the window chi: r hits the lower clip 1/lambda
    NormVariantConfig cfg = batch_cfg(NormForm::modified, 0.0);
    cfg.fp_source = StatSource::sma;
    cfg.sma_capacity = 1;
    cfg.clip_lambda = 5.0;
    cfg.momentum = 0.999999;
    NormLayerD layer(1, cfg);
    layer.chi2_ema().value() = {100.0};
    TensorD small({2, 1}, {0.9, 1.1});  // chi ~ 1, ratio ~ 0.1
    layer.forward(small);
    CHECK(layer.last_r()[0] == doctest::Approx(0.2));
  }
}

TEST_CASE("moving-window variant reduces to batch form at m=1 lambda=1") {
  NormVariantConfig win = batch_cfg(NormForm::modified);
  win.fp_source = StatSource::sma;
  win.bp_source = StatSource::sma;
  win.sma_capacity = 1;
  win.clip_lambda = 1.0;

  std::mt19937_64 rng(38);
  for (int rep = 0; rep < 100; ++rep) {
    TensorD x = TensorD::randn({4, 3}, rng);
    TensorD dz = TensorD::randn({4, 3}, rng);
    NormLayerD a(3, win);
    NormLayerD b(3, batch_cfg(NormForm::modified));
    TensorD za = a.forward(x), zb = b.forward(x);
    for (std::size_t i = 0; i < za.numel(); ++i)
      CHECK(std::abs(za[i] - zb[i]) < 1e-12);
    TensorD dxa = a.backward(dz), dxb = b.backward(dz);
    for (std::size_t i = 0; i < dxa.numel(); ++i)
      CHECK(std::abs(dxa[i] - dxb[i]) < 1e-12);
  }
}

TEST_CASE("constant input stream drives the correction ratio to 1") {
  NormVariantConfig cfg = batch_cfg(NormForm::modified, 1e-5);
  cfg.fp_source = StatSource::sma;
  cfg.bp_source = StatSource::sma;
  cfg.sma_capacity = 4;
  cfg.momentum = 0.5;
  NormLayerD layer(1, cfg);
  TensorD x({2, 1}, {1.0, -1.0});
  for (int t = 0; t < 60; ++t) layer.forward(x);
  CHECK(layer.last_r()[0] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("warmup uses batch statistics but still fills the buffers") {
  NormVariantConfig cfg = batch_cfg(NormForm::vanilla, 1e-5);
  cfg.fp_source = StatSource::ema;
  cfg.warmup_iters = 3;
  NormLayerD warm(1, cfg);
  NormLayerD plain(1, batch_cfg(NormForm::vanilla, 1e-5));
  std::mt19937_64 rng(39);
  for (int t = 0; t < 3; ++t) {
    TensorD x = TensorD::randn({6, 1}, rng, 4.0);
    TensorD zw = warm.forward(x);
    TensorD zp = plain.forward(x);
    for (std::size_t i = 0; i < zw.numel(); ++i)
      CHECK(zw[i] == doctest::Approx(zp[i]).epsilon(1e-12));
  }
  CHECK(warm.mu_ema().value()[0] != 0.0);  // buffers advanced during warmup
  CHECK(!warm.in_warmup());
}

TEST_CASE("kernel centering is idempotent and kills constant shifts") {
  std::mt19937_64 rng(40);
  TensorD w = TensorD::randn({3, 2, 3, 3}, rng);
  TensorD c1 = Conv2d<double>::centralize(w);
  TensorD c2 = Conv2d<double>::centralize(c1);
  const std::size_t K = 2 * 3 * 3;
  for (std::size_t co = 0; co < 3; ++co) {
    double mean = 0.0;
    for (std::size_t k = 0; k < K; ++k) mean += c1.vec()[co * K + k];
    CHECK(std::abs(mean / K) < 1e-12);
  }
  for (std::size_t i = 0; i < c1.numel(); ++i)
    CHECK(std::abs(c1[i] - c2[i]) < 1e-14);

  // adding a constant to one output channel's kernel leaves output unchanged
  TensorD wshift = w;
  for (std::size_t k = 0; k < K; ++k) wshift.vec()[1 * K + k] += 0.73;
  Conv2d<double> a(w, 1, 1, true);
  Conv2d<double> b(wshift, 1, 1, true);
  TensorD x = TensorD::randn({2, 2, 5, 5}, rng);
  TensorD ya = a.forward(x), yb = b.forward(x);
  for (std::size_t i = 0; i < ya.numel(); ++i)
    CHECK(ya[i] == doctest::Approx(yb[i]).epsilon(1e-10));

  TensorD row({1, 3, 1, 1}, {1.0, 2.0, 3.0});
  TensorD centered = Conv2d<double>::centralize(row);
  CHECK(centered[0] == doctest::Approx(-1.0));
  CHECK(centered[1] == doctest::Approx(0.0).scale(1.0));
  CHECK(centered[2] == doctest::Approx(1.0));
}

TEST_CASE("inference map from identity statistics is the identity") {
  NormLayerD layer(2, batch_cfg(NormForm::vanilla));
  // fresh layer: mu_ema = 0, var_ema = 1, gamma = 1, beta = 0, eps = 0
  InferenceTransform t = layer.finalize_for_inference();
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(t.scale[c] == doctest::Approx(1.0));
    CHECK(t.shift[c] == doctest::Approx(0.0).scale(1.0));
  }
}

TEST_CASE("inference map for the second-moment form has no shift term") {
  NormVariantConfig cfg = batch_cfg(NormForm::modified);
  NormLayerD layer(1, cfg);
  layer.chi2_ema().value() = {4.0};
  layer.gamma[0] = 2.0;
  layer.beta[0] = 3.0;
  InferenceTransform t = layer.finalize_for_inference();
  CHECK(t.scale[0] == doctest::Approx(1.0));
  CHECK(t.shift[0] == doctest::Approx(3.0));
}

TEST_CASE("training forward with frozen stats equals the finalized map") {
  std::mt19937_64 rng(41);
  for (NormForm form : {NormForm::vanilla, NormForm::modified}) {
    NormVariantConfig cfg = batch_cfg(form, 1e-5);
    cfg.fp_source = form == NormForm::vanilla ? StatSource::ema : StatSource::sma;
    // The batch statistics below are engineered to equal the moving values,
    // so the in-forward EMA update is a fixed point at any momentum.
    cfg.momentum = 0.9;
    cfg.sma_capacity = 1;
    NormLayerF layer(3, cfg);
    std::normal_distribution<float> d;
    for (auto& v : layer.gamma) v = 1.0f + 0.1f * d(rng);
    for (auto& v : layer.beta) v = 0.1f * d(rng);
    layer.mu_ema().value() = {0.1f, -0.2f, 0.05f};
    layer.var_ema().value() = {1.1f, 0.9f, 1.3f};
    layer.chi2_ema().value() = {1.2f, 0.8f, 1.4f};

    TensorF x = TensorF::randn({64, 3}, rng);
    // Large batch drawn from the same distribution the frozen stats describe:
    // shift/scale the input so its batch stats equal the frozen values.
    std::vector<float> mu, var;
    batch_moments(x, mu, var);
    for (std::size_t c = 0; c < 3; ++c) {
      const float target_m = layer.mu_ema().value()[c];
      const float target_s = std::sqrt(layer.var_ema().value()[c]);
      for (std::size_t n = 0; n < 64; ++n) {
        float& v = x.at2(n, c);
        v = target_m + (v - mu[c]) / std::sqrt(var[c]) * target_s;
      }
    }
    if (form == NormForm::modified) {
      std::vector<float> chi2 = chi_squared(x);
      for (std::size_t c = 0; c < 3; ++c) {
        const float s = std::sqrt(layer.chi2_ema().value()[c] / chi2[c]);
        for (std::size_t n = 0; n < 64; ++n) x.at2(n, c) *= s;
      }
    }

    TensorF z_train = layer.forward(x);
    TensorF z_infer = layer.infer(x);
    for (std::size_t i = 0; i < z_train.numel(); ++i)
      CHECK(std::abs(z_train[i] - z_infer[i]) < 1e-5f);
  }
}

TEST_CASE("preset wiring matches the intended variants") {
  NormVariantConfig bn = NormVariantConfig::bn();
  CHECK(bn.form == NormForm::vanilla);
  CHECK(bn.fp_source == StatSource::batch);
  CHECK(bn.bp_source == StatSource::batch);
  CHECK(!bn.paper_reported_divergent());

  NormVariantConfig brn = NormVariantConfig::brn();
  CHECK(brn.form == NormForm::vanilla);
  CHECK(brn.fp_source == StatSource::ema);
  CHECK(brn.bp_source == StatSource::batch);
  CHECK(brn.momentum == doctest::Approx(0.98));

  NormVariantConfig mabn = NormVariantConfig::mabn();
  CHECK(mabn.form == NormForm::modified);
  CHECK(mabn.fp_source == StatSource::sma);
  CHECK(mabn.bp_source == StatSource::sma);
  CHECK(mabn.sma_capacity == 16);

  NormVariantConfig flagged = NormVariantConfig::bn();
  flagged.bp_source = StatSource::sma;
  CHECK(flagged.paper_reported_divergent());

  NormVariantConfig bad = NormVariantConfig::bn();
  bad.momentum = 1.5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  NormVariantConfig bad2 = NormVariantConfig::bn();
  bad2.clip_lambda = 0.5;
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
}

TEST_CASE("error contracts of the layer") {
  NormLayerD layer(2, batch_cfg(NormForm::vanilla));
  TensorD x({3, 2});
  CHECK_THROWS_AS(layer.backward(x), std::runtime_error);  // backward first
  CHECK_THROWS_AS(layer.forward(TensorD({3, 5})), std::invalid_argument);
  // constant input with eps = 0 has a zero denominator
  NormLayerD degenerate(1, batch_cfg(NormForm::vanilla, 0.0));
  CHECK_THROWS_AS(degenerate.forward(TensorD::full({4, 1}, 2.0)),
                  std::runtime_error);
}
