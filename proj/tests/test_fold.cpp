#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mabn/fold.hpp"
#include "mabn/layers.hpp"
#include "mabn/norm.hpp"
#include "mabn/tensor.hpp"

using namespace mabn;

TEST_CASE("identity normalizer folds to the original convolution") {
  std::mt19937_64 rng(51);
  TensorF w = TensorF::randn({4, 3, 3, 3}, rng);
  Conv2d<float> conv(w, 1, 1);
  InferenceTransform t;
  t.scale.assign(4, 1.0);
  t.shift.assign(4, 0.0);
  Conv2d<float> folded = fold(conv, t);
  for (std::size_t i = 0; i < w.numel(); ++i) CHECK(folded.w[i] == conv.w[i]);
  for (std::size_t c = 0; c < 4; ++c) CHECK(folded.bias[c] == 0.0f);
}

TEST_CASE("scale-two normalizer doubles the weights exactly") {
  std::mt19937_64 rng(52);
  TensorF w = TensorF::randn({2, 2, 3, 3}, rng);
  Conv2d<float> conv(w, 1, 0);
  InferenceTransform t;
  t.scale.assign(2, 2.0);
  t.shift.assign(2, 0.0);
  Conv2d<float> folded = fold(conv, t);
  for (std::size_t i = 0; i < w.numel(); ++i)
    CHECK(folded.w[i] == 2.0f * conv.w[i]);
}

TEST_CASE("folded output matches conv-then-normalize on random data") {
  std::mt19937_64 rng(53);
  for (int rep = 0; rep < 5; ++rep) {
    TensorF w = TensorF::randn({4, 3, 3, 3}, rng, 0.3f);
    Conv2d<float> conv(w, 1, 1);
    InferenceTransform t;
    std::uniform_real_distribution<double> sd(0.5, 1.5);
    std::normal_distribution<double> nd;
    for (std::size_t c = 0; c < 4; ++c) {
      t.scale.push_back(sd(rng));
      t.shift.push_back(0.2 * nd(rng));
    }
    Conv2d<float> folded = fold(conv, t);

    TensorF x = TensorF::randn({2, 3, 8, 8}, rng, 0.5f);
    TensorF direct = conv.forward(x);
    for (std::size_t c = 0; c < 4; ++c) {
      const float s = static_cast<float>(t.scale[c]);
      const float b = static_cast<float>(t.shift[c]);
      for_each_in_channel(direct, c,
                          [&](std::size_t i) { direct[i] = s * direct[i] + b; });
    }
    TensorF via_fold = folded.forward(x);
    for (std::size_t i = 0; i < direct.numel(); ++i)
      CHECK(std::abs(direct[i] - via_fold[i]) < 1e-5f);
  }
}

TEST_CASE("folding preserves the parameter count of the convolution") {
  std::mt19937_64 rng(54);
  TensorF w = TensorF::randn({5, 3, 3, 3}, rng);
  Conv2d<float> conv(w, 2, 1);
  InferenceTransform t;
  t.scale.assign(5, 1.3);
  t.shift.assign(5, -0.4);
  Conv2d<float> folded = fold(conv, t);
  CHECK(folded.w.numel() == conv.w.numel());
  CHECK(folded.bias.size() == conv.bias.size());
  CHECK(folded.stride() == conv.stride());
  CHECK(folded.pad() == conv.pad());
  CHECK(!folded.centralized());
}

TEST_CASE("fold rejects channel mismatch") {
  Conv2d<float> conv(TensorF({4, 3, 3, 3}), 1, 1);
  InferenceTransform t;
  t.scale.assign(3, 1.0);
  t.shift.assign(3, 0.0);
  CHECK_THROWS_AS(fold(conv, t), std::invalid_argument);
}

TEST_CASE("folding a centering convolution bakes the centered weights in") {
  std::mt19937_64 rng(55);
  TensorF w = TensorF::randn({3, 2, 3, 3}, rng);
  Conv2d<float> conv(w, 1, 1, true);
  InferenceTransform t;
  t.scale.assign(3, 1.0);
  t.shift.assign(3, 0.0);
  Conv2d<float> folded = fold(conv, t);
  TensorF x = TensorF::randn({1, 2, 6, 6}, rng);
  TensorF a = conv.forward(x);
  TensorF b = folded.forward(x);
  for (std::size_t i = 0; i < a.numel(); ++i)
    CHECK(std::abs(a[i] - b[i]) < 1e-5f);
}

TEST_CASE("instance norm constant channels collapse to beta") {
  TensorF x({2, 4, 3, 3});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t w = 0; w < 3; ++w)
          x.at4(n, c, h, w) = static_cast<float>(c) + 1.0f;
  std::vector<float> gamma(4, 1.5f), beta{0.1f, 0.2f, 0.3f, 0.4f};
  TensorF y = instance_norm_inference(x, std::size_t(4), gamma, beta);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(y.at4(n, c, 1, 1) == doctest::Approx(beta[c]).epsilon(1e-5));
}

TEST_CASE("instance norm standardizes a single group like a batch") {
  TensorF x({1, 1, 1, 3});
  x.at4(0, 0, 0, 0) = 1.0f;
  x.at4(0, 0, 0, 1) = 2.0f;
  x.at4(0, 0, 0, 2) = 3.0f;
  std::vector<float> gamma{1.0f}, beta{0.0f};
  TensorF y = instance_norm_inference(x, std::size_t(1), gamma, beta, 0.0f);
  CHECK(y[0] == doctest::Approx(-1.22474).epsilon(1e-5));
  CHECK(y[1] == doctest::Approx(0.0).scale(1.0).epsilon(1e-6));
  CHECK(y[2] == doctest::Approx(1.22474).epsilon(1e-5));
}

TEST_CASE("instance norm output invariant to per-group input affine maps") {
  std::mt19937_64 rng(56);
  TensorF x = TensorF::randn({1, 4, 5, 5}, rng);
  TensorF x2 = x;
  // groups of 2 channels; scale+shift group 0 and group 1 differently
  for (std::size_t c = 0; c < 4; ++c) {
    const float s = c < 2 ? 3.0f : 0.25f;
    const float b = c < 2 ? -1.0f : 2.0f;
    for (std::size_t h = 0; h < 5; ++h)
      for (std::size_t w = 0; w < 5; ++w)
        x2.at4(0, c, h, w) = s * x2.at4(0, c, h, w) + b;
  }
  std::vector<float> gamma(4, 1.0f), beta(4, 0.0f);
  TensorF a = instance_norm_inference(x, std::size_t(2), gamma, beta, 0.0f);
  TensorF b = instance_norm_inference(x2, std::size_t(2), gamma, beta, 0.0f);
  for (std::size_t i = 0; i < a.numel(); ++i)
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-3));
}

TEST_CASE("instance norm rejects indivisible groupings") {
  TensorF x({1, 6, 2, 2});
  std::vector<float> gamma(6, 1.0f), beta(6, 0.0f);
  CHECK_THROWS_AS(instance_norm_inference(x, std::size_t(4), gamma, beta),
                  std::invalid_argument);
  CHECK_THROWS_AS(instance_norm_inference(x, std::size_t(0), gamma, beta),
                  std::invalid_argument);
}

TEST_CASE("bench report sanity") {
  int counter = 0;
  BenchReport r = bench("noop", [&] { ++counter; }, {1, 2, 3, 3}, 1, 5, 100);
  CHECK(r.iters_per_sec > 0.0);
  CHECK(r.reps == 5);
  CHECK(r.iters_per_rep == 100);
  CHECK(counter == 600);
  CHECK(r.input_shape == std::vector<std::size_t>{1, 2, 3, 3});
  CHECK_THROWS_AS(bench("bad", [] {}, {}, 0, 0, 1), std::invalid_argument);
}
