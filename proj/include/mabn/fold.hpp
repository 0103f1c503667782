#ifndef MABN_FOLD_HPP_
#define MABN_FOLD_HPP_

#include <chrono>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mabn/layers.hpp"
#include "mabn/norm.hpp"
#include "mabn/tensor.hpp"

namespace mabn {

// Absorbs a finalized (linear) normalizer into the convolution:
// w' = scale (.) w per output channel, b' = scale (.) b + shift.
// The result is a plain convolution; the normalizer disappears.
template <typename T>
Conv2d<T> fold(const Conv2d<T>& conv, const InferenceTransform& norm) {
  const std::size_t Co = conv.w.dim(0);
  if (norm.scale.size() != Co || norm.shift.size() != Co)
    throw std::invalid_argument("fold: normalizer channels " +
                                std::to_string(norm.scale.size()) +
                                " vs conv output channels " +
                                std::to_string(Co));
  Tensor<T> w = conv.centralized() ? Conv2d<T>::centralize(conv.w) : conv.w;
  const std::size_t K = w.numel() / Co;
  for (std::size_t co = 0; co < Co; ++co) {
    const T s = static_cast<T>(norm.scale[co]);
    T* row = w.data() + co * K;
    for (std::size_t k = 0; k < K; ++k) row[k] *= s;
  }
  Conv2d<T> out(std::move(w), conv.stride(), conv.pad(), false);
  for (std::size_t co = 0; co < Co; ++co)
    out.bias[co] = static_cast<T>(norm.scale[co]) * conv.bias[co] +
                   static_cast<T>(norm.shift[co]);
  return out;
}

// Inference-mode group/instance normalization: per-instance, per-group
// standardization followed by the per-channel affine. Nonlinear at inference
// time; exists as the benchmark contrast to a folded normalizer.
template <typename T>
Tensor<T> instance_norm_inference(const Tensor<T>& x, std::size_t groups,
                                  const std::vector<T>& gamma,
                                  const std::vector<T>& beta,
                                  T eps = static_cast<T>(1e-5)) {
  if (x.rank() != 4)
    throw std::invalid_argument("instance_norm: input must be [B,C,H,W]");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (groups == 0 || C % groups != 0)
    throw std::invalid_argument("instance_norm: channels " + std::to_string(C) +
                                " not divisible by groups " +
                                std::to_string(groups));
  if (gamma.size() != C || beta.size() != C)
    throw std::invalid_argument("instance_norm: affine parameter size mismatch");
  const std::size_t cpg = C / groups;
  const std::size_t S = H * W;
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const T* base = x.data() + (n * C + g * cpg) * S;
      const std::size_t count = cpg * S;
      T sum = T(0);
      for (std::size_t i = 0; i < count; ++i) sum += base[i];
      const T mean = sum / static_cast<T>(count);
      T acc = T(0);
      for (std::size_t i = 0; i < count; ++i) {
        const T d = base[i] - mean;
        acc += d * d;
      }
      const T inv = T(1) / std::sqrt(acc / static_cast<T>(count) + eps);
      T* out = y.data() + (n * C + g * cpg) * S;
      for (std::size_t c = 0; c < cpg; ++c) {
        const T gm = gamma[g * cpg + c];
        const T bt = beta[g * cpg + c];
        for (std::size_t s = 0; s < S; ++s)
          out[c * S + s] = (base[c * S + s] - mean) * inv * gm + bt;
      }
    }
  }
  return y;
}

struct BenchReport {
  std::string label;
  double iters_per_sec = 0.0;
  double wall_time_sec = 0.0;
  std::vector<std::size_t> input_shape;
  std::size_t reps = 0;
  std::size_t iters_per_rep = 0;
};

// Median-of-reps iterations/second on a monotonic clock.
inline BenchReport bench(const std::string& label,
                         const std::function<void()>& iteration,
                         const std::vector<std::size_t>& input_shape,
                         std::size_t warmup_reps, std::size_t timed_reps,
                         std::size_t iters_per_rep) {
  if (timed_reps < 1 || iters_per_rep < 1)
    throw std::invalid_argument("bench: reps must be >= 1");
  using clock = std::chrono::steady_clock;
  for (std::size_t r = 0; r < warmup_reps; ++r)
    for (std::size_t i = 0; i < iters_per_rep; ++i) iteration();
  std::vector<double> rates;
  double total = 0.0;
  for (std::size_t r = 0; r < timed_reps; ++r) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < iters_per_rep; ++i) iteration();
    const auto t1 = clock::now();
    const double sec = std::chrono::duration<double>(t1 - t0).count();
    total += sec;
    rates.push_back(static_cast<double>(iters_per_rep) / sec);
  }
  std::sort(rates.begin(), rates.end());
  BenchReport rep;
  rep.label = label;
  rep.iters_per_sec = rates[rates.size() / 2];
  rep.wall_time_sec = total;
  rep.input_shape = input_shape;
  rep.reps = timed_reps;
  rep.iters_per_rep = iters_per_rep;
  return rep;
}

}  // namespace mabn

#endif  // MABN_FOLD_HPP_
