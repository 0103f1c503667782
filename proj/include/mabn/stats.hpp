#ifndef MABN_STATS_HPP_
#define MABN_STATS_HPP_

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mabn/tensor.hpp"

namespace mabn {

// Statistics are per channel: axis 1 of an NCHW or [B,p] tensor, reduced
// over everything else, in fixed sequential order.

template <typename T>
std::size_t channel_count(const Tensor<T>& x) {
  if (x.rank() != 2 && x.rank() != 4)
    throw std::invalid_argument("stats: expected [B,p] or [B,C,H,W], got " +
                                x.shape_str());
  return x.dim(1);
}

// Calls fn(flat_index) for every element of channel c.
template <typename T, typename Fn>
void for_each_in_channel(const Tensor<T>& x, std::size_t c, Fn&& fn) {
  const std::size_t B = x.dim(0), C = x.dim(1);
  if (x.rank() == 2) {
    for (std::size_t n = 0; n < B; ++n) fn(n * C + c);
  } else {
    const std::size_t S = x.dim(2) * x.dim(3);
    for (std::size_t n = 0; n < B; ++n) {
      const std::size_t base = (n * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) fn(base + s);
    }
  }
}

template <typename T>
std::size_t per_channel_count(const Tensor<T>& x) {
  return x.numel() / x.dim(1);
}

// Per-channel sample mean and biased variance (divide by the count,
// no Bessel correction).
template <typename T>
void batch_moments(const Tensor<T>& x, std::vector<T>& mu,
                   std::vector<T>& sigma2) {
  const std::size_t C = channel_count(x);
  const T count = static_cast<T>(per_channel_count(x));
  mu.assign(C, T(0));
  sigma2.assign(C, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    T sum = T(0);
    for_each_in_channel(x, c, [&](std::size_t i) { sum += x[i]; });
    const T m = sum / count;
    T acc = T(0);
    for_each_in_channel(x, c, [&](std::size_t i) {
      const T d = x[i] - m;
      acc += d * d;
    });
    mu[c] = m;
    sigma2[c] = acc / count;
  }
}

// Per-channel second raw moment: mean of squared elements.
template <typename T>
std::vector<T> chi_squared(const Tensor<T>& x) {
  const std::size_t C = channel_count(x);
  const T count = static_cast<T>(per_channel_count(x));
  std::vector<T> chi2(C, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    T acc = T(0);
    for_each_in_channel(x, c, [&](std::size_t i) { acc += x[i] * x[i]; });
    chi2[c] = acc / count;
  }
  return chi2;
}

// Backward-pass batch statistics: g = mean of dL/dY, psi = mean of Y * dL/dY.
template <typename T>
void grad_stats(const Tensor<T>& y, const Tensor<T>& dy, std::vector<T>& g,
                std::vector<T>& psi) {
  if (!y.same_shape(dy))
    throw std::invalid_argument("grad_stats: shape mismatch " + y.shape_str() +
                                " vs " + dy.shape_str());
  const std::size_t C = channel_count(y);
  const T count = static_cast<T>(per_channel_count(y));
  g.assign(C, T(0));
  psi.assign(C, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    T gs = T(0), ps = T(0);
    for_each_in_channel(y, c, [&](std::size_t i) {
      gs += dy[i];
      ps += y[i] * dy[i];
    });
    g[c] = gs / count;
    psi[c] = ps / count;
  }
}

// Exponential moving average, one scalar per channel.
// value <- alpha * value + (1 - alpha) * obs
template <typename T>
class EmaState {
 public:
  EmaState() = default;
  EmaState(std::size_t channels, T init, T alpha)
      : value_(channels, init), alpha_(alpha) {
    if (!(alpha > T(0) && alpha < T(1)))
      throw std::invalid_argument("ema: momentum must be in (0,1)");
  }

  void update(const std::vector<T>& obs) {
    if (obs.size() != value_.size())
      throw std::invalid_argument("ema: channel count mismatch");
    for (T v : obs)
      if (!std::isfinite(static_cast<double>(v)))
        throw std::invalid_argument("ema: non-finite observation");
    for (std::size_t c = 0; c < value_.size(); ++c)
      value_[c] = alpha_ * value_[c] + (T(1) - alpha_) * obs[c];
  }

  const std::vector<T>& value() const { return value_; }
  std::vector<T>& value() { return value_; }
  T alpha() const { return alpha_; }

 private:
  std::vector<T> value_;
  T alpha_ = T(0.9);
};

// Ring buffer of the last m per-channel observations; the mean covers the
// most recent min(fill, m) entries, current observation included.
template <typename T>
class SmaBuffer {
 public:
  SmaBuffer() = default;
  SmaBuffer(std::size_t channels, std::size_t capacity)
      : channels_(channels), capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("sma: capacity must be >= 1");
    ring_.assign(capacity * channels, T(0));
  }

  std::vector<T> push_and_mean(const std::vector<T>& obs) {
    push(obs);
    return mean();
  }

  void push(const std::vector<T>& obs) {
    if (obs.size() != channels_)
      throw std::invalid_argument("sma: channel count mismatch");
    for (T v : obs)
      if (!std::isfinite(static_cast<double>(v)))
        throw std::invalid_argument("sma: non-finite observation");
    std::copy(obs.begin(), obs.end(), ring_.begin() + head_ * channels_);
    head_ = (head_ + 1) % capacity_;
    if (fill_ < capacity_) ++fill_;
  }

  std::vector<T> mean() const {
    std::vector<T> m(channels_, T(0));
    if (fill_ == 0) return m;
    for (std::size_t s = 0; s < fill_; ++s)
      for (std::size_t c = 0; c < channels_; ++c)
        m[c] += ring_[s * channels_ + c];
    for (T& v : m) v /= static_cast<T>(fill_);
    return m;
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t fill() const { return fill_; }
  std::size_t channels() const { return channels_; }
  const std::vector<T>& raw() const { return ring_; }
  std::size_t head() const { return head_; }
  void restore(std::vector<T> ring, std::size_t head, std::size_t fill) {
    if (ring.size() != capacity_ * channels_ || head >= capacity_ ||
        fill > capacity_)
      throw std::invalid_argument("sma: bad restore state");
    ring_ = std::move(ring);
    head_ = head;
    fill_ = fill;
  }

 private:
  std::size_t channels_ = 0;
  std::size_t capacity_ = 1;
  std::size_t head_ = 0;
  std::size_t fill_ = 0;
  std::vector<T> ring_;
};

// Per-iteration, per-layer L2 norms of named statistics (the raw material
// for the instability traces).
struct StatTrace {
  struct Record {
    std::size_t iteration;
    std::string layer;
    std::string stat;
    double l2norm;
  };
  std::vector<Record> records;

  template <typename T>
  void record(std::size_t iteration, const std::string& layer,
              const std::string& stat, const std::vector<T>& values) {
    double acc = 0.0;
    for (T v : values) {
      const double d = static_cast<double>(v);
      if (!std::isfinite(d)) return;  // skip non-finite stats silently
      acc += d * d;
    }
    records.push_back({iteration, layer, stat, std::sqrt(acc)});
  }
};

}  // namespace mabn

#endif  // MABN_STATS_HPP_
