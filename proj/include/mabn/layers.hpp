#ifndef MABN_LAYERS_HPP_
#define MABN_LAYERS_HPP_

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mabn/tensor.hpp"

namespace mabn {

// 2D cross-correlation, NCHW. No implicit bias; an optional per-output-channel
// bias exists only so a folded normalizer has somewhere to live.
// Backward is hand-written and exact. Reductions run in a fixed sequential
// order, so identical inputs give bit-identical outputs.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(Tensor<T> weight, std::size_t stride, std::size_t pad,
         bool centralize_weights = false)
      : w(std::move(weight)), stride_(stride), pad_(pad),
        centralize_(centralize_weights) {
    if (w.rank() != 4)
      throw std::invalid_argument("conv2d: weight must be [Co,Ci,kh,kw], got " +
                                  w.shape_str());
    if (stride_ == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
    bias.assign(w.dim(0), T(0));
  }

  std::size_t out_channels() const { return w.dim(0); }
  std::size_t in_channels() const { return w.dim(1); }
  std::size_t stride() const { return stride_; }
  std::size_t pad() const { return pad_; }
  bool centralized() const { return centralize_; }

  Tensor<T> forward(const Tensor<T>& x) {
    check_input(x);
    const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t Ho = (H + 2 * pad_ - kh) / stride_ + 1;
    const std::size_t Wo = (W + 2 * pad_ - kw) / stride_ + 1;
    const std::size_t K = Ci * kh * kw, P = Ho * Wo;

    const Tensor<T>& weff = effective_weights();
    Tensor<T> y({B, Co, Ho, Wo});
    cols_.assign(B * K * P, T(0));
    for (std::size_t n = 0; n < B; ++n) {
      T* col = cols_.data() + n * K * P;
      im2col(x, n, col, Ho, Wo);
      // y[co,p] = sum_k weff[co,k] * col[k,p]
      for (std::size_t co = 0; co < Co; ++co) {
        T* yrow = &y.at4(n, co, 0, 0);
        const T b = bias[co];
        for (std::size_t p = 0; p < P; ++p) yrow[p] = b;
        const T* wrow = weff.data() + co * K;
        for (std::size_t k = 0; k < K; ++k) {
          const T wv = wrow[k];
          if (wv == T(0)) continue;
          const T* crow = col + k * P;
          for (std::size_t p = 0; p < P; ++p) yrow[p] += wv * crow[p];
        }
      }
    }
    x_shape_ = x.shape();
    has_cache_ = true;
    return y;
  }

  // Returns dL/dx; dL/dw accumulates into dw (and db).
  Tensor<T> backward(const Tensor<T>& dy) {
    if (!has_cache_) throw std::runtime_error("conv2d: backward before forward");
    const std::size_t B = x_shape_[0], Ci = x_shape_[1], H = x_shape_[2],
                      W = x_shape_[3];
    const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t Ho = dy.dim(2), Wo = dy.dim(3);
    const std::size_t K = Ci * kh * kw, P = Ho * Wo;
    if (dy.dim(0) != B || dy.dim(1) != Co)
      throw std::invalid_argument("conv2d: gradient shape " + dy.shape_str() +
                                  " does not match output");

    const Tensor<T>& weff = effective_weights();
    Tensor<T> dweff({Co, Ci, kh, kw});
    dw = Tensor<T>({Co, Ci, kh, kw});
    db.assign(Co, T(0));
    Tensor<T> dx({B, Ci, H, W});
    std::vector<T> dcol(K * P);
    for (std::size_t n = 0; n < B; ++n) {
      const T* col = cols_.data() + n * K * P;
      std::fill(dcol.begin(), dcol.end(), T(0));
      for (std::size_t co = 0; co < Co; ++co) {
        const T* grow = dy.data() + (n * Co + co) * P;
        T bsum = T(0);
        for (std::size_t p = 0; p < P; ++p) bsum += grow[p];
        db[co] += bsum;
        T* dwrow = dweff.data() + co * K;
        const T* wrow = weff.data() + co * K;
        for (std::size_t k = 0; k < K; ++k) {
          const T* crow = col + k * P;
          T* dcrow = dcol.data() + k * P;
          T acc = T(0);
          const T wv = wrow[k];
          for (std::size_t p = 0; p < P; ++p) {
            acc += grow[p] * crow[p];
            dcrow[p] += wv * grow[p];
          }
          dwrow[k] += acc;
        }
      }
      col2im(dcol.data(), n, dx, Ho, Wo);
    }
    if (centralize_) {
      // w_eff = w - mean(w) per output channel, so the raw-weight gradient
      // is the centered gradient.
      for (std::size_t co = 0; co < Co; ++co) {
        T* g = dweff.data() + co * K;
        T mean = T(0);
        for (std::size_t k = 0; k < K; ++k) mean += g[k];
        mean /= static_cast<T>(K);
        T* out = dw.data() + co * K;
        for (std::size_t k = 0; k < K; ++k) out[k] = g[k] - mean;
      }
    } else {
      dw = std::move(dweff);
    }
    return dx;
  }

  Tensor<T> w;
  std::vector<T> bias;
  Tensor<T> dw;
  std::vector<T> db;

  // Per-output-channel mean removed over all remaining axes.
  static Tensor<T> centralize(const Tensor<T>& weight) {
    Tensor<T> out = weight;
    const std::size_t Co = weight.dim(0);
    const std::size_t K = weight.numel() / Co;
    for (std::size_t co = 0; co < Co; ++co) {
      T* row = out.data() + co * K;
      T mean = T(0);
      for (std::size_t k = 0; k < K; ++k) mean += row[k];
      mean /= static_cast<T>(K);
      for (std::size_t k = 0; k < K; ++k) row[k] -= mean;
    }
    return out;
  }

 private:
  const Tensor<T>& effective_weights() {
    if (!centralize_) return w;
    weff_cache_ = centralize(w);
    return weff_cache_;
  }

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4)
      throw std::invalid_argument("conv2d: input must be [B,C,H,W], got " +
                                  x.shape_str());
    if (x.dim(1) != w.dim(1))
      throw std::invalid_argument(
          "conv2d: input channels " + std::to_string(x.dim(1)) +
          " vs weight channels " + std::to_string(w.dim(1)));
    if (x.dim(2) + 2 * pad_ < w.dim(2) || x.dim(3) + 2 * pad_ < w.dim(3))
      throw std::invalid_argument("conv2d: kernel " + w.shape_str() +
                                  " does not fit input " + x.shape_str());
  }

  void im2col(const Tensor<T>& x, std::size_t n, T* col, std::size_t Ho,
              std::size_t Wo) const {
    const std::size_t Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t kh = w.dim(2), kw = w.dim(3);
    std::size_t k = 0;
    for (std::size_t c = 0; c < Ci; ++c)
      for (std::size_t dh = 0; dh < kh; ++dh)
        for (std::size_t dv = 0; dv < kw; ++dv, ++k) {
          T* crow = col + k * Ho * Wo;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const std::ptrdiff_t ih =
                static_cast<std::ptrdiff_t>(oh * stride_ + dh) -
                static_cast<std::ptrdiff_t>(pad_);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const std::ptrdiff_t iw =
                  static_cast<std::ptrdiff_t>(ow * stride_ + dv) -
                  static_cast<std::ptrdiff_t>(pad_);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
              crow[oh * Wo + ow] = x.at4(n, c, ih, iw);
            }
          }
        }
  }

  void col2im(const T* dcol, std::size_t n, Tensor<T>& dx, std::size_t Ho,
              std::size_t Wo) const {
    const std::size_t Ci = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
    const std::size_t kh = w.dim(2), kw = w.dim(3);
    std::size_t k = 0;
    for (std::size_t c = 0; c < Ci; ++c)
      for (std::size_t dh = 0; dh < kh; ++dh)
        for (std::size_t dv = 0; dv < kw; ++dv, ++k) {
          const T* crow = dcol + k * Ho * Wo;
          for (std::size_t oh = 0; oh < Ho; ++oh) {
            const std::ptrdiff_t ih =
                static_cast<std::ptrdiff_t>(oh * stride_ + dh) -
                static_cast<std::ptrdiff_t>(pad_);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t ow = 0; ow < Wo; ++ow) {
              const std::ptrdiff_t iw =
                  static_cast<std::ptrdiff_t>(ow * stride_ + dv) -
                  static_cast<std::ptrdiff_t>(pad_);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
              dx.at4(n, c, ih, iw) += crow[oh * Wo + ow];
            }
          }
        }
  }

  std::size_t stride_ = 1;
  std::size_t pad_ = 0;
  bool centralize_ = false;
  std::vector<T> cols_;
  Tensor<T> weff_cache_;
  std::vector<std::size_t> x_shape_;
  bool has_cache_ = false;
};

// y = x * w^T + b for x:[B,p], w:[q,p], b:[q].
template <typename T>
class Affine {
 public:
  Affine() = default;
  Affine(Tensor<T> weight, std::vector<T> bias_init)
      : w(std::move(weight)), b(std::move(bias_init)) {
    if (w.rank() != 2)
      throw std::invalid_argument("affine: weight must be [q,p]");
    if (b.size() != w.dim(0))
      throw std::invalid_argument("affine: bias length " +
                                  std::to_string(b.size()) + " vs rows " +
                                  std::to_string(w.dim(0)));
  }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(1) != w.dim(1))
      throw std::invalid_argument("affine: input " + x.shape_str() +
                                  " does not match weight " + w.shape_str());
    const std::size_t B = x.dim(0), p = w.dim(1), q = w.dim(0);
    x_ = x;
    Tensor<T> y({B, q});
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < q; ++j) {
        T acc = b[j];
        const T* xr = x.data() + i * p;
        const T* wr = w.data() + j * p;
        for (std::size_t k = 0; k < p; ++k) acc += xr[k] * wr[k];
        y.at2(i, j) = acc;
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const std::size_t B = x_.dim(0), p = w.dim(1), q = w.dim(0);
    if (dy.rank() != 2 || dy.dim(0) != B || dy.dim(1) != q)
      throw std::invalid_argument("affine: gradient shape mismatch");
    dw = Tensor<T>({q, p});
    db.assign(q, T(0));
    Tensor<T> dx({B, p});
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < q; ++j) {
        const T g = dy.at2(i, j);
        db[j] += g;
        const T* wr = w.data() + j * p;
        T* dxr = dx.data() + i * p;
        T* dwr = dw.data() + j * p;
        const T* xr = x_.data() + i * p;
        for (std::size_t k = 0; k < p; ++k) {
          dxr[k] += g * wr[k];
          dwr[k] += g * xr[k];
        }
      }
    return dx;
  }

  Tensor<T> w;
  std::vector<T> b;
  Tensor<T> dw;
  std::vector<T> db;

 private:
  Tensor<T> x_;
};

template <typename T>
class Relu {
 public:
  Tensor<T> forward(const Tensor<T>& x) {
    mask_.assign(x.numel(), 0);
    Tensor<T> y = x;
    for (std::size_t i = 0; i < y.numel(); ++i) {
      if (y[i] > T(0)) {
        mask_[i] = 1;
      } else {
        y[i] = T(0);
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.numel(); ++i)
      if (!mask_[i]) dx[i] = T(0);
    return dx;
  }

 private:
  std::vector<unsigned char> mask_;
};

// Mean cross-entropy over the batch. grad = (softmax - onehot) / B.
template <typename T>
std::pair<T, Tensor<T>> softmax_cross_entropy(const Tensor<T>& logits,
                                              const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw std::invalid_argument("softmax_xent: logits must be [B,C]");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B)
    throw std::invalid_argument("softmax_xent: label count mismatch");
  Tensor<T> grad({B, C});
  T loss = T(0);
  for (std::size_t i = 0; i < B; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C)
      throw std::invalid_argument("softmax_xent: label " +
                                  std::to_string(labels[i]) +
                                  " out of range [0," + std::to_string(C) + ")");
    const T* row = logits.data() + i * C;
    T mx = row[0];
    for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
    T denom = T(0);
    for (std::size_t j = 0; j < C; ++j)
      denom += std::exp(row[j] - mx);
    const T logdenom = std::log(denom);
    loss += (logdenom - (row[labels[i]] - mx));
    T* grow = grad.data() + i * C;
    for (std::size_t j = 0; j < C; ++j)
      grow[j] = std::exp(row[j] - mx) / denom / static_cast<T>(B);
    grow[labels[i]] -= T(1) / static_cast<T>(B);
  }
  return {loss / static_cast<T>(B), std::move(grad)};
}

}  // namespace mabn

#endif  // MABN_LAYERS_HPP_
