#pragma once

// Forward and backward passes for every layer kind the networks use:
// convolution (cross-correlation), max/average pooling, ReLU, cross-channel
// local response normalization, channel concatenation, fully connected, and
// softmax cross-entropy. Convolutions are lowered to GEMM via im2col.

#include <dfu/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace dfu {

struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;   // k x k, k in {1,3,5,7}
  std::size_t stride = 1;   // s x s
  std::size_t pad = 0;      // symmetric zero padding per side

  void validate() const {
    if (in_channels == 0 || out_channels == 0)
      throw std::invalid_argument("conv: channel counts must be positive");
    if (kernel != 1 && kernel != 3 && kernel != 5 && kernel != 7)
      throw std::invalid_argument("conv: kernel must be one of 1,3,5,7");
    if (stride == 0) throw std::invalid_argument("conv: stride must be positive");
  }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel,
                                   std::size_t stride, std::size_t pad) {
  const long padded = static_cast<long>(in) + 2 * static_cast<long>(pad);
  const long span = padded - static_cast<long>(kernel);
  if (span < 0 || span / static_cast<long>(stride) + 1 < 1)
    throw std::invalid_argument("conv: output extent < 1");
  return static_cast<std::size_t>(span / static_cast<long>(stride) + 1);
}

enum class PoolMode { kMax, kAverage };
enum class PoolRounding { kFloor, kCeil };

struct PoolSpec {
  PoolMode mode = PoolMode::kMax;
  std::size_t kernel = 2;
  std::size_t stride = 2;
  PoolRounding rounding = PoolRounding::kFloor;
};

// Output extent for pooling (pad 0). Ceil rounding clamps the last partial
// window to the input boundary and never drops below one output cell.
inline std::size_t pool_out_extent(std::size_t in, const PoolSpec& spec) {
  const long h = static_cast<long>(in), k = static_cast<long>(spec.kernel),
             s = static_cast<long>(spec.stride);
  if (spec.rounding == PoolRounding::kFloor) {
    if (h < k) throw std::invalid_argument("pool: kernel larger than input with floor rounding");
    return static_cast<std::size_t>((h - k) / s + 1);
  }
  long out = (h - k + s - 1) / s + 1;  // ceil((h-k)/s) + 1 for h >= k
  if (h < k) out = 1;
  while (out > 1 && (out - 1) * s >= h) --out;
  return static_cast<std::size_t>(std::max(1L, out));
}

struct LrnParams {
  std::size_t n = 5;     // cross-channel neighborhood size (odd)
  double k = 2.0;
  double alpha = 1e-4;
  double beta = 0.75;

  void validate() const {
    if (n < 1 || n % 2 == 0) throw std::invalid_argument("lrn: n must be odd and >= 1");
    if (k <= 0.0) throw std::invalid_argument("lrn: k must be > 0");
    if (alpha < 0.0) throw std::invalid_argument("lrn: alpha must be >= 0");
    if (beta <= 0.0) throw std::invalid_argument("lrn: beta must be > 0");
  }
};

struct FcSpec {
  std::size_t in_units = 0;
  std::size_t out_units = 0;
  Tensor weights;  // out_units x in_units
  Tensor bias;     // out_units

  void validate() const {
    if (in_units == 0 || out_units == 0)
      throw std::invalid_argument("fc: unit counts must be positive");
    if (weights.rank() != 2 || weights.extent(0) != out_units || weights.extent(1) != in_units)
      throw std::invalid_argument("fc: weight shape must be out_units x in_units");
    if (bias.rank() != 1 || bias.extent(0) != out_units)
      throw std::invalid_argument("fc: bias length must be out_units");
  }
};

// Three convolution branches (1x1, 3x3, 5x5) on one input, stride 1, with
// pads 0/1/2 so the spatial extents match for channel concatenation.
struct ParallelConvSpec {
  ConvSpec branch1, branch3, branch5;

  std::size_t out_channels() const {
    return branch1.out_channels + branch3.out_channels + branch5.out_channels;
  }
};

inline ParallelConvSpec make_parallel_conv(std::size_t in_channels, std::size_t c1,
                                           std::size_t c3, std::size_t c5) {
  ParallelConvSpec p;
  p.branch1 = {in_channels, c1, 1, 1, 0};
  p.branch3 = {in_channels, c3, 3, 1, 1};
  p.branch5 = {in_channels, c5, 5, 1, 2};
  return p;
}

namespace detail {

inline void dgemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  double alpha, const double* a, std::size_t lda, const double* b,
                  std::size_t ldb, double beta, double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb),
              beta, c, static_cast<int>(ldc));
}

// Lower the whole batch into one matrix: rows index (c, ki, kj), columns
// index (n, oh, ow). Padding cells are zero.
inline std::vector<double> im2col(const Tensor& x, const ConvSpec& spec, std::size_t oh,
                                  std::size_t ow) {
  const std::size_t n_batch = x.extent(0), c_in = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t k = spec.kernel, s = spec.stride;
  const long pad = static_cast<long>(spec.pad);
  const std::size_t cols = n_batch * oh * ow;
  std::vector<double> col(c_in * k * k * cols, 0.0);
  const double* xd = x.data();
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = col.data() + ((c * k + ki) * k + kj) * cols;
        for (std::size_t n = 0; n < n_batch; ++n) {
          const double* plane = xd + (n * c_in + c) * h * w;
          for (std::size_t i = 0; i < oh; ++i) {
            const long ih = static_cast<long>(i * s) - pad + static_cast<long>(ki);
            double* dst = row + (n * oh + i) * ow;
            if (ih < 0 || ih >= static_cast<long>(h)) continue;
            const double* src = plane + static_cast<std::size_t>(ih) * w;
            for (std::size_t j = 0; j < ow; ++j) {
              const long iw = static_cast<long>(j * s) - pad + static_cast<long>(kj);
              if (iw >= 0 && iw < static_cast<long>(w)) dst[j] = src[static_cast<std::size_t>(iw)];
            }
          }
        }
      }
  return col;
}

inline void col2im_add(const std::vector<double>& col, const ConvSpec& spec, std::size_t oh,
                       std::size_t ow, Tensor& gx) {
  const std::size_t n_batch = gx.extent(0), c_in = gx.extent(1), h = gx.extent(2),
                    w = gx.extent(3);
  const std::size_t k = spec.kernel, s = spec.stride;
  const long pad = static_cast<long>(spec.pad);
  const std::size_t cols = n_batch * oh * ow;
  double* gxd = gx.data();
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = col.data() + ((c * k + ki) * k + kj) * cols;
        for (std::size_t n = 0; n < n_batch; ++n) {
          double* plane = gxd + (n * c_in + c) * h * w;
          for (std::size_t i = 0; i < oh; ++i) {
            const long ih = static_cast<long>(i * s) - pad + static_cast<long>(ki);
            if (ih < 0 || ih >= static_cast<long>(h)) continue;
            const double* src = row + (n * oh + i) * ow;
            double* dst = plane + static_cast<std::size_t>(ih) * w;
            for (std::size_t j = 0; j < ow; ++j) {
              const long iw = static_cast<long>(j * s) - pad + static_cast<long>(kj);
              if (iw >= 0 && iw < static_cast<long>(w)) dst[static_cast<std::size_t>(iw)] += src[j];
            }
          }
        }
      }
}

inline void check_conv_args(const Tensor& x, const ConvSpec& spec, const Tensor& weights,
                            const Tensor& bias) {
  spec.validate();
  if (x.rank() != 4)
    throw std::invalid_argument("conv: input must be N x C x H x W");
  if (x.extent(1) != spec.in_channels)
    throw std::invalid_argument("conv: input channel count " + std::to_string(x.extent(1)) +
                                " does not match spec " + std::to_string(spec.in_channels));
  if (weights.rank() != 4 || weights.extent(0) != spec.out_channels ||
      weights.extent(1) != spec.in_channels || weights.extent(2) != spec.kernel ||
      weights.extent(3) != spec.kernel)
    throw std::invalid_argument("conv: weight shape must be O x C x k x k");
  if (bias.rank() != 1 || bias.extent(0) != spec.out_channels)
    throw std::invalid_argument("conv: bias length must equal out_channels");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution (cross-correlation with zero padding)

inline Tensor conv2d_forward(const Tensor& x, const ConvSpec& spec, const Tensor& weights,
                             const Tensor& bias) {
  detail::check_conv_args(x, spec, weights, bias);
  const std::size_t n_batch = x.extent(0), h = x.extent(2), w = x.extent(3);
  const std::size_t oh = conv_out_extent(h, spec.kernel, spec.stride, spec.pad);
  const std::size_t ow = conv_out_extent(w, spec.kernel, spec.stride, spec.pad);
  const std::size_t o = spec.out_channels, ckk = spec.in_channels * spec.kernel * spec.kernel;
  const std::size_t cols = n_batch * oh * ow, p = oh * ow;

  const std::vector<double> col = detail::im2col(x, spec, oh, ow);
  std::vector<double> prod(o * cols);
  detail::dgemm(false, false, o, cols, ckk, 1.0, weights.data(), ckk, col.data(), cols, 0.0,
                prod.data(), cols);

  Tensor out({n_batch, o, oh, ow});
  double* od = out.data();
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t oc = 0; oc < o; ++oc) {
      const double* src = prod.data() + oc * cols + n * p;
      double* dst = od + (n * o + oc) * p;
      const double b = bias[oc];
      for (std::size_t i = 0; i < p; ++i) dst[i] = src[i] + b;
    }
  return out;
}

struct ConvGradients {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
};

inline ConvGradients conv2d_backward(const Tensor& x, const ConvSpec& spec,
                                     const Tensor& weights, const Tensor& grad_out,
                                     bool need_grad_input = true) {
  Tensor bias({spec.out_channels});  // shape check only
  detail::check_conv_args(x, spec, weights, bias);
  const std::size_t n_batch = x.extent(0), h = x.extent(2), w = x.extent(3);
  const std::size_t oh = conv_out_extent(h, spec.kernel, spec.stride, spec.pad);
  const std::size_t ow = conv_out_extent(w, spec.kernel, spec.stride, spec.pad);
  if (grad_out.rank() != 4 || grad_out.extent(0) != n_batch ||
      grad_out.extent(1) != spec.out_channels || grad_out.extent(2) != oh ||
      grad_out.extent(3) != ow)
    throw std::invalid_argument("conv backward: grad_out shape mismatch");

  const std::size_t o = spec.out_channels, ckk = spec.in_channels * spec.kernel * spec.kernel;
  const std::size_t cols = n_batch * oh * ow, p = oh * ow;

  // Regroup grad_out from [n][o][p] to [o][n*p] to match the im2col layout.
  std::vector<double> go_mat(o * cols);
  const double* god = grad_out.data();
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t oc = 0; oc < o; ++oc) {
      const double* src = god + (n * o + oc) * p;
      double* dst = go_mat.data() + oc * cols + n * p;
      for (std::size_t i = 0; i < p; ++i) dst[i] = src[i];
    }

  ConvGradients g;
  g.grad_bias = Tensor({o});
  for (std::size_t oc = 0; oc < o; ++oc) {
    double sum = 0.0;
    const double* row = go_mat.data() + oc * cols;
    for (std::size_t i = 0; i < cols; ++i) sum += row[i];
    g.grad_bias[oc] = sum;
  }

  const std::vector<double> col = detail::im2col(x, spec, oh, ow);
  g.grad_weights = Tensor({o, spec.in_channels, spec.kernel, spec.kernel});
  detail::dgemm(false, true, o, ckk, cols, 1.0, go_mat.data(), cols, col.data(), cols, 0.0,
                g.grad_weights.data(), ckk);

  if (need_grad_input) {
    std::vector<double> gcol(ckk * cols);
    detail::dgemm(true, false, ckk, cols, o, 1.0, weights.data(), ckk, go_mat.data(), cols, 0.0,
                  gcol.data(), cols);
    g.grad_input = Tensor(x.shape());
    detail::col2im_add(gcol, spec, oh, ow, g.grad_input);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // per output cell, flat h*W+w index; max mode only
};

inline PoolResult pool_forward(const Tensor& x, const PoolSpec& spec) {
  if (x.rank() != 4) throw std::invalid_argument("pool: input must be N x C x H x W");
  const std::size_t n_batch = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t oh = pool_out_extent(h, spec);
  const std::size_t ow = pool_out_extent(w, spec);
  PoolResult r;
  r.output = Tensor({n_batch, c, oh, ow});
  const bool is_max = spec.mode == PoolMode::kMax;
  if (is_max) r.argmax.assign(r.output.size(), 0);

  const double* xd = x.data();
  double* od = r.output.data();
  std::size_t out_idx = 0;
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = xd + (n * c + ch) * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        const std::size_t hs = i * spec.stride;
        const std::size_t he = std::min(hs + spec.kernel, h);
        for (std::size_t j = 0; j < ow; ++j, ++out_idx) {
          const std::size_t ws = j * spec.stride;
          const std::size_t we = std::min(ws + spec.kernel, w);
          if (is_max) {
            double best = plane[hs * w + ws];
            std::size_t best_at = hs * w + ws;
            for (std::size_t r2 = hs; r2 < he; ++r2)
              for (std::size_t c2 = ws; c2 < we; ++c2)
                if (plane[r2 * w + c2] > best) {
                  best = plane[r2 * w + c2];
                  best_at = r2 * w + c2;
                }
            od[out_idx] = best;
            r.argmax[out_idx] = best_at;
          } else {
            double sum = 0.0;
            for (std::size_t r2 = hs; r2 < he; ++r2)
              for (std::size_t c2 = ws; c2 < we; ++c2) sum += plane[r2 * w + c2];
            od[out_idx] = sum / static_cast<double>((he - hs) * (we - ws));
          }
        }
      }
    }
  return r;
}

inline Tensor pool_backward(const Tensor& x, const PoolSpec& spec,
                            const std::vector<std::size_t>& argmax, const Tensor& grad_out) {
  const std::size_t n_batch = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t oh = pool_out_extent(h, spec);
  const std::size_t ow = pool_out_extent(w, spec);
  if (grad_out.rank() != 4 || grad_out.extent(0) != n_batch || grad_out.extent(1) != c ||
      grad_out.extent(2) != oh || grad_out.extent(3) != ow)
    throw std::invalid_argument("pool backward: grad_out shape mismatch");
  const bool is_max = spec.mode == PoolMode::kMax;
  if (is_max && argmax.size() != grad_out.size())
    throw std::invalid_argument("pool backward: stale or missing argmax map for max mode");

  Tensor gx(x.shape());
  double* gxd = gx.data();
  const double* god = grad_out.data();
  std::size_t out_idx = 0;
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* plane = gxd + (n * c + ch) * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        const std::size_t hs = i * spec.stride;
        const std::size_t he = std::min(hs + spec.kernel, h);
        for (std::size_t j = 0; j < ow; ++j, ++out_idx) {
          if (is_max) {
            plane[argmax[out_idx]] += god[out_idx];
          } else {
            const std::size_t ws = j * spec.stride;
            const std::size_t we = std::min(ws + spec.kernel, w);
            const double share = god[out_idx] / static_cast<double>((he - hs) * (we - ws));
            for (std::size_t r2 = hs; r2 < he; ++r2)
              for (std::size_t c2 = ws; c2 < we; ++c2) plane[r2 * w + c2] += share;
          }
        }
      }
    }
  return gx;
}

// ---------------------------------------------------------------------------
// ReLU

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y[i] < 0.0) y[i] = 0.0;
  return y;
}

// Subgradient at exactly zero is taken as zero.
inline Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  detail::require_same_shape(x, grad_out, "relu backward");
  Tensor gx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > 0.0 ? grad_out[i] : 0.0;
  return gx;
}

// ---------------------------------------------------------------------------
// Local response normalization across channels:
//   b[i] = a[i] / (k + alpha * sum_{j in [i-n/2, i+n/2] clamped} a[j]^2)^beta

inline Tensor lrn_forward(const Tensor& x, const LrnParams& p) {
  p.validate();
  if (x.rank() != 4) throw std::invalid_argument("lrn: input must be N x C x H x W");
  const std::size_t n_batch = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const long half = static_cast<long>(p.n / 2);
  Tensor y(x.shape());
  const double* xd = x.data();
  double* yd = y.data();
  const std::size_t plane = h * w;
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t pos = 0; pos < plane; ++pos) {
      const double* a = xd + n * c * plane + pos;
      double* b = yd + n * c * plane + pos;
      for (long i = 0; i < static_cast<long>(c); ++i) {
        const long lo = std::max(0L, i - half);
        const long hi = std::min(static_cast<long>(c) - 1, i + half);
        double s = 0.0;
        for (long j = lo; j <= hi; ++j) {
          const double v = a[static_cast<std::size_t>(j) * plane];
          s += v * v;
        }
        b[static_cast<std::size_t>(i) * plane] =
            a[static_cast<std::size_t>(i) * plane] * std::pow(p.k + p.alpha * s, -p.beta);
      }
    }
  return y;
}

inline Tensor lrn_backward(const Tensor& x, const LrnParams& p, const Tensor& grad_out) {
  p.validate();
  detail::require_same_shape(x, grad_out, "lrn backward");
  const std::size_t n_batch = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  const long half = static_cast<long>(p.n / 2);
  Tensor gx(x.shape());
  const double* xd = x.data();
  const double* gd = grad_out.data();
  double* od = gx.data();
  const std::size_t plane = h * w;
  std::vector<double> t(c);  // g_i * a_i * S_i^(-beta-1) per channel
  std::vector<double> spow(c);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t pos = 0; pos < plane; ++pos) {
      const double* a = xd + n * c * plane + pos;
      const double* g = gd + n * c * plane + pos;
      double* out = od + n * c * plane + pos;
      for (long i = 0; i < static_cast<long>(c); ++i) {
        const long lo = std::max(0L, i - half);
        const long hi = std::min(static_cast<long>(c) - 1, i + half);
        double s = 0.0;
        for (long j = lo; j <= hi; ++j) {
          const double v = a[static_cast<std::size_t>(j) * plane];
          s += v * v;
        }
        const double base = p.k + p.alpha * s;
        spow[static_cast<std::size_t>(i)] = std::pow(base, -p.beta);
        t[static_cast<std::size_t>(i)] = g[static_cast<std::size_t>(i) * plane] *
                                         a[static_cast<std::size_t>(i) * plane] *
                                         std::pow(base, -p.beta - 1.0);
      }
      for (long m = 0; m < static_cast<long>(c); ++m) {
        const long lo = std::max(0L, m - half);
        const long hi = std::min(static_cast<long>(c) - 1, m + half);
        double acc = 0.0;
        for (long i = lo; i <= hi; ++i) acc += t[static_cast<std::size_t>(i)];
        out[static_cast<std::size_t>(m) * plane] =
            g[static_cast<std::size_t>(m) * plane] * spow[static_cast<std::size_t>(m)] -
            2.0 * p.alpha * p.beta * a[static_cast<std::size_t>(m) * plane] * acc;
      }
    }
  return gx;
}

// ---------------------------------------------------------------------------
// Channel concatenation (the joining step of a parallel convolution block)

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no parts");
  const std::size_t n_batch = parts[0].extent(0), h = parts[0].extent(2),
                    w = parts[0].extent(3);
  std::size_t total_c = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != 4 || t.extent(0) != n_batch || t.extent(2) != h || t.extent(3) != w)
      throw std::invalid_argument("concat: parts must share batch and spatial extents");
    total_c += t.extent(1);
  }
  Tensor out({n_batch, total_c, h, w});
  const std::size_t plane = h * w;
  for (std::size_t n = 0; n < n_batch; ++n) {
    std::size_t c_off = 0;
    for (const Tensor& t : parts) {
      const std::size_t tc = t.extent(1);
      std::copy_n(t.data() + n * tc * plane, tc * plane,
                  out.data() + (n * total_c + c_off) * plane);
      c_off += tc;
    }
  }
  return out;
}

inline std::vector<Tensor> concat_channels_backward(const Tensor& grad_out,
                                                    const std::vector<std::size_t>& part_channels) {
  if (grad_out.rank() != 4) throw std::invalid_argument("concat backward: rank must be 4");
  std::size_t total = 0;
  for (std::size_t c : part_channels) total += c;
  if (total != grad_out.extent(1))
    throw std::invalid_argument("concat backward: channel counts do not sum to grad channels");
  const std::size_t n_batch = grad_out.extent(0), h = grad_out.extent(2), w = grad_out.extent(3);
  const std::size_t plane = h * w;
  std::vector<Tensor> grads;
  grads.reserve(part_channels.size());
  std::size_t c_off = 0;
  for (std::size_t pc : part_channels) {
    Tensor g({n_batch, pc, h, w});
    for (std::size_t n = 0; n < n_batch; ++n)
      std::copy_n(grad_out.data() + (n * grad_out.extent(1) + c_off) * plane, pc * plane,
                  g.data() + n * pc * plane);
    grads.push_back(std::move(g));
    c_off += pc;
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Fully connected: y = W x + b for a single vector, or row-wise over a batch.

inline Tensor fc_forward(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  const std::size_t out_units = weights.extent(0), in_units = weights.extent(1);
  if (x.rank() == 1) {
    if (x.extent(0) != in_units)
      throw std::invalid_argument("fc: input length does not match in_units");
    Tensor y({out_units});
    detail::dgemm(false, false, out_units, 1, in_units, 1.0, weights.data(), in_units, x.data(),
                  1, 0.0, y.data(), 1);
    for (std::size_t i = 0; i < out_units; ++i) y[i] += bias[i];
    return y;
  }
  if (x.rank() != 2 || x.extent(1) != in_units)
    throw std::invalid_argument("fc: input must be rank 1 or N x in_units");
  const std::size_t n = x.extent(0);
  Tensor y({n, out_units});
  detail::dgemm(false, true, n, out_units, in_units, 1.0, x.data(), in_units, weights.data(),
                in_units, 0.0, y.data(), out_units);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < out_units; ++i) y.at2(r, i) += bias[i];
  return y;
}

inline Tensor fully_connected(const Tensor& x, const FcSpec& spec) {
  spec.validate();
  return fc_forward(x, spec.weights, spec.bias);
}

struct FcGradients {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
};

inline FcGradients fc_backward(const Tensor& x, const Tensor& weights, const Tensor& grad_out) {
  const std::size_t out_units = weights.extent(0), in_units = weights.extent(1);
  FcGradients g;
  if (x.rank() == 1) {
    if (grad_out.rank() != 1 || grad_out.extent(0) != out_units)
      throw std::invalid_argument("fc backward: grad_out shape mismatch");
    g.grad_input = Tensor({in_units});
    detail::dgemm(true, false, in_units, 1, out_units, 1.0, weights.data(), in_units,
                  grad_out.data(), 1, 0.0, g.grad_input.data(), 1);
    g.grad_weights = Tensor({out_units, in_units});
    for (std::size_t o = 0; o < out_units; ++o)
      for (std::size_t i = 0; i < in_units; ++i) g.grad_weights.at2(o, i) = grad_out[o] * x[i];
    g.grad_bias = grad_out;
    return g;
  }
  const std::size_t n = x.extent(0);
  if (grad_out.rank() != 2 || grad_out.extent(0) != n || grad_out.extent(1) != out_units)
    throw std::invalid_argument("fc backward: grad_out shape mismatch");
  g.grad_input = Tensor({n, in_units});
  detail::dgemm(false, false, n, in_units, out_units, 1.0, grad_out.data(), out_units,
                weights.data(), in_units, 0.0, g.grad_input.data(), in_units);
  g.grad_weights = Tensor({out_units, in_units});
  detail::dgemm(true, false, out_units, in_units, n, 1.0, grad_out.data(), out_units, x.data(),
                in_units, 0.0, g.grad_weights.data(), in_units);
  g.grad_bias = Tensor({out_units});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < out_units; ++i) g.grad_bias[i] += grad_out.at2(r, i);
  return g;
}

inline FcGradients fully_connected_backward(const Tensor& x, const FcSpec& spec,
                                            const Tensor& grad_out) {
  spec.validate();
  return fc_backward(x, spec.weights, grad_out);
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy head

struct SoftmaxResult {
  Tensor probabilities;
  double loss = 0.0;
  Tensor grad_logits;
};

// Single sample: z is a K-vector of logits, label in [0, K).
inline SoftmaxResult softmax_cross_entropy(const Tensor& z, std::size_t label) {
  if (z.rank() != 1 || z.extent(0) < 2)
    throw std::invalid_argument("softmax: logits must be a K-vector with K >= 2");
  const std::size_t k = z.extent(0);
  if (label >= k) throw std::invalid_argument("softmax: label out of range");
  SoftmaxResult r;
  r.probabilities = Tensor({k});
  double zmax = z[0];
  for (std::size_t i = 1; i < k; ++i) zmax = std::max(zmax, z[i]);
  double denom = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    r.probabilities[i] = std::exp(z[i] - zmax);
    denom += r.probabilities[i];
  }
  for (std::size_t i = 0; i < k; ++i) r.probabilities[i] /= denom;
  r.loss = -std::log(r.probabilities[label]);
  r.grad_logits = r.probabilities;
  r.grad_logits[label] -= 1.0;
  return r;
}

// Batch: rows of Z are per-sample logits; loss is the mean over the batch and
// grad_logits is already divided by N, so downstream gradients are means.
inline SoftmaxResult softmax_cross_entropy_batch(const Tensor& z,
                                                 const std::vector<std::size_t>& labels) {
  if (z.rank() != 2 || z.extent(1) < 2)
    throw std::invalid_argument("softmax: logits must be N x K with K >= 2");
  const std::size_t n = z.extent(0), k = z.extent(1);
  if (labels.size() != n) throw std::invalid_argument("softmax: one label per row required");
  SoftmaxResult r;
  r.probabilities = Tensor({n, k});
  r.grad_logits = Tensor({n, k});
  double total = 0.0;
  for (std::size_t row = 0; row < n; ++row) {
    if (labels[row] >= k) throw std::invalid_argument("softmax: label out of range");
    double zmax = z.at2(row, 0);
    for (std::size_t i = 1; i < k; ++i) zmax = std::max(zmax, z.at2(row, i));
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double e = std::exp(z.at2(row, i) - zmax);
      r.probabilities.at2(row, i) = e;
      denom += e;
    }
    for (std::size_t i = 0; i < k; ++i) r.probabilities.at2(row, i) /= denom;
    total += -std::log(r.probabilities.at2(row, labels[row]));
    for (std::size_t i = 0; i < k; ++i)
      r.grad_logits.at2(row, i) =
          (r.probabilities.at2(row, i) - (i == labels[row] ? 1.0 : 0.0)) / static_cast<double>(n);
  }
  r.loss = total / static_cast<double>(n);
  return r;
}

}  // namespace dfu
