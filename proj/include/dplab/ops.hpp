#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dplab/error.hpp"
#include "dplab/rng.hpp"
#include "dplab/tensor.hpp"

namespace dplab {

/// a [m,k] times b [k,n]. transpose_a/b apply to the logical operand.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
                     bool transpose_b = false) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError(msg("matmul expects rank-2 operands, got ", a.shape_str(),
                         " and ", b.shape_str()));
  }
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t k = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw ShapeError(msg("matmul inner dimensions differ: ", a.shape_str(),
                         transpose_a ? "^T" : "", " x ", b.shape_str(),
                         transpose_b ? "^T" : ""));
  }
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t lda = a.dim(1);
  const std::size_t ldb = b.dim(1);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = transpose_a ? pa[kk * lda + i] : pa[i * lda + kk];
      if (av == 0.0) continue;
      const double* brow = transpose_b ? nullptr : &pb[kk * ldb];
      double* orow = &po[i * n];
      if (transpose_b) {
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * pb[j * ldb + kk];
      } else {
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  return out;
}

/// Valid cross-correlation with symmetric zero padding.
/// input [N,C,H,W], filters [F,C,k,k] -> [N,F,H',W'] with
/// H' = (H + 2*padding - k)/stride + 1.
inline Tensor conv2d(const Tensor& input, const Tensor& filters, int stride,
                     int padding = 0) {
  if (input.rank() != 4 || filters.rank() != 4) {
    throw ShapeError(msg("conv2d expects rank-4 input and filters, got ",
                         input.shape_str(), " and ", filters.shape_str()));
  }
  if (input.dim(1) != filters.dim(1)) {
    throw ShapeError(msg("conv2d channel mismatch: input ", input.shape_str(),
                         " filters ", filters.shape_str()));
  }
  if (stride < 1) throw ValueError("conv2d stride must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  const std::size_t f = filters.dim(0), k = filters.dim(2);
  if (filters.dim(2) != filters.dim(3)) {
    throw ShapeError(msg("conv2d expects square kernels, got ",
                         filters.shape_str()));
  }
  const long hp = static_cast<long>(h) + 2 * padding;
  const long wp = static_cast<long>(w) + 2 * padding;
  if (static_cast<long>(k) > hp || static_cast<long>(k) > wp) {
    throw ShapeError(msg("conv2d kernel ", k, "x", k,
                         " larger than padded input ", hp, "x", wp,
                         " (input ", input.shape_str(), ")"));
  }
  const std::size_t ho = static_cast<std::size_t>((hp - k) / stride + 1);
  const std::size_t wo = static_cast<std::size_t>((wp - k) / stride + 1);
  Tensor out({n, f, ho, wo});
#pragma omp parallel for schedule(static)
  for (long ni = 0; ni < static_cast<long>(n); ++ni) {
    for (std::size_t fi = 0; fi < f; ++fi) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          const long y0 = static_cast<long>(oy) * stride - padding;
          const long x0 = static_cast<long>(ox) * stride - padding;
          for (std::size_t ci = 0; ci < c; ++ci) {
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long iy = y0 + static_cast<long>(ky);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long ix = x0 + static_cast<long>(kx);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                acc += input(ni, ci, iy, ix) * filters(fi, ci, ky, kx);
              }
            }
          }
          out(ni, fi, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

struct Conv2dGrads {
  Tensor d_input;    // [N,C,H,W]
  Tensor d_filters;  // per_sample ? [N,F,C,k,k] : [F,C,k,k]
};

namespace detail {

inline void conv2d_backward_sample(const Tensor& input, const Tensor& filters,
                            const Tensor& upstream, int stride, int padding,
                            std::size_t ni, Tensor& d_input,
                            double* d_filters) {
  const std::size_t c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t f = filters.dim(0), k = filters.dim(2);
  const std::size_t ho = upstream.dim(2), wo = upstream.dim(3);
  for (std::size_t fi = 0; fi < f; ++fi) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const double up = upstream(ni, fi, oy, ox);
        if (up == 0.0) continue;
        const long y0 = static_cast<long>(oy) * stride - padding;
        const long x0 = static_cast<long>(ox) * stride - padding;
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = y0 + static_cast<long>(ky);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = x0 + static_cast<long>(kx);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              const std::size_t foff = ((fi * c + ci) * k + ky) * k + kx;
              d_input(ni, ci, iy, ix) += up * filters.data()[foff];
              d_filters[foff] += up * input(ni, ci, iy, ix);
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Backward pass of conv2d. With per_sample set, filter gradients are kept
/// separate per example (no batch reduction); otherwise they are reduced in
/// fixed sample order.
inline Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& filters,
                                   const Tensor& upstream, int stride,
                                   int padding, bool per_sample) {
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  const std::size_t f = filters.dim(0), k = filters.dim(2);
  Conv2dGrads g;
  g.d_input = Tensor({n, c, h, w});
  const std::size_t fsize = f * c * k * k;
  if (per_sample) {
    g.d_filters = Tensor({n, f, c, k, k});
#pragma omp parallel for schedule(static)
    for (long ni = 0; ni < static_cast<long>(n); ++ni) {
      detail::conv2d_backward_sample(input, filters, upstream, stride,
                                           padding, ni, g.d_input,
                                           g.d_filters.data() + ni * fsize);
    }
  } else {
    g.d_filters = Tensor({f, c, k, k});
    for (std::size_t ni = 0; ni < n; ++ni) {
      detail::conv2d_backward_sample(input, filters, upstream, stride,
                                            padding, ni, g.d_input,
                                            g.d_filters.data());
    }
  }
  return g;
}

struct MaxPoolResult {
  Tensor output;                   // [N,C,H',W']
  std::vector<std::size_t> argmax;  // flat index into input, per output cell
};

/// 2-D max pooling; argmax indices are retained for backward routing.
inline MaxPoolResult maxpool2d(const Tensor& input, int k, int stride) {
  if (input.rank() != 4) {
    throw ShapeError(msg("maxpool2d expects rank-4 input, got ",
                         input.shape_str()));
  }
  if (k < 1 || stride < 1) throw ValueError("maxpool2d window/stride must be >= 1");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  if (static_cast<std::size_t>(k) > h || static_cast<std::size_t>(k) > w) {
    throw ShapeError(msg("maxpool2d window ", k, "x", k, " exceeds input ",
                         input.shape_str()));
  }
  const std::size_t ho = (h - k) / stride + 1;
  const std::size_t wo = (w - k) / stride + 1;
  MaxPoolResult res{Tensor({n, c, ho, wo}), {}};
  res.argmax.assign(n * c * ho * wo, 0);
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t ci = 0; ci < c; ++ci) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double best = -1e308;
          std::size_t best_idx = 0;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const std::size_t iy = oy * stride + ky;
              const std::size_t ix = ox * stride + kx;
              const std::size_t idx = ((ni * c + ci) * h + iy) * w + ix;
              const double v = input[idx];
              if (v > best) {
                best = v;
                best_idx = idx;
              }
            }
          }
          const std::size_t o = ((ni * c + ci) * ho + oy) * wo + ox;
          res.output[o] = best;
          res.argmax[o] = best_idx;
        }
      }
    }
  }
  return res;
}

/// Routes upstream gradients back to the argmax positions.
inline Tensor maxpool2d_backward(const MaxPoolResult& fwd,
                                 const Tensor& upstream,
                                 const std::vector<std::size_t>& input_shape) {
  Tensor d_input(input_shape);
  for (std::size_t o = 0; o < upstream.numel(); ++o) {
    d_input[fwd.argmax[o]] += upstream[o];
  }
  return d_input;
}

/// i.i.d. N(mean, std^2) tensor from the deterministic stream.
/// std == 0 yields the constant tensor.
inline Tensor gaussian(Rng& rng, std::vector<std::size_t> shape, double mean,
                       double std) {
  if (std < 0.0) throw ValueError(msg("gaussian std must be >= 0, got ", std));
  Tensor out(std::move(shape), mean);
  if (std == 0.0) return out;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = mean + std * rng.gaussian();
  }
  return out;
}

inline double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

inline double l2_norm(const Tensor& t) {
  return l2_norm(std::span<const double>(t.data(), t.numel()));
}

/// y += a * x
inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

}  // namespace dplab
