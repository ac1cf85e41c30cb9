#pragma once

#include <cmath>
#include <cstddef>

#include "dplab/error.hpp"
#include "dplab/ops.hpp"
#include "dplab/rng.hpp"
#include "dplab/tensor.hpp"

namespace dplab {

enum class Mode { Train, Eval };
enum class ActivationKind { ReLU, BoundedReLU, Tanh };
enum class NormKind { BatchNorm, LayerNorm };

inline const char* to_string(ActivationKind k) {
  switch (k) {
    case ActivationKind::ReLU: return "relu";
    case ActivationKind::BoundedReLU: return "bounded_relu";
    case ActivationKind::Tanh: return "tanh";
  }
  return "?";
}

/// Elementwise activation. BoundedReLU clamps to [0, a].
inline Tensor activation_forward(ActivationKind kind, double a,
                                 const Tensor& x) {
  if (kind == ActivationKind::BoundedReLU && a <= 0.0) {
    throw ValueError(msg("bounded_relu bound must be > 0, got ", a));
  }
  Tensor y = x;
  switch (kind) {
    case ActivationKind::ReLU:
      for (auto& v : y.vec()) v = v > 0.0 ? v : 0.0;
      break;
    case ActivationKind::BoundedReLU:
      for (auto& v : y.vec()) v = v <= 0.0 ? 0.0 : (v >= a ? a : v);
      break;
    case ActivationKind::Tanh:
      for (auto& v : y.vec()) v = std::tanh(v);
      break;
  }
  return y;
}

/// upstream times the activation derivative at the recorded forward input x.
/// BoundedReLU' is 1 on (0, a) and 0 elsewhere; ReLU' is 1 on (0, inf).
inline Tensor activation_backward(ActivationKind kind, double a,
                                  const Tensor& x, const Tensor& upstream) {
  if (!x.same_shape(upstream)) {
    throw ShapeError(msg("activation_backward shape mismatch: ", x.shape_str(),
                         " vs ", upstream.shape_str()));
  }
  Tensor g = upstream;
  switch (kind) {
    case ActivationKind::ReLU:
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (x[i] <= 0.0) g[i] = 0.0;
      }
      break;
    case ActivationKind::BoundedReLU:
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (x[i] <= 0.0 || x[i] >= a) g[i] = 0.0;
      }
      break;
    case ActivationKind::Tanh:
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const double t = std::tanh(x[i]);
        g[i] *= 1.0 - t * t;
      }
      break;
  }
  return g;
}

/// Row-wise softmax of [N,K] logits, numerically stabilized.
inline Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw ShapeError(msg("softmax expects rank-2 logits, got ",
                         logits.shape_str()));
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp(logits(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < k; ++j) out(i, j) /= sum;
  }
  return out;
}

namespace detail {

// Normalization reduction geometry. axis 0 groups by feature/channel and
// reduces over the batch (and spatial dims); axis 1 groups by sample and
// reduces over channels (and spatial dims).
struct NormGeom {
  std::size_t groups = 0;       // number of statistic groups
  std::size_t group_size = 0;   // elements reduced per group
  std::size_t features = 0;     // affine parameter count (channels/features)
};

inline NormGeom norm_geometry(int axis, const Tensor& x) {
  if (axis != 0 && axis != 1) {
    throw ValueError(msg("norm axis must be 0 or 1, got ", axis));
  }
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError(msg("normalization expects rank-2 or rank-4 input, got ",
                         x.shape_str()));
  }
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  NormGeom g;
  g.features = c;
  if (axis == 0) {
    g.groups = c;
    g.group_size = n * spatial;
  } else {
    g.groups = n;
    g.group_size = c * spatial;
  }
  return g;
}

// group index of flat element i
inline std::size_t norm_group_of(int axis, const Tensor& x, std::size_t i) {
  const std::size_t c = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::size_t n_idx = i / (c * spatial);
  const std::size_t c_idx = (i / spatial) % c;
  return axis == 0 ? c_idx : n_idx;
}

inline std::size_t norm_feature_of(const Tensor& x, std::size_t i) {
  const std::size_t c = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  return (i / spatial) % c;
}

}  // namespace detail

constexpr double kNormEps = 1e-5;
constexpr double kNormMomentum = 0.9;

struct NormCache {
  Tensor xhat;     // normalized values before affine
  Tensor invstd;   // per group
  Tensor mean;     // per group (the statistics actually used)
  Tensor var;
};

struct NormResult {
  Tensor y;
  NormCache cache;
};

/// Standardize then affine-transform. Batch-statistic norms (axis 0) use and
/// update running moments when kind is BatchNorm; sample-local norms (axis 1)
/// are stateless. override_mean/var, when given, replace the computed batch
/// statistics (used to keep microbatched passes consistent with the full
/// batch).
inline NormResult norm_forward(NormKind kind, int axis, const Tensor& x,
                               const Tensor& gamma, const Tensor& beta,
                               Mode mode, Tensor* running_mean = nullptr,
                               Tensor* running_var = nullptr,
                               bool update_running = true,
                               const Tensor* override_mean = nullptr,
                               const Tensor* override_var = nullptr) {
  const auto geom = detail::norm_geometry(axis, x);
  if (gamma.numel() != geom.features || beta.numel() != geom.features) {
    throw ShapeError(msg("norm affine parameters have ", gamma.numel(),
                         " features, input ", x.shape_str(), " has ",
                         geom.features));
  }

  Tensor mean({geom.groups});
  Tensor var({geom.groups});
  const bool batch_stats = axis == 0;
  const bool use_running = batch_stats && kind == NormKind::BatchNorm &&
                           mode == Mode::Eval && running_mean != nullptr;

  if (override_mean != nullptr && override_var != nullptr) {
    mean = *override_mean;
    var = *override_var;
  } else if (use_running) {
    mean = *running_mean;
    var = *running_var;
  } else {
    if (batch_stats && mode == Mode::Train && kind == NormKind::BatchNorm &&
        x.dim(0) < 2) {
      throw StateError("BatchNorm training requires batch size >= 2");
    }
    for (std::size_t i = 0; i < x.numel(); ++i) {
      mean[detail::norm_group_of(axis, x, i)] += x[i];
    }
    for (std::size_t g = 0; g < geom.groups; ++g) {
      mean[g] /= static_cast<double>(geom.group_size);
    }
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double d = x[i] - mean[detail::norm_group_of(axis, x, i)];
      var[detail::norm_group_of(axis, x, i)] += d * d;
    }
    for (std::size_t g = 0; g < geom.groups; ++g) {
      var[g] /= static_cast<double>(geom.group_size);
    }
    if (batch_stats && kind == NormKind::BatchNorm && mode == Mode::Train &&
        running_mean != nullptr && update_running) {
      for (std::size_t g = 0; g < geom.groups; ++g) {
        (*running_mean)[g] =
            kNormMomentum * (*running_mean)[g] + (1.0 - kNormMomentum) * mean[g];
        (*running_var)[g] =
            kNormMomentum * (*running_var)[g] + (1.0 - kNormMomentum) * var[g];
      }
    }
  }

  Tensor invstd({geom.groups});
  for (std::size_t g = 0; g < geom.groups; ++g) {
    invstd[g] = 1.0 / std::sqrt(var[g] + kNormEps);
  }

  NormResult res{Tensor(x.shape()), {Tensor(x.shape()), invstd, mean, var}};
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t g = detail::norm_group_of(axis, x, i);
    const std::size_t f = detail::norm_feature_of(x, i);
    const double xh = (x[i] - mean[g]) * invstd[g];
    res.cache.xhat[i] = xh;
    res.y[i] = gamma[f] * xh + beta[f];
  }
  return res;
}

/// Convenience overload: unit scale, zero shift, no running state.
inline Tensor norm_forward(NormKind kind, int axis, const Tensor& x,
                           Mode mode) {
  const auto geom = detail::norm_geometry(axis, x);
  Tensor gamma({geom.features}, 1.0);
  Tensor beta({geom.features}, 0.0);
  return norm_forward(kind, axis, x, gamma, beta, mode).y;
}

struct NormGrads {
  Tensor d_input;
  Tensor d_gamma_ps;  // [N, features]
  Tensor d_beta_ps;   // [N, features]
};

/// Backward through normalization. Batch-statistic norms (axis 0) treat the
/// statistics as constants (stop-gradient); sample-local norms (axis 1)
/// differentiate through their own mean/variance exactly.
inline NormGrads norm_backward(int axis, const Tensor& x,
                               const Tensor& gamma, const NormCache& cache,
                               const Tensor& upstream) {
  const auto geom = detail::norm_geometry(axis, x);
  const std::size_t n = x.dim(0);
  NormGrads g{Tensor(x.shape()), Tensor({n, geom.features}),
              Tensor({n, geom.features})};

  const std::size_t c = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t n_idx = i / (c * spatial);
    const std::size_t f = (i / spatial) % c;
    g.d_gamma_ps(n_idx, f) += upstream[i] * cache.xhat[i];
    g.d_beta_ps(n_idx, f) += upstream[i];
  }

  if (axis == 0) {
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const std::size_t f = (i / spatial) % c;
      g.d_input[i] = upstream[i] * gamma[f] * cache.invstd[f];
    }
    return g;
  }

  // axis == 1: per-sample statistics, exact backward.
  const double m = static_cast<double>(geom.group_size);
  Tensor s1({n});  // mean of dxhat per sample
  Tensor s2({n});  // mean of dxhat * xhat per sample
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t n_idx = i / (c * spatial);
    const std::size_t f = (i / spatial) % c;
    const double dxhat = upstream[i] * gamma[f];
    s1[n_idx] += dxhat;
    s2[n_idx] += dxhat * cache.xhat[i];
  }
  for (std::size_t ni = 0; ni < n; ++ni) {
    s1[ni] /= m;
    s2[ni] /= m;
  }
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t n_idx = i / (c * spatial);
    const std::size_t f = (i / spatial) % c;
    const double dxhat = upstream[i] * gamma[f];
    g.d_input[i] =
        cache.invstd[n_idx] * (dxhat - s1[n_idx] - cache.xhat[i] * s2[n_idx]);
  }
  return g;
}

/// Inverted-scaling dropout mask: entries are 0 or 1/(1-p).
inline Tensor dropout_mask(Rng& rng, const std::vector<std::size_t>& shape,
                           double p) {
  if (p < 0.0 || p >= 1.0) {
    throw ValueError(msg("dropout rate must be in [0,1), got ", p));
  }
  Tensor mask(shape, 1.0);
  if (p == 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& v : mask.vec()) v = rng.bernoulli(p) ? 0.0 : keep_scale;
  return mask;
}

}  // namespace dplab
