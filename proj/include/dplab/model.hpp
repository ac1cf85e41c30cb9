#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dplab/error.hpp"
#include "dplab/layers.hpp"
#include "dplab/ops.hpp"
#include "dplab/rng.hpp"
#include "dplab/tensor.hpp"

namespace dplab {

enum class LayerKind {
  Conv,
  MaxPool,
  Dense,
  Activation,
  BatchNorm,
  LayerNorm,
  Dropout,
  Softmax
};

enum class Arch { MnistCnn, Cifar10Cnn };

inline const char* to_string(Arch a) {
  return a == Arch::MnistCnn ? "mnist_cnn" : "cifar10_cnn";
}

struct LayerSpec {
  LayerKind kind{};
  int filters = 0;   // Conv
  int kernel = 0;    // Conv / MaxPool
  int stride = 1;    // Conv / MaxPool
  int padding = 0;   // Conv
  int units = 0;     // Dense
  ActivationKind act = ActivationKind::ReLU;  // Activation
  double bound_a = 0.0;                       // Activation (BoundedReLU)
  int axis = 0;      // BatchNorm / LayerNorm
  double rate = 0.0; // Dropout

  static LayerSpec conv(int filters, int kernel, int stride, int padding) {
    LayerSpec s;
    s.kind = LayerKind::Conv;
    s.filters = filters;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return s;
  }
  static LayerSpec maxpool(int kernel, int stride) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool;
    s.kernel = kernel;
    s.stride = stride;
    return s;
  }
  static LayerSpec dense(int units) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.units = units;
    return s;
  }
  static LayerSpec activation(ActivationKind k, double a = 0.0) {
    LayerSpec s;
    s.kind = LayerKind::Activation;
    s.act = k;
    s.bound_a = a;
    return s;
  }
  static LayerSpec norm(NormKind k, int axis) {
    LayerSpec s;
    s.kind = k == NormKind::BatchNorm ? LayerKind::BatchNorm
                                      : LayerKind::LayerNorm;
    s.axis = axis;
    return s;
  }
  static LayerSpec dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::Dropout;
    s.rate = rate;
    return s;
  }
  static LayerSpec softmax() {
    LayerSpec s;
    s.kind = LayerKind::Softmax;
    return s;
  }

  bool is_norm() const {
    return kind == LayerKind::BatchNorm || kind == LayerKind::LayerNorm;
  }
  NormKind norm_kind() const {
    return kind == LayerKind::BatchNorm ? NormKind::BatchNorm
                                        : NormKind::LayerNorm;
  }
};

/// A feed-forward chain with per-layer parameters and BatchNorm buffers.
struct Model {
  std::vector<LayerSpec> layers;
  std::vector<Tensor> weights;  // conv filters / dense weights / norm scale
  std::vector<Tensor> biases;   // conv+dense bias / norm shift
  std::vector<Tensor> running_mean;  // BatchNorm axis-0 buffers
  std::vector<Tensor> running_var;
  std::vector<std::size_t> input_shape;  // [C,H,W]
  Mode mode = Mode::Train;

  std::size_t param_count() const {
    std::size_t total = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      total += weights[i].numel() + biases[i].numel();
    }
    return total;
  }

  /// Flat offset of layer i's parameter block (weights then bias).
  std::size_t param_offset(std::size_t layer) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < layer; ++i) {
      off += weights[i].numel() + biases[i].numel();
    }
    return off;
  }

  bool has_batch_stat_norm() const {
    for (const auto& l : layers) {
      if (l.is_norm() && l.axis == 0) return true;
    }
    return false;
  }

  bool has_dropout() const {
    for (const auto& l : layers) {
      if (l.kind == LayerKind::Dropout && l.rate > 0.0) return true;
    }
    return false;
  }

  std::vector<double> flat_params() const {
    std::vector<double> out;
    out.reserve(param_count());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.insert(out.end(), weights[i].vec().begin(), weights[i].vec().end());
      out.insert(out.end(), biases[i].vec().begin(), biases[i].vec().end());
    }
    return out;
  }

  void set_flat_params(std::span<const double> p) {
    if (p.size() != param_count()) {
      throw ShapeError(msg("expected ", param_count(), " parameters, got ",
                           p.size()));
    }
    std::size_t off = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (auto& v : weights[i].vec()) v = p[off++];
      for (auto& v : biases[i].vec()) v = p[off++];
    }
  }

  /// params -= lr * direction
  void apply_update(std::span<const double> direction, double lr) {
    if (direction.size() != param_count()) {
      throw ShapeError(msg("update direction has ", direction.size(),
                           " entries, model has ", param_count()));
    }
    std::size_t off = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (auto& v : weights[i].vec()) v -= lr * direction[off++];
      for (auto& v : biases[i].vec()) v -= lr * direction[off++];
    }
  }
};

namespace detail {

inline std::vector<std::size_t> layer_output_shape(
    const LayerSpec& l, const std::vector<std::size_t>& in) {
  switch (l.kind) {
    case LayerKind::Conv: {
      if (in.size() != 3) {
        throw ShapeError(msg("conv layer needs [C,H,W] input, got rank ",
                             in.size()));
      }
      const long hp = static_cast<long>(in[1]) + 2 * l.padding;
      const long wp = static_cast<long>(in[2]) + 2 * l.padding;
      if (l.kernel > hp || l.kernel > wp) {
        throw ShapeError(msg("conv kernel ", l.kernel, " exceeds padded input ",
                             hp, "x", wp));
      }
      return {static_cast<std::size_t>(l.filters),
              static_cast<std::size_t>((hp - l.kernel) / l.stride + 1),
              static_cast<std::size_t>((wp - l.kernel) / l.stride + 1)};
    }
    case LayerKind::MaxPool: {
      if (in.size() != 3) {
        throw ShapeError("maxpool layer needs [C,H,W] input");
      }
      if (static_cast<std::size_t>(l.kernel) > in[1] ||
          static_cast<std::size_t>(l.kernel) > in[2]) {
        throw ShapeError(msg("maxpool window ", l.kernel, " exceeds input ",
                             in[1], "x", in[2]));
      }
      return {in[0], (in[1] - l.kernel) / l.stride + 1,
              (in[2] - l.kernel) / l.stride + 1};
    }
    case LayerKind::Dense: {
      std::size_t d = 1;
      for (auto v : in) d *= v;
      (void)d;
      return {static_cast<std::size_t>(l.units)};
    }
    default:
      return in;  // shape preserved
  }
}

}  // namespace detail

/// Per-sample shapes each layer sees, index 0 being the model input.
inline std::vector<std::vector<std::size_t>> infer_shapes(
    const std::vector<LayerSpec>& layers,
    const std::vector<std::size_t>& input_shape) {
  std::vector<std::vector<std::size_t>> shapes{input_shape};
  for (const auto& l : layers) {
    shapes.push_back(detail::layer_output_shape(l, shapes.back()));
  }
  return shapes;
}

/// Allocates and zero-initializes parameter tensors for a layer chain.
inline Model make_model(std::vector<LayerSpec> layers,
                        std::vector<std::size_t> input_shape) {
  Model m;
  m.layers = std::move(layers);
  m.input_shape = std::move(input_shape);
  const auto shapes = infer_shapes(m.layers, m.input_shape);
  m.weights.resize(m.layers.size());
  m.biases.resize(m.layers.size());
  m.running_mean.resize(m.layers.size());
  m.running_var.resize(m.layers.size());
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const auto& in = shapes[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        const std::size_t c = in[0];
        m.weights[i] = Tensor({static_cast<std::size_t>(l.filters), c,
                               static_cast<std::size_t>(l.kernel),
                               static_cast<std::size_t>(l.kernel)});
        m.biases[i] = Tensor({static_cast<std::size_t>(l.filters)});
        break;
      }
      case LayerKind::Dense: {
        std::size_t d = 1;
        for (auto v : in) d *= v;
        m.weights[i] = Tensor({d, static_cast<std::size_t>(l.units)});
        m.biases[i] = Tensor({static_cast<std::size_t>(l.units)});
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::LayerNorm: {
        const std::size_t c = in[0];
        m.weights[i] = Tensor({c}, 1.0);  // scale
        m.biases[i] = Tensor({c}, 0.0);   // shift
        if (l.kind == LayerKind::BatchNorm && l.axis == 0) {
          m.running_mean[i] = Tensor({c}, 0.0);
          m.running_var[i] = Tensor({c}, 1.0);
        }
        break;
      }
      default:
        break;
    }
  }
  return m;
}

/// Glorot-uniform weights, zero biases, unit norm scales. Deterministic
/// given the generator state.
inline void init_params(Model& m, Rng& rng) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    if (l.kind == LayerKind::Conv) {
      const std::size_t c = m.weights[i].dim(1);
      const double fan_in = static_cast<double>(c * l.kernel * l.kernel);
      const double fan_out = static_cast<double>(l.filters * l.kernel * l.kernel);
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& v : m.weights[i].vec()) v = rng.uniform(-limit, limit);
      for (auto& v : m.biases[i].vec()) v = 0.0;
    } else if (l.kind == LayerKind::Dense) {
      const double fan_in = static_cast<double>(m.weights[i].dim(0));
      const double fan_out = static_cast<double>(m.weights[i].dim(1));
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& v : m.weights[i].vec()) v = rng.uniform(-limit, limit);
      for (auto& v : m.biases[i].vec()) v = 0.0;
    }
  }
}

/// The two fixed architectures. The requested activation is substituted at
/// every activation site; optional normalization follows each conv
/// activation, optional dropout follows each conv block and the hidden dense
/// activation.
inline Model build_model(Arch arch, ActivationKind activation,
                         std::optional<double> bound_a = std::nullopt,
                         std::optional<std::pair<NormKind, int>> norm =
                             std::nullopt,
                         std::optional<double> dropout_p = std::nullopt) {
  double a = 0.0;
  if (activation == ActivationKind::BoundedReLU) {
    if (!bound_a.has_value()) {
      throw ConfigError("bounded_relu requires a bound value");
    }
    a = *bound_a;
    if (a <= 0.0) throw ConfigError(msg("bounded_relu bound must be > 0, got ", a));
  }
  if (dropout_p.has_value() && (*dropout_p < 0.0 || *dropout_p >= 1.0)) {
    throw ConfigError(msg("dropout rate must be in [0,1), got ", *dropout_p));
  }
  if (norm.has_value() && norm->second != 0 && norm->second != 1) {
    throw ConfigError(msg("norm axis must be 0 or 1, got ", norm->second));
  }

  std::vector<LayerSpec> layers;
  auto act = [&] { layers.push_back(LayerSpec::activation(activation, a)); };
  auto conv_tail = [&] {
    act();
    if (norm) layers.push_back(LayerSpec::norm(norm->first, norm->second));
    if (dropout_p) layers.push_back(LayerSpec::dropout(*dropout_p));
  };

  std::vector<std::size_t> input_shape;
  if (arch == Arch::MnistCnn) {
    input_shape = {1, 28, 28};
    layers.push_back(LayerSpec::conv(16, 8, 2, 3));
    conv_tail();
    layers.push_back(LayerSpec::maxpool(2, 1));
    layers.push_back(LayerSpec::conv(32, 4, 2, 0));
    conv_tail();
    layers.push_back(LayerSpec::maxpool(2, 1));
  } else {
    input_shape = {3, 32, 32};
    for (int filters : {32, 64, 128, 256}) {
      layers.push_back(LayerSpec::conv(filters, 3, 1, 1));
      conv_tail();
      layers.push_back(LayerSpec::maxpool(2, 2));
    }
  }
  layers.push_back(LayerSpec::dense(32));
  act();
  if (dropout_p) layers.push_back(LayerSpec::dropout(*dropout_p));
  layers.push_back(LayerSpec::dense(10));
  layers.push_back(LayerSpec::softmax());
  return make_model(std::move(layers), std::move(input_shape));
}

struct LayerCache {
  Tensor input;  // layer input as received (dense: pre-flatten)
  MaxPoolResult pool;
  NormCache norm;
  Tensor dropout_mask;
};

struct ForwardResult {
  Tensor logits;
  Tensor probs;
  std::vector<LayerCache> caches;
};

/// Cross-sample state fixed for one full batch so that microbatched passes
/// reproduce the full-batch computation: batch-statistic norm moments and
/// full-batch dropout masks.
struct BatchContext {
  std::vector<Tensor> norm_mean;  // per layer, empty when unused
  std::vector<Tensor> norm_var;
  std::vector<Tensor> dropout_mask;  // per layer, leading dim = batch
};

namespace detail {

inline Tensor slice_batch(const Tensor& t, std::size_t offset,
                          std::size_t count) {
  std::vector<std::size_t> shape = t.shape();
  const std::size_t row = t.numel() / t.dim(0);
  shape[0] = count;
  Tensor out(shape);
  std::copy(t.data() + offset * row, t.data() + (offset + count) * row,
            out.data());
  return out;
}

}  // namespace detail

/// Forward pass. rng supplies dropout masks in Train mode when ctx does not.
/// ctx (with ctx_offset, the chunk's position in the full batch) replays
/// precomputed batch statistics and masks.
inline ForwardResult forward(Model& model, const Tensor& batch,
                             Rng* rng = nullptr,
                             const BatchContext* ctx = nullptr,
                             std::size_t ctx_offset = 0,
                             bool update_running = true) {
  if (batch.rank() < 2 || batch.dim(0) == 0) {
    throw ShapeError(msg("forward expects a non-empty batch, got ",
                         batch.shape_str()));
  }
  {
    std::vector<std::size_t> per_sample(batch.shape().begin() + 1,
                                        batch.shape().end());
    if (per_sample != model.input_shape) {
      throw ShapeError(msg("batch shape ", batch.shape_str(),
                           " does not match model input ",
                           Tensor::shape_str(model.input_shape)));
    }
  }
  const std::size_t n = batch.dim(0);
  ForwardResult res;
  res.caches.resize(model.layers.size());
  Tensor x = batch;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    auto& cache = res.caches[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        cache.input = x;
        Tensor y = conv2d(x, model.weights[i], l.stride, l.padding);
        const std::size_t per_map = y.dim(2) * y.dim(3);
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t f = 0; f < y.dim(1); ++f) {
            const double b = model.biases[i][f];
            double* p = y.data() + (ni * y.dim(1) + f) * per_map;
            for (std::size_t j = 0; j < per_map; ++j) p[j] += b;
          }
        }
        x = std::move(y);
        break;
      }
      case LayerKind::MaxPool: {
        cache.input = x;
        cache.pool = maxpool2d(x, l.kernel, l.stride);
        x = cache.pool.output;
        break;
      }
      case LayerKind::Dense: {
        cache.input = x;
        Tensor flat = x.rank() == 2
                          ? x
                          : x.reshape({n, x.numel() / n});
        Tensor y = matmul(flat, model.weights[i]);
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t u = 0; u < y.dim(1); ++u) {
            y(ni, u) += model.biases[i][u];
          }
        }
        x = std::move(y);
        break;
      }
      case LayerKind::Activation: {
        cache.input = x;
        x = activation_forward(l.act, l.bound_a, x);
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::LayerNorm: {
        cache.input = x;
        const Tensor* om = nullptr;
        const Tensor* ov = nullptr;
        if (ctx != nullptr && l.axis == 0 && model.mode == Mode::Train &&
            ctx->norm_mean[i].numel() > 0) {
          om = &ctx->norm_mean[i];
          ov = &ctx->norm_var[i];
        }
        NormResult nr = norm_forward(
            l.norm_kind(), l.axis, x, model.weights[i], model.biases[i],
            model.mode, &model.running_mean[i], &model.running_var[i],
            update_running, om, ov);
        cache.norm = std::move(nr.cache);
        x = std::move(nr.y);
        break;
      }
      case LayerKind::Dropout: {
        if (model.mode == Mode::Eval || l.rate == 0.0) break;
        cache.input = x;
        if (ctx != nullptr && ctx->dropout_mask[i].numel() > 0) {
          cache.dropout_mask =
              detail::slice_batch(ctx->dropout_mask[i], ctx_offset, n);
        } else {
          if (rng == nullptr) {
            throw StateError("dropout in Train mode needs a generator");
          }
          cache.dropout_mask = dropout_mask(*rng, x.shape(), l.rate);
        }
        for (std::size_t j = 0; j < x.numel(); ++j) {
          x[j] *= cache.dropout_mask[j];
        }
        break;
      }
      case LayerKind::Softmax: {
        if (x.rank() != 2) {
          throw ShapeError(msg("softmax layer expects rank-2 input, got ",
                               x.shape_str()));
        }
        res.logits = x;
        x = softmax_rows(x);
        break;
      }
    }
  }
  if (model.layers.empty() || model.layers.back().kind != LayerKind::Softmax) {
    throw ConfigError("model must end with a softmax layer");
  }
  res.probs = std::move(x);
  return res;
}

/// Precomputes the cross-sample state (batch-stat norm moments, dropout
/// masks) for one full batch, updating BatchNorm running buffers once.
inline BatchContext make_batch_context(Model& model, const Tensor& batch,
                                       Rng* rng) {
  BatchContext ctx;
  ctx.norm_mean.resize(model.layers.size());
  ctx.norm_var.resize(model.layers.size());
  ctx.dropout_mask.resize(model.layers.size());
  if (model.mode == Mode::Eval) return ctx;

  const bool needs_stats = model.has_batch_stat_norm();
  const bool needs_masks = model.has_dropout();
  if (!needs_stats && !needs_masks) return ctx;

  // Masks must be drawn independently of the stats pass, in a fixed order.
  const auto shapes = infer_shapes(model.layers, model.input_shape);
  const std::size_t n = batch.dim(0);
  if (needs_masks) {
    if (rng == nullptr) {
      throw StateError("dropout in Train mode needs a generator");
    }
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      const auto& l = model.layers[i];
      if (l.kind != LayerKind::Dropout || l.rate == 0.0) continue;
      std::vector<std::size_t> shape = shapes[i];
      shape.insert(shape.begin(), n);
      ctx.dropout_mask[i] = dropout_mask(*rng, shape, l.rate);
    }
  }
  if (needs_stats) {
    ForwardResult stats_pass = forward(model, batch, nullptr, &ctx, 0, true);
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      const auto& l = model.layers[i];
      if (l.is_norm() && l.axis == 0) {
        ctx.norm_mean[i] = stats_pass.caches[i].norm.mean;
        ctx.norm_var[i] = stats_pass.caches[i].norm.var;
      }
    }
  }
  return ctx;
}

/// Per-example flattened gradients for one batch.
struct PerSampleGradients {
  std::size_t batch_size = 0;
  std::size_t param_len = 0;
  std::vector<double> grads;  // batch_size x param_len, row-major
  std::vector<double> norms;  // pre-clip L2 norms

  std::span<double> sample(std::size_t i) {
    return {grads.data() + i * param_len, param_len};
  }
  std::span<const double> sample(std::size_t i) const {
    return {grads.data() + i * param_len, param_len};
  }
};

namespace detail {

struct BackwardSink {
  // per-sample mode
  PerSampleGradients* ps = nullptr;
  // reduced mode
  std::vector<double>* reduced = nullptr;

  void add(std::size_t sample, std::size_t flat_offset, double value) const {
    if (ps != nullptr) {
      ps->grads[sample * ps->param_len + flat_offset] += value;
    } else {
      (*reduced)[flat_offset] += value;
    }
  }
};

// Shared backward walk. upstream delta starts at (probs - onehot), the
// gradient of the per-sample cross-entropy loss wrt logits.
inline void backward_walk(const Model& model, const ForwardResult& fwd,
                          const std::vector<int>& labels,
                          const BackwardSink& sink) {
  const std::size_t n = fwd.probs.dim(0);
  const std::size_t k = fwd.probs.dim(1);
  Tensor delta({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      delta(i, j) = fwd.probs(i, j) - (static_cast<std::size_t>(labels[i]) == j
                                           ? 1.0
                                           : 0.0);
    }
  }

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const auto& l = model.layers[li];
    const auto& cache = fwd.caches[li];
    const std::size_t off = model.param_offset(li);
    switch (l.kind) {
      case LayerKind::Softmax:
        break;  // folded into the initial delta
      case LayerKind::Dense: {
        const Tensor& x = cache.input;
        Tensor flat = x.rank() == 2 ? x : x.reshape({n, x.numel() / n});
        const std::size_t d = flat.dim(1);
        const std::size_t u = delta.dim(1);
        const std::size_t wcount = d * u;
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t di = 0; di < d; ++di) {
            const double xv = flat(ni, di);
            if (xv != 0.0) {
              for (std::size_t ui = 0; ui < u; ++ui) {
                sink.add(ni, off + di * u + ui, xv * delta(ni, ui));
              }
            }
          }
          for (std::size_t ui = 0; ui < u; ++ui) {
            sink.add(ni, off + wcount + ui, delta(ni, ui));
          }
        }
        Tensor d_flat = matmul(delta, model.weights[li], false, true);
        delta = x.rank() == 2 ? std::move(d_flat) : d_flat.reshape(x.shape());
        break;
      }
      case LayerKind::Conv: {
        // Bias gradient: sum of delta over each feature map.
        const std::size_t f = delta.dim(1);
        const std::size_t per_map = delta.dim(2) * delta.dim(3);
        const std::size_t wcount = model.weights[li].numel();
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t fi = 0; fi < f; ++fi) {
            const double* p = delta.data() + (ni * f + fi) * per_map;
            double acc = 0.0;
            for (std::size_t j = 0; j < per_map; ++j) acc += p[j];
            sink.add(ni, off + wcount + fi, acc);
          }
        }
        Conv2dGrads g =
            conv2d_backward(cache.input, model.weights[li], delta, l.stride,
                            l.padding, sink.ps != nullptr);
        if (sink.ps != nullptr) {
          const std::size_t fsize = wcount;
          for (std::size_t ni = 0; ni < n; ++ni) {
            const double* src = g.d_filters.data() + ni * fsize;
            double* dst = sink.ps->grads.data() + ni * sink.ps->param_len + off;
            for (std::size_t j = 0; j < fsize; ++j) dst[j] += src[j];
          }
        } else {
          const double* src = g.d_filters.data();
          for (std::size_t j = 0; j < wcount; ++j) {
            (*sink.reduced)[off + j] += src[j];
          }
        }
        delta = std::move(g.d_input);
        break;
      }
      case LayerKind::MaxPool:
        delta = maxpool2d_backward(cache.pool, delta, cache.input.shape());
        break;
      case LayerKind::Activation:
        delta = activation_backward(l.act, l.bound_a, cache.input, delta);
        break;
      case LayerKind::BatchNorm:
      case LayerKind::LayerNorm: {
        NormGrads g = norm_backward(l.axis, cache.input, model.weights[li],
                                    cache.norm, delta);
        const std::size_t feats = model.weights[li].numel();
        for (std::size_t ni = 0; ni < n; ++ni) {
          for (std::size_t fi = 0; fi < feats; ++fi) {
            sink.add(ni, off + fi, g.d_gamma_ps(ni, fi));
            sink.add(ni, off + feats + fi, g.d_beta_ps(ni, fi));
          }
        }
        delta = std::move(g.d_input);
        break;
      }
      case LayerKind::Dropout: {
        if (cache.dropout_mask.numel() == 0) break;  // eval or rate 0
        for (std::size_t j = 0; j < delta.numel(); ++j) {
          delta[j] *= cache.dropout_mask[j];
        }
        break;
      }
    }
  }
}

inline double mean_cross_entropy(const Tensor& probs,
                                 const std::vector<int>& labels) {
  const std::size_t n = probs.dim(0);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::max(probs(i, static_cast<std::size_t>(labels[i])),
                              1e-300);
    loss -= std::log(p);
  }
  return loss / static_cast<double>(n);
}

inline void check_labels(const Tensor& probs, const std::vector<int>& labels) {
  if (labels.size() != probs.dim(0)) {
    throw ShapeError(msg("got ", labels.size(), " labels for batch of ",
                         probs.dim(0)));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= probs.dim(1)) {
      throw ValueError(msg("label ", y, " outside [0,", probs.dim(1), ")"));
    }
  }
}

}  // namespace detail

/// Per-example gradients of the per-example cross-entropy loss, plus the
/// batch mean loss. Requires Train mode.
inline std::pair<PerSampleGradients, double> backward_per_sample(
    const Model& model, const ForwardResult& fwd,
    const std::vector<int>& labels) {
  if (model.mode != Mode::Train) {
    throw StateError("backward_per_sample requires Train mode");
  }
  detail::check_labels(fwd.probs, labels);
  PerSampleGradients psg;
  psg.batch_size = fwd.probs.dim(0);
  psg.param_len = model.param_count();
  psg.grads.assign(psg.batch_size * psg.param_len, 0.0);
  detail::BackwardSink sink;
  sink.ps = &psg;
  detail::backward_walk(model, fwd, labels, sink);
  psg.norms.resize(psg.batch_size);
  for (std::size_t i = 0; i < psg.batch_size; ++i) {
    psg.norms[i] = l2_norm(std::span<const double>(psg.sample(i)));
  }
  return {std::move(psg), detail::mean_cross_entropy(fwd.probs, labels)};
}

/// Gradient of the batch mean loss, reduced over samples in fixed index
/// order. Independent aggregation route from backward_per_sample.
inline std::pair<std::vector<double>, double> backward_batch(
    const Model& model, const ForwardResult& fwd,
    const std::vector<int>& labels) {
  if (model.mode != Mode::Train) {
    throw StateError("backward_batch requires Train mode");
  }
  detail::check_labels(fwd.probs, labels);
  std::vector<double> grad(model.param_count(), 0.0);
  detail::BackwardSink sink;
  sink.reduced = &grad;
  detail::backward_walk(model, fwd, labels, sink);
  const double inv_n = 1.0 / static_cast<double>(fwd.probs.dim(0));
  for (auto& v : grad) v *= inv_n;
  return {std::move(grad), detail::mean_cross_entropy(fwd.probs, labels)};
}

}  // namespace dplab
