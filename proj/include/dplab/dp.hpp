#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dplab/accountant.hpp"
#include "dplab/data.hpp"
#include "dplab/error.hpp"
#include "dplab/model.hpp"
#include "dplab/rng.hpp"

namespace dplab {

enum class Sampling { Poisson, Shuffle };

/// DPSGD hyperparameters.
struct DpConfig {
  double clip_c = 1.0;   // per-sample gradient norm bound C
  double sigma = 1.0;    // noise multiplier (overridden per schedule phase)
  double lr = 0.1;
  std::size_t batch_size = 256;
  double delta = 1e-5;
  Sampling sampling = Sampling::Poisson;
  std::size_t microbatch = 64;  // per-sample gradient chunk size

  void validate() const {
    if (clip_c <= 0.0) throw ValueError(msg("clip threshold must be > 0, got ", clip_c));
    if (sigma < 0.0) throw ValueError(msg("sigma must be >= 0, got ", sigma));
    if (lr < 0.0) throw ValueError(msg("learning rate must be >= 0, got ", lr));
    if (batch_size < 1) throw ValueError("batch size must be >= 1");
    if (delta <= 0.0 || delta >= 1.0) throw ValueError(msg("delta must be in (0,1), got ", delta));
  }
};

/// Plain-SGD baseline parameters.
struct PlainConfig {
  double lr = 0.1;
  std::size_t batch_size = 256;
};

/// Rescales each per-sample gradient to norm at most clip_c:
/// g_i <- g_i * min(1, C / ||g_i||).
inline PerSampleGradients clip_per_sample(PerSampleGradients g, double clip_c) {
  if (clip_c <= 0.0) {
    throw ValueError(msg("clip threshold must be > 0, got ", clip_c));
  }
  for (std::size_t i = 0; i < g.batch_size; ++i) {
    const double norm = g.norms[i];
    if (norm > clip_c) {
      const double scale = clip_c / norm;
      for (double& v : g.sample(i)) v *= scale;
    }
  }
  return g;
}

/// (1/b) * (sum_i g_i + N(0, sigma^2 C^2 I)): one noise draw on the batch
/// sum, then averaging. Inputs are assumed already clipped.
inline std::vector<double> noisy_aggregate(const PerSampleGradients& clipped,
                                           double sigma, double clip_c,
                                           Rng& rng) {
  if (sigma < 0.0) throw ValueError(msg("sigma must be >= 0, got ", sigma));
  if (clipped.batch_size == 0) throw ValueError("empty batch");
  std::vector<double> agg(clipped.param_len, 0.0);
  for (std::size_t i = 0; i < clipped.batch_size; ++i) {
    axpy(1.0, clipped.sample(i), agg);
  }
  if (sigma > 0.0) {
    const double noise_std = sigma * clip_c;
    for (auto& v : agg) v += noise_std * rng.gaussian();
  }
  const double inv_b = 1.0 / static_cast<double>(clipped.batch_size);
  for (auto& v : agg) v *= inv_b;
  return agg;
}

struct StepMetrics {
  double mean_loss = 0.0;
  double mean_preclip_norm = 0.0;
  double max_preclip_norm = 0.0;
  double clip_fraction = 0.0;  // fraction of samples with norm > C
  std::size_t batch_size = 0;
};

/// One DPSGD update on an explicit batch: per-sample backward (in
/// microbatches), clip, single noise draw, average, descend.
inline StepMetrics dpsgd_step(Model& model, const Tensor& batch,
                              const std::vector<int>& labels,
                              const DpConfig& cfg, Rng& rng) {
  cfg.validate();
  if (model.mode != Mode::Train) throw StateError("dpsgd_step requires Train mode");
  const std::size_t n = batch.dim(0);
  if (n == 0) throw ValueError("empty batch");

  Rng dropout_rng = rng.split();
  BatchContext ctx = make_batch_context(model, batch, &dropout_rng);

  StepMetrics metrics;
  metrics.batch_size = n;
  std::vector<double> sum(model.param_count(), 0.0);
  double loss_weighted = 0.0;
  const std::size_t chunk = std::max<std::size_t>(1, cfg.microbatch);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    std::vector<std::size_t> rows(count);
    for (std::size_t i = 0; i < count; ++i) rows[i] = start + i;
    Tensor sub = detail::slice_batch(batch, start, count);
    std::vector<int> sub_labels(labels.begin() + start,
                                labels.begin() + start + count);
    ForwardResult fwd = forward(model, sub, nullptr, &ctx, start,
                                /*update_running=*/false);
    auto [psg, loss] = backward_per_sample(model, fwd, sub_labels);
    loss_weighted += loss * static_cast<double>(count);
    for (double norm : psg.norms) {
      metrics.mean_preclip_norm += norm;
      metrics.max_preclip_norm = std::max(metrics.max_preclip_norm, norm);
      if (norm > cfg.clip_c) metrics.clip_fraction += 1.0;
    }
    PerSampleGradients clipped = clip_per_sample(std::move(psg), cfg.clip_c);
    for (std::size_t i = 0; i < clipped.batch_size; ++i) {
      axpy(1.0, clipped.sample(i), sum);
    }
  }
  metrics.mean_loss = loss_weighted / static_cast<double>(n);
  metrics.mean_preclip_norm /= static_cast<double>(n);
  metrics.clip_fraction /= static_cast<double>(n);

  if (cfg.sigma > 0.0) {
    const double noise_std = cfg.sigma * cfg.clip_c;
    for (auto& v : sum) v += noise_std * rng.gaussian();
  }
  const double inv_b = 1.0 / static_cast<double>(n);
  for (auto& v : sum) v *= inv_b;
  model.apply_update(sum, cfg.lr);
  return metrics;
}

/// One plain-SGD update using the batch-reduced backward path.
inline StepMetrics plain_sgd_step(Model& model, const Tensor& batch,
                                  const std::vector<int>& labels, double lr,
                                  Rng& rng) {
  if (model.mode != Mode::Train) throw StateError("plain_sgd_step requires Train mode");
  Rng dropout_rng = rng.split();
  BatchContext ctx = make_batch_context(model, batch, &dropout_rng);
  ForwardResult fwd = forward(model, batch, nullptr, &ctx, 0,
                              /*update_running=*/false);
  auto [grad, loss] = backward_batch(model, fwd, labels);
  model.apply_update(grad, lr);
  StepMetrics metrics;
  metrics.mean_loss = loss;
  metrics.batch_size = batch.dim(0);
  return metrics;
}

/// Classification accuracy in Eval mode, computed in fixed-size chunks.
inline double accuracy(Model& model, const Dataset& data,
                       std::size_t limit = 0) {
  const std::size_t n = limit == 0 ? data.size() : std::min(limit, data.size());
  if (n == 0) return 0.0;
  const Mode saved = model.mode;
  model.mode = Mode::Eval;
  std::size_t correct = 0;
  const std::size_t chunk = 512;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
    Tensor batch = data.gather(idx);
    ForwardResult fwd = forward(model, batch);
    for (std::size_t i = 0; i < count; ++i) {
      std::size_t arg = 0;
      for (std::size_t j = 1; j < fwd.probs.dim(1); ++j) {
        if (fwd.probs(i, j) > fwd.probs(i, arg)) arg = j;
      }
      if (static_cast<int>(arg) == data.labels[start + i]) ++correct;
    }
  }
  model.mode = saved;
  return static_cast<double>(correct) / static_cast<double>(n);
}

struct SchedulePhase {
  double sigma = 0.0;
  int epochs = 0;
};

struct TrainLogRow {
  int epoch = 0;
  double phase_sigma = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double epsilon = std::numeric_limits<double>::infinity();
  double mean_preclip_norm = 0.0;
  double clip_fraction = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;

  void save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError(msg("cannot open ", path, " for writing"));
    out << to_csv();
  }

  std::string to_csv() const {
    std::string s =
        "epoch,phase_sigma,train_acc,test_acc,epsilon,mean_preclip_norm,"
        "clip_fraction\n";
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                    r.epoch, r.phase_sigma, r.train_acc, r.test_acc, r.epsilon,
                    r.mean_preclip_norm, r.clip_fraction);
      s += buf;
    }
    return s;
  }
};

struct TrainOptions {
  std::size_t train_eval_cap = 10000;  // samples used for train-accuracy rows
  std::size_t test_eval_cap = 0;       // 0 = full test set
  bool verbose = false;
};

/// DPSGD training over a noise schedule. Each epoch appends a TrainLog row;
/// the ledger accrues (q, sigma, steps) and prices epsilon after every epoch.
/// Poisson sampling draws ceil(1/q) batches per epoch; Shuffle mode is the
/// accounting-approximate alternative (epsilon still priced as Poisson).
inline TrainLog train(Model& model, const Dataset& train_data,
                      const Dataset& test_data, const DpConfig& cfg,
                      const std::vector<SchedulePhase>& schedule,
                      PrivacyLedger& ledger, Rng& rng,
                      const TrainOptions& opts = {}) {
  cfg.validate();
  if (train_data.size() == 0) throw ValueError("empty training dataset");
  if (schedule.empty()) throw ValueError("DP training needs a non-empty schedule");
  ledger.delta = cfg.delta;

  const double q = std::min(1.0, static_cast<double>(cfg.batch_size) /
                                     static_cast<double>(train_data.size()));
  TrainLog log;
  model.mode = Mode::Train;
  int epoch = 0;
  for (const auto& phase : schedule) {
    DpConfig phase_cfg = cfg;
    phase_cfg.sigma = phase.sigma;
    for (int e = 0; e < phase.epochs; ++e) {
      Rng epoch_rng = rng.split();
      const auto batches =
          cfg.sampling == Sampling::Poisson
              ? poisson_batches(train_data.size(), q, epoch_rng)
              : shuffle_batches(train_data.size(), cfg.batch_size, epoch_rng);
      long steps = 0;
      double norm_sum = 0.0;
      double clip_sum = 0.0;
      std::size_t samples_seen = 0;
      for (const auto& batch_idx : batches) {
        ++steps;  // every emitted batch is a mechanism release
        if (batch_idx.empty()) continue;
        Tensor batch = train_data.gather(batch_idx);
        std::vector<int> labels = train_data.gather_labels(batch_idx);
        StepMetrics m = dpsgd_step(model, batch, labels, phase_cfg, rng);
        norm_sum += m.mean_preclip_norm * static_cast<double>(m.batch_size);
        clip_sum += m.clip_fraction * static_cast<double>(m.batch_size);
        samples_seen += m.batch_size;
      }
      ledger.add_steps(q, phase.sigma, steps);
      ++epoch;

      TrainLogRow row;
      row.epoch = epoch;
      row.phase_sigma = phase.sigma;
      row.train_acc = accuracy(model, train_data, opts.train_eval_cap);
      row.test_acc = accuracy(model, test_data, opts.test_eval_cap);
      row.epsilon = ledger_epsilon(ledger).first;
      if (samples_seen > 0) {
        row.mean_preclip_norm = norm_sum / static_cast<double>(samples_seen);
        row.clip_fraction = clip_sum / static_cast<double>(samples_seen);
      }
      log.rows.push_back(row);
      if (opts.verbose) {
        std::fprintf(stderr,
                     "epoch %d sigma %.3g train %.4f test %.4f eps %.4f\n",
                     epoch, phase.sigma, row.train_acc, row.test_acc,
                     row.epsilon);
      }
    }
  }
  return log;
}

/// Plain-SGD baseline; logs the same schema with epsilon = +inf.
inline TrainLog train_plain(Model& model, const Dataset& train_data,
                            const Dataset& test_data, const PlainConfig& cfg,
                            int epochs, Rng& rng,
                            const TrainOptions& opts = {}) {
  if (train_data.size() == 0) throw ValueError("empty training dataset");
  if (cfg.lr <= 0.0) throw ValueError("learning rate must be > 0");
  TrainLog log;
  model.mode = Mode::Train;
  for (int e = 1; e <= epochs; ++e) {
    Rng epoch_rng = rng.split();
    const auto batches =
        shuffle_batches(train_data.size(), cfg.batch_size, epoch_rng);
    for (const auto& batch_idx : batches) {
      Tensor batch = train_data.gather(batch_idx);
      std::vector<int> labels = train_data.gather_labels(batch_idx);
      plain_sgd_step(model, batch, labels, cfg.lr, rng);
    }
    TrainLogRow row;
    row.epoch = e;
    row.phase_sigma = 0.0;
    row.train_acc = accuracy(model, train_data, opts.train_eval_cap);
    row.test_acc = accuracy(model, test_data, opts.test_eval_cap);
    log.rows.push_back(row);
    if (opts.verbose) {
      std::fprintf(stderr, "epoch %d train %.4f test %.4f\n", e, row.train_acc,
                   row.test_acc);
    }
  }
  return log;
}

}  // namespace dplab
