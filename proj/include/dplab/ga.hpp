#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <vector>

#include "dplab/dp.hpp"
#include "dplab/error.hpp"
#include "dplab/model.hpp"
#include "dplab/rng.hpp"

namespace dplab {

/// One GA candidate: a (learning rate, activation bound) pair.
struct Chromosome {
  double lr = 0.0;
  double bound_a = 0.0;
  std::optional<double> fitness;
  double epsilon = 0.0;
  bool failed = false;  // training diverged; fitness forced to 0
};

struct GeneBounds {
  double lo = 0.0;
  double hi = 0.0;
};

struct GaConfig {
  int population = 10;
  double mutation_rate = 0.25;
  int segments = 10;
  int generations = 10;
  GeneBounds lr_bounds{1e-4, 0.5};
  GeneBounds a_bounds{0.5, 8.0};

  void validate() const {
    if (population < 2) throw ValueError("population must be >= 2");
    if (mutation_rate < 0.0 || mutation_rate > 1.0) {
      throw ValueError(msg("mutation rate must be in [0,1], got ", mutation_rate));
    }
    if (segments < 1) throw ValueError("segments must be >= 1");
    if (generations < 0) throw ValueError("generations must be >= 0");
    if (lr_bounds.lo > lr_bounds.hi || a_bounds.lo > a_bounds.hi) {
      throw ValueError("gene bounds must satisfy lo <= hi");
    }
  }
};

namespace detail {

/// Each gene range is discretized into equal segments; sampling picks a
/// segment uniformly, then a uniform point inside it.
inline double sample_gene(const GeneBounds& b, int segments, Rng& rng) {
  if (b.hi == b.lo) return b.lo;
  const double width = (b.hi - b.lo) / segments;
  const double seg = static_cast<double>(rng.below(segments));
  return b.lo + (seg + rng.uniform()) * width;
}

}  // namespace detail

inline std::vector<Chromosome> init_population(const GaConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<Chromosome> pop(cfg.population);
  for (auto& c : pop) {
    c.lr = detail::sample_gene(cfg.lr_bounds, cfg.segments, rng);
    c.bound_a = detail::sample_gene(cfg.a_bounds, cfg.segments, rng);
  }
  return pop;
}

struct FitnessResult {
  double fitness = 0.0;
  double epsilon = 0.0;
  bool failed = false;
};

/// Fitness callback; receives a dedicated generator substream per candidate.
using FitnessFn = std::function<FitnessResult(const Chromosome&, Rng&)>;

/// Evaluates candidates that do not yet carry a fitness. Substreams are
/// split in index order, so evaluation is deterministic, and cached values
/// of surviving chromosomes are never recomputed.
inline void evaluate_population(std::vector<Chromosome>& pop,
                                const FitnessFn& fn, Rng& rng) {
  for (auto& c : pop) {
    if (c.fitness.has_value()) continue;
    Rng sub = rng.split();
    FitnessResult res = fn(c, sub);
    c.fitness = res.failed ? 0.0 : res.fitness;
    c.epsilon = res.epsilon;
    c.failed = res.failed;
  }
}

inline const Chromosome& best_of(const std::vector<Chromosome>& pop) {
  const Chromosome* best = nullptr;
  for (const auto& c : pop) {
    if (!c.fitness.has_value()) throw StateError("population not evaluated");
    if (best == nullptr || *c.fitness > *best->fitness) best = &c;
  }
  return *best;
}

/// One generation: sort by fitness, keep the top half unchanged (the best
/// chromosome always survives), refill by uniform crossover of
/// tournament-selected survivors, then per-gene segment-grid mutation.
inline std::vector<Chromosome> evolve(const std::vector<Chromosome>& pop,
                                      const GaConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<std::size_t> order(pop.size());
  std::iota(order.begin(), order.end(), 0);
  for (const auto& c : pop) {
    if (!c.fitness.has_value()) throw StateError("population not evaluated");
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return *pop[a].fitness > *pop[b].fitness;
  });

  const std::size_t survivors = (pop.size() + 1) / 2;
  std::vector<Chromosome> next;
  next.reserve(pop.size());
  for (std::size_t i = 0; i < survivors; ++i) next.push_back(pop[order[i]]);

  auto tournament = [&]() -> const Chromosome& {
    const std::size_t a = rng.below(survivors);
    const std::size_t b = rng.below(survivors);
    return *next[a].fitness >= *next[b].fitness ? next[a] : next[b];
  };

  while (next.size() < pop.size()) {
    const Chromosome& p1 = tournament();
    const Chromosome& p2 = tournament();
    Chromosome child;
    child.lr = rng.bernoulli(0.5) ? p1.lr : p2.lr;
    child.bound_a = rng.bernoulli(0.5) ? p1.bound_a : p2.bound_a;
    if (rng.bernoulli(cfg.mutation_rate)) {
      child.lr = detail::sample_gene(cfg.lr_bounds, cfg.segments, rng);
    }
    if (rng.bernoulli(cfg.mutation_rate)) {
      child.bound_a = detail::sample_gene(cfg.a_bounds, cfg.segments, rng);
    }
    next.push_back(child);
  }
  return next;
}

struct GaHistoryRow {
  int generation = 0;
  double best_fitness = 0.0;
  double best_lr = 0.0;
  double best_a = 0.0;
  double epsilon = 0.0;
};

struct TuneResult {
  Chromosome best;
  std::vector<GaHistoryRow> history;  // one row per generation, gen 0 first
};

/// Full GA loop: init, then (evaluate, evolve) x generations. Best fitness
/// is non-decreasing across history rows because survivors keep their
/// cached fitness.
inline TuneResult tune_bound(const GaConfig& cfg, const FitnessFn& fn,
                             Rng& rng) {
  cfg.validate();
  std::vector<Chromosome> pop = init_population(cfg, rng);
  evaluate_population(pop, fn, rng);
  TuneResult result;
  auto record = [&](int gen) {
    const Chromosome& b = best_of(pop);
    result.history.push_back({gen, *b.fitness, b.lr, b.bound_a, b.epsilon});
  };
  record(0);
  for (int gen = 1; gen <= cfg.generations; ++gen) {
    pop = evolve(pop, cfg, rng);
    evaluate_population(pop, fn, rng);
    record(gen);
  }
  result.best = best_of(pop);
  return result;
}

/// GA fitness budget: a short DPSGD run on the given data.
struct FitnessBudget {
  const Dataset* train_data = nullptr;
  const Dataset* test_data = nullptr;
  Arch arch = Arch::MnistCnn;
  ActivationKind activation = ActivationKind::BoundedReLU;
  double sigma = 1.0;
  int epochs = 1;
  double clip_c = 1.0;
  double delta = 1e-5;
  std::size_t batch_size = 256;
  std::size_t microbatch = 64;
};

/// Fitness of one candidate: final test accuracy of a DPSGD run with the
/// candidate's (lr, a); the run's epsilon is reported alongside. A run that
/// diverges to non-finite parameters scores 0 with the failed flag set.
inline FitnessResult evaluate_fitness(const Chromosome& c,
                                      const FitnessBudget& budget, Rng& rng) {
  if (budget.train_data == nullptr || budget.test_data == nullptr) {
    throw ValueError("fitness budget needs train and test datasets");
  }
  Model model = budget.activation == ActivationKind::BoundedReLU
                    ? build_model(budget.arch, budget.activation, c.bound_a)
                    : build_model(budget.arch, budget.activation);
  Rng init_rng = rng.split();
  init_params(model, init_rng);

  DpConfig cfg;
  cfg.clip_c = budget.clip_c;
  cfg.lr = c.lr;
  cfg.batch_size = budget.batch_size;
  cfg.delta = budget.delta;
  cfg.microbatch = budget.microbatch;
  PrivacyLedger ledger;
  TrainOptions opts;
  opts.train_eval_cap = 1;  // skip train-accuracy scans inside the GA
  FitnessResult res;
  try {
    TrainLog log = train(model, *budget.train_data, *budget.test_data, cfg,
                         {{budget.sigma, budget.epochs}}, ledger, rng, opts);
    res.epsilon = log.rows.back().epsilon;
    bool finite = model.flat_params().size() > 0;
    for (double v : model.flat_params()) {
      if (!std::isfinite(v)) finite = false;
    }
    if (!finite || !std::isfinite(log.rows.back().test_acc)) {
      res.failed = true;
      res.fitness = 0.0;
    } else {
      res.fitness = accuracy(model, *budget.test_data);
    }
  } catch (const Error&) {
    res.failed = true;
    res.fitness = 0.0;
  }
  return res;
}

}  // namespace dplab
