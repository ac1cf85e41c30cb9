#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "dplab/data.hpp"
#include "dplab/dp.hpp"
#include "dplab/error.hpp"
#include "dplab/model.hpp"
#include "dplab/rng.hpp"

namespace dplab {

/// Disjoint train/test index sets for one shadow model, drawn from the
/// shadow pool.
struct ShadowSplit {
  int shadow_id = 0;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
};

/// Samples n_shadows splits. Within a split, train and test are equal-sized
/// and disjoint; different shadows may overlap.
inline std::vector<ShadowSplit> make_shadow_splits(std::size_t pool_size,
                                                   int n_shadows,
                                                   std::size_t per_split,
                                                   Rng& rng) {
  if (n_shadows < 1) throw ValueError("need at least one shadow");
  if (2 * per_split > pool_size) {
    throw ValueError(msg("shadow split needs ", 2 * per_split,
                         " samples but pool has ", pool_size));
  }
  std::vector<ShadowSplit> splits;
  splits.reserve(n_shadows);
  std::vector<std::size_t> pool(pool_size);
  std::iota(pool.begin(), pool.end(), 0);
  for (int s = 0; s < n_shadows; ++s) {
    // Partial Fisher-Yates: first 2*per_split entries are a uniform draw
    // without replacement.
    for (std::size_t i = 0; i < 2 * per_split; ++i) {
      const std::size_t j = i + rng.below(pool_size - i);
      std::swap(pool[i], pool[j]);
    }
    ShadowSplit split;
    split.shadow_id = s;
    split.train_indices.assign(pool.begin(), pool.begin() + per_split);
    split.test_indices.assign(pool.begin() + per_split,
                              pool.begin() + 2 * per_split);
    splits.push_back(std::move(split));
  }
  return splits;
}

/// One attack-training example: the shadow's softmax output for a sample,
/// labeled by that sample's membership in the shadow's training set.
struct AttackRecord {
  std::vector<double> features;
  int label = 0;  // 1 = member
};

namespace detail {

inline std::vector<std::vector<double>> probability_vectors(
    Model& model, const Dataset& data, const std::vector<std::size_t>& idx,
    bool sort_desc) {
  const Mode saved = model.mode;
  model.mode = Mode::Eval;
  std::vector<std::vector<double>> out;
  out.reserve(idx.size());
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    const std::size_t count = std::min(chunk, idx.size() - start);
    std::vector<std::size_t> sub(idx.begin() + start,
                                 idx.begin() + start + count);
    ForwardResult fwd = forward(model, data.gather(sub));
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<double> p(fwd.probs.dim(1));
      for (std::size_t j = 0; j < p.size(); ++j) p[j] = fwd.probs(i, j);
      if (sort_desc) std::sort(p.begin(), p.end(), std::greater<>());
      out.push_back(std::move(p));
    }
  }
  model.mode = saved;
  return out;
}

}  // namespace detail

/// Queries every shadow on its own train (label 1) and test (label 0)
/// samples. Feature vectors are sorted descending by default, making the
/// attack class-agnostic.
inline std::vector<AttackRecord> build_attack_dataset(
    std::vector<Model>& shadows, const std::vector<ShadowSplit>& splits,
    const Dataset& pool, bool sort_features = true) {
  if (shadows.size() != splits.size()) {
    throw ValueError(msg("got ", shadows.size(), " shadow models for ",
                         splits.size(), " splits"));
  }
  std::vector<AttackRecord> records;
  for (std::size_t s = 0; s < shadows.size(); ++s) {
    for (int member : {1, 0}) {
      const auto& idx =
          member ? splits[s].train_indices : splits[s].test_indices;
      auto probs = detail::probability_vectors(shadows[s], pool, idx,
                                               sort_features);
      for (auto& p : probs) {
        records.push_back({std::move(p), member});
      }
    }
  }
  return records;
}

/// Linear membership scorer: score(x) = w.x + b, member iff score > 0.
struct LinearClassifier {
  std::vector<double> w;
  double b = 0.0;

  double score(std::span<const double> x) const {
    double s = b;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
    return s;
  }
  int predict(std::span<const double> x) const { return score(x) > 0.0 ? 1 : 0; }
};

struct AttackTrainConfig {
  int epochs = 500;
  double lr = 0.01;
  double lambda = 1e-3;  // L2 penalty
};

/// Linear SVM trained by full-batch gradient descent on the hinge loss
///   mean_i max(0, 1 - y_i (w.z_i + b)) + lambda ||w||^2,  y in {-1,+1},
/// over standardized features z = (x - mean)/std. The standardization is
/// folded back into (w, b), so scoring stays a plain affine map of the raw
/// features.
inline LinearClassifier train_attack_model(
    const std::vector<AttackRecord>& records,
    const AttackTrainConfig& cfg = {}) {
  if (records.empty()) throw ValueError("no attack records");
  bool has_pos = false, has_neg = false;
  for (const auto& r : records) {
    (r.label == 1 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) {
    throw ValueError("attack training needs both member and non-member records");
  }
  const std::size_t dim = records[0].features.size();
  for (const auto& r : records) {
    if (r.features.size() != dim) {
      throw ValueError("attack records have inconsistent feature lengths");
    }
  }

  const double inv_n = 1.0 / static_cast<double>(records.size());
  std::vector<double> mean(dim, 0.0), stdev(dim, 0.0);
  for (const auto& r : records) {
    for (std::size_t i = 0; i < dim; ++i) mean[i] += r.features[i];
  }
  for (auto& m : mean) m *= inv_n;
  for (const auto& r : records) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = r.features[i] - mean[i];
      stdev[i] += d * d;
    }
  }
  for (auto& s : stdev) s = std::max(std::sqrt(s * inv_n), 1e-12);

  LinearClassifier clf;
  clf.w.assign(dim, 0.0);
  std::vector<double> gw(dim);
  std::vector<double> z(dim);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (const auto& r : records) {
      const double y = r.label == 1 ? 1.0 : -1.0;
      double s = clf.b;
      for (std::size_t i = 0; i < dim; ++i) {
        z[i] = (r.features[i] - mean[i]) / stdev[i];
        s += clf.w[i] * z[i];
      }
      if (y * s < 1.0) {
        for (std::size_t i = 0; i < dim; ++i) gw[i] -= y * z[i];
        gb -= y;
      }
    }
    for (std::size_t i = 0; i < dim; ++i) {
      clf.w[i] -= cfg.lr * (gw[i] * inv_n + 2.0 * cfg.lambda * clf.w[i]);
    }
    clf.b -= cfg.lr * gb * inv_n;
  }

  // Fold the standardization into the affine map.
  for (std::size_t i = 0; i < dim; ++i) {
    clf.w[i] /= stdev[i];
    clf.b -= clf.w[i] * mean[i];
  }
  return clf;
}

inline double classifier_accuracy(const LinearClassifier& clf,
                                  const std::vector<AttackRecord>& records) {
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& r : records) {
    if (clf.predict(r.features) == r.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

/// Balanced accuracy of membership predictions against a target model:
/// (true-member rate + true-non-member rate) / 2. 0.5 is chance.
inline double attack_success_rate(const LinearClassifier& attack,
                                  Model& target, const Dataset& data,
                                  const std::vector<std::size_t>& members,
                                  const std::vector<std::size_t>& non_members,
                                  bool sort_features = true) {
  if (members.size() != non_members.size()) {
    throw ValueError(msg("member/non-member sets must be equal-sized, got ",
                         members.size(), " and ", non_members.size()));
  }
  if (members.empty()) throw ValueError("empty evaluation sets");
  auto member_probs =
      detail::probability_vectors(target, data, members, sort_features);
  auto non_member_probs =
      detail::probability_vectors(target, data, non_members, sort_features);
  std::size_t true_member = 0, true_non_member = 0;
  for (const auto& p : member_probs) {
    if (attack.predict(p) == 1) ++true_member;
  }
  for (const auto& p : non_member_probs) {
    if (attack.predict(p) == 0) ++true_non_member;
  }
  const double tpr = static_cast<double>(true_member) / members.size();
  const double tnr = static_cast<double>(true_non_member) / non_members.size();
  return 0.5 * (tpr + tnr);
}

}  // namespace dplab
