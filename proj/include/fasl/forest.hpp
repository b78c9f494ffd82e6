/*
 * Copyright 2026 The FASL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Random-forest regression: CART trees with axis-aligned splits chosen by
// variance reduction over a random feature subset, bagged by bootstrap.
//
// Determinism: rows are put in a canonical order (lexicographic on features,
// then target) before fitting, and tree t draws its bootstrap sample and
// feature subsets from mt19937_64 seeded with seed + t. The fitted forest is
// therefore a function of the multiset of rows and the seed, independent of
// row order and of the number of worker threads.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fasl/error.hpp"
#include "fasl/random.hpp"

namespace fasl {

struct ForestConfig {
  std::size_t n_trees = 200;
  std::size_t max_depth = 8;
  std::size_t min_leaf = 2;
  // Features tried per split; 0 means ceil(sqrt(d)).
  std::size_t feature_subsample = 0;
  bool bootstrap = true;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

class RegressionTree {
 public:
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;
  };

  double predict(std::span<const double> x) const {
    int i = 0;
    while (nodes_[static_cast<std::size_t>(i)].feature >= 0) {
      const auto& n = nodes_[static_cast<std::size_t>(i)];
      i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes_[static_cast<std::size_t>(i)].value;
  }

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  std::vector<Node>& nodes() noexcept { return nodes_; }

 private:
  std::vector<Node> nodes_;
};

class ForestModel {
 public:
  ForestModel() = default;
  ForestModel(std::vector<RegressionTree> trees, ForestConfig config, std::size_t n_features)
      : trees_(std::move(trees)), config_(config), n_features_(n_features) {}

  // Mean tree output clamped to [0, 1].
  double predict(std::span<const double> x) const {
    if (x.size() != n_features_) {
      throw Error(ErrorCode::invalid_argument, "forest expects " + std::to_string(n_features_) +
                                                   " features, got " + std::to_string(x.size()));
    }
    require(!trees_.empty(), "forest has no trees");
    double sum = 0.0;
    for (const auto& t : trees_) sum += t.predict(x);
    return std::clamp(sum / static_cast<double>(trees_.size()), 0.0, 1.0);
  }

  const std::vector<RegressionTree>& trees() const noexcept { return trees_; }
  const ForestConfig& config() const noexcept { return config_; }
  std::size_t n_features() const noexcept { return n_features_; }

  nlohmann::json to_json() const {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : trees_) {
      nlohmann::json f, th, l, r, v;
      for (const auto& n : t.nodes()) {
        f.push_back(n.feature);
        th.push_back(n.threshold);
        l.push_back(n.left);
        r.push_back(n.right);
        v.push_back(n.value);
      }
      trees.push_back({{"feature", f}, {"threshold", th}, {"left", l}, {"right", r}, {"value", v}});
    }
    return {{"format", "fasl-forest-v1"},
            {"n_features", n_features_},
            {"config",
             {{"n_trees", config_.n_trees},
              {"max_depth", config_.max_depth},
              {"min_leaf", config_.min_leaf},
              {"feature_subsample", config_.feature_subsample},
              {"bootstrap", config_.bootstrap},
              {"seed", config_.seed}}},
            {"trees", trees}};
  }

  static ForestModel from_json(const nlohmann::json& j) {
    try {
      if (j.at("format") != "fasl-forest-v1") throw ValidationError("unknown forest format");
      ForestConfig c;
      const auto& jc = j.at("config");
      c.n_trees = jc.at("n_trees");
      c.max_depth = jc.at("max_depth");
      c.min_leaf = jc.at("min_leaf");
      c.feature_subsample = jc.at("feature_subsample");
      c.bootstrap = jc.at("bootstrap");
      c.seed = jc.at("seed");
      std::vector<RegressionTree> trees;
      for (const auto& jt : j.at("trees")) {
        RegressionTree t;
        const auto& f = jt.at("feature");
        for (std::size_t i = 0; i < f.size(); ++i) {
          t.nodes().push_back({f[i].get<int>(), jt.at("threshold")[i].get<double>(),
                               jt.at("left")[i].get<int>(), jt.at("right")[i].get<int>(),
                               jt.at("value")[i].get<double>()});
        }
        trees.push_back(std::move(t));
      }
      return ForestModel(std::move(trees), c, j.at("n_features").get<std::size_t>());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed forest model: ") + e.what());
    }
  }

 private:
  std::vector<RegressionTree> trees_;
  ForestConfig config_;
  std::size_t n_features_ = 0;
};

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<std::vector<double>>& x, const std::vector<double>& y,
              const ForestConfig& config, std::size_t subsample, Rng& rng)
      : x_(x), y_(y), config_(config), subsample_(subsample), rng_(rng) {}

  RegressionTree build(std::vector<std::size_t> rows) {
    RegressionTree tree;
    grow(tree, rows, 0);
    return tree;
  }

 private:
  int grow(RegressionTree& tree, std::vector<std::size_t>& rows, std::size_t depth) {
    const int id = static_cast<int>(tree.nodes().size());
    tree.nodes().emplace_back();
    double sum = 0.0;
    for (auto r : rows) sum += y_[r];
    const double mean = sum / static_cast<double>(rows.size());
    tree.nodes()[static_cast<std::size_t>(id)].value = mean;

    if (depth >= config_.max_depth || rows.size() < 2 * config_.min_leaf) return id;
    double sse = 0.0;
    for (auto r : rows) sse += (y_[r] - mean) * (y_[r] - mean);
    if (sse <= 0.0) return id;

    const std::size_t d = x_.front().size();
    auto features = sample_without_replacement(rng_, d, subsample_);
    std::sort(features.begin(), features.end());

    int best_feature = -1;
    double best_threshold = 0.0;
    double best_gain = 0.0;
    std::vector<std::size_t> sorted = rows;
    for (auto f : features) {
      std::sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
        if (x_[a][f] != x_[b][f]) return x_[a][f] < x_[b][f];
        return a < b;
      });
      double left_sum = 0.0, left_sq = 0.0;
      double total_sq = 0.0;
      for (auto r : sorted) total_sq += y_[r] * y_[r];
      const double n = static_cast<double>(sorted.size());
      for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
        const double yi = y_[sorted[i]];
        left_sum += yi;
        left_sq += yi * yi;
        const std::size_t nl = i + 1;
        if (nl < config_.min_leaf || sorted.size() - nl < config_.min_leaf) continue;
        const double xa = x_[sorted[i]][f], xb = x_[sorted[i + 1]][f];
        if (xa == xb) continue;
        const double right_sum = sum - left_sum;
        const double right_sq = total_sq - left_sq;
        const double l = static_cast<double>(nl), rn = n - l;
        const double child_sse =
            (left_sq - left_sum * left_sum / l) + (right_sq - right_sum * right_sum / rn);
        const double gain = sse - child_sse;
        if (gain > best_gain + 1e-12 * sse) {
          best_gain = gain;
          best_feature = static_cast<int>(f);
          best_threshold = 0.5 * (xa + xb);
          if (!(best_threshold > xa && best_threshold <= xb)) best_threshold = xa;
        }
      }
    }
    if (best_feature < 0) return id;

    std::vector<std::size_t> left, right;
    for (auto r : rows) {
      (x_[r][static_cast<std::size_t>(best_feature)] <= best_threshold ? left : right).push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    const int l = grow(tree, left, depth + 1);
    const int r = grow(tree, right, depth + 1);
    auto& node = tree.nodes()[static_cast<std::size_t>(id)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = r;
    return id;
  }

  const std::vector<std::vector<double>>& x_;
  const std::vector<double>& y_;
  const ForestConfig& config_;
  std::size_t subsample_;
  Rng& rng_;
};

}  // namespace detail

inline ForestModel forest_fit(const std::vector<std::vector<double>>& features,
                              const std::vector<double>& targets, const ForestConfig& config) {
  if (features.empty()) throw ValidationError("forest needs at least one training row");
  require(features.size() == targets.size(), "forest: features and targets differ in length");
  require(config.n_trees >= 1 && config.min_leaf >= 1, "forest: invalid configuration");
  if (features.size() < 2 * config.min_leaf) {
    throw ValidationError("forest needs at least 2 * min_leaf rows");
  }
  const std::size_t d = features.front().size();
  require(d >= 1, "forest: rows need at least one feature");
  for (const auto& row : features) require(row.size() == d, "forest: ragged feature rows");

  // Canonical row order.
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (features[a] != features[b]) return features[a] < features[b];
    return targets[a] < targets[b];
  });
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  x.reserve(order.size());
  for (auto i : order) {
    x.push_back(features[i]);
    y.push_back(targets[i]);
  }

  const std::size_t subsample =
      config.feature_subsample == 0
          ? static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(d))))
          : std::min(config.feature_subsample, d);
  std::vector<RegressionTree> trees(config.n_trees);
  auto fit_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      Rng rng = make_rng(config.seed + t);
      std::vector<std::size_t> rows(x.size());
      if (config.bootstrap) {
        for (auto& r : rows) r = uniform_index(rng, x.size());
      } else {
        std::iota(rows.begin(), rows.end(), std::size_t{0});
      }
      detail::TreeBuilder builder(x, y, config, subsample, rng);
      trees[t] = builder.build(std::move(rows));
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(config.jobs, config.n_trees));
  if (jobs == 1) {
    fit_range(0, config.n_trees);
  } else {
    std::vector<std::thread> workers;
    const std::size_t chunk = (config.n_trees + jobs - 1) / jobs;
    for (std::size_t j = 0; j < jobs; ++j) {
      const std::size_t begin = j * chunk, end = std::min(config.n_trees, begin + chunk);
      if (begin < end) workers.emplace_back(fit_range, begin, end);
    }
    for (auto& w : workers) w.join();
  }
  return ForestModel(std::move(trees), config, d);
}

inline double forest_predict(const ForestModel& model, std::span<const double> features) {
  return model.predict(features);
}

}  // namespace fasl
