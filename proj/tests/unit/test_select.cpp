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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fasl/random.hpp"
#include "fasl/select.hpp"

using namespace fasl;

namespace {

PosteriorMatrix random_posteriors(std::size_t n, std::size_t labels, Rng& rng) {
  PosteriorMatrix p(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(labels));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < p.cols(); ++j) s += p(i, j) = std::exp(2.0 * standard_normal(rng));
    p.row(i) /= s;
  }
  return p;
}

EmbeddingMatrix random_embeddings(std::size_t n, std::size_t d, Rng& rng) {
  EmbeddingMatrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = standard_normal(rng);
    x.row(i).normalize();
  }
  return x;
}

std::vector<std::string> make_ids(std::size_t n, const std::string& prefix = "c") {
  std::vector<std::string> ids;
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof(buf), "%s%04zu", prefix.c_str(), i);
    ids.push_back(buf);
  }
  return ids;
}

std::set<std::string> top_k_by(const PosteriorMatrix& p, const std::vector<std::string>& ids,
                               std::size_t k, double (*score)(const double*, std::size_t)) {
  std::vector<std::pair<double, std::string>> s;
  for (Eigen::Index i = 0; i < p.rows(); ++i) s.push_back({-score(p.row(i).data(), static_cast<std::size_t>(p.cols())), ids[static_cast<std::size_t>(i)]});
  std::sort(s.begin(), s.end());
  std::set<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.insert(s[i].second);
  return out;
}

double kl_ref(const double* p, const double* q, std::size_t n) {
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) if (p[j] > 0) s += p[j] * std::log(p[j] / q[j]);
  return s;
}

}  // namespace

TEST(Uncertainty, ClosedForms) {
  const std::vector<double> uniform(4, 0.25), onehot = {0, 1, 0, 0};
  EXPECT_NEAR(uncertainty_score(uniform, UncertaintyKind::entropy), std::log(4.0), 1e-12);
  EXPECT_DOUBLE_EQ(uncertainty_score(onehot, UncertaintyKind::margin), -1.0);
  EXPECT_DOUBLE_EQ(uncertainty_score(onehot, UncertaintyKind::least_confidence), -1.0);
  EXPECT_DOUBLE_EQ(uncertainty_score(onehot, UncertaintyKind::entropy), 0.0);
  const std::vector<double> p = {0.5, 0.3, 0.2};
  EXPECT_NEAR(uncertainty_score(p, UncertaintyKind::margin), -0.2, 1e-15);
  EXPECT_NEAR(uncertainty_score(p, UncertaintyKind::least_confidence), -0.5, 1e-15);
}

TEST(Uncertainty, BinaryPosteriorsRankIdentically) {
  Rng rng = make_rng(31);
  PosteriorMatrix p(500, 2);
  for (Eigen::Index i = 0; i < 500; ++i) {
    const double a = uniform01(rng);
    p(i, 0) = a;
    p(i, 1) = 1.0 - a;
  }
  const auto ids = make_ids(500);
  auto lc = [](const double* r, std::size_t n) { return uncertainty_score(std::span<const double>(r, n), UncertaintyKind::least_confidence); };
  auto mg = [](const double* r, std::size_t n) { return uncertainty_score(std::span<const double>(r, n), UncertaintyKind::margin); };
  auto en = [](const double* r, std::size_t n) { return uncertainty_score(std::span<const double>(r, n), UncertaintyKind::entropy); };
  for (std::size_t k : {1u, 5u, 16u}) {
    const auto a = top_k_by(p, ids, k, lc);
    EXPECT_EQ(a, top_k_by(p, ids, k, mg));
    EXPECT_EQ(a, top_k_by(p, ids, k, en));
    PoolState st;
    st.ids = ids;
    st.posteriors = &p;
    SelectionConfig cfg;
    cfg.batch_k = k;
    cfg.randomize_2k = false;
    for (auto s : {StrategyId::least_confidence, StrategyId::margin, StrategyId::entropy}) {
      const auto got = select(st, s, cfg);
      EXPECT_EQ(std::set<std::string>(got.begin(), got.end()), a);
    }
  }
}

TEST(Kl, BasicProperties) {
  const std::vector<double> p = {0.7, 0.2, 0.1}, q = {0.2, 0.5, 0.3};
  EXPECT_DOUBLE_EQ(kl_divergence(p, p), 0.0);
  EXPECT_NEAR(kl_divergence(p, q), kl_ref(p.data(), q.data(), 3), 1e-14);
  EXPECT_GT(kl_divergence(q, p), 0.0);
  const std::vector<double> hard = {1.0, 0.0, 0.0};
  EXPECT_NEAR(kl_divergence(hard, q), -std::log(0.2), 1e-14);
}

TEST(Cal, MatchesBruteForceAverageKl) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = make_rng(seed);
    const std::size_t n = 30, m = 12, labels = 3, nb = 5;
    const auto x = random_embeddings(n, 6, rng);
    const auto lx = random_embeddings(m, 6, rng);
    const auto p = random_posteriors(n, labels, rng);
    const auto lp = random_posteriors(m, labels, rng);
    PoolState st;
    st.ids = make_ids(n);
    st.embeddings = &x;
    st.posteriors = &p;
    st.labeled_ids = make_ids(m, "l");
    st.labeled_embeddings = &lx;
    st.labeled_posteriors = &lp;
    st.n_labels = labels;
    std::vector<double> ref(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::pair<double, std::size_t>> d;
      for (std::size_t j = 0; j < m; ++j) d.push_back({(x.row(static_cast<Eigen::Index>(i)) - lx.row(static_cast<Eigen::Index>(j))).norm(), j});
      std::sort(d.begin(), d.end());
      double s = 0.0;
      for (std::size_t t = 0; t < nb; ++t) s += kl_ref(lp.row(static_cast<Eigen::Index>(d[t].second)).data(), p.row(static_cast<Eigen::Index>(i)).data(), labels);
      ref[i] = s / nb;
    }
    SelectionConfig cfg;
    cfg.cal_neighbors = nb;
    cfg.randomize_2k = false;
    const auto scores = cal_scores(st, cfg);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(scores[i], ref[i], 1e-12);
    for (std::size_t k : {1u, 4u}) {
      cfg.batch_k = k;
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ref[a] > ref[b]; });
      std::set<std::string> expect;
      for (std::size_t t = 0; t < k; ++t) expect.insert(st.ids[order[t]]);
      const auto got = select(st, StrategyId::cal, cfg);
      EXPECT_EQ(std::set<std::string>(got.begin(), got.end()), expect) << "seed " << seed;
    }
  }
}

TEST(Cal, GoldSourceAndMissingNeighborhood) {
  Rng rng = make_rng(40);
  const auto x = random_embeddings(10, 4, rng);
  const auto p = random_posteriors(10, 2, rng);
  PoolState st;
  st.ids = make_ids(10);
  st.embeddings = &x;
  st.posteriors = &p;
  st.n_labels = 2;
  SelectionConfig cfg;
  cfg.batch_k = 2;
  EXPECT_THROW(select(st, StrategyId::cal, cfg), ValidationError);
  const auto lx = random_embeddings(1, 4, rng);
  st.labeled_ids = {"l0"};
  st.labeled_embeddings = &lx;
  st.labeled_gold = {1};
  cfg.cal_source = CalNeighborSource::gold;
  const auto scores = cal_scores(st, cfg);
  for (Eigen::Index i = 0; i < 10; ++i) EXPECT_NEAR(scores[static_cast<std::size_t>(i)], -std::log(p(i, 1)), 1e-12);
}

TEST(Randomization, DrawsFromTopTwoK) {
  Rng rng = make_rng(41);
  const auto p = random_posteriors(200, 4, rng);
  PoolState st;
  st.ids = make_ids(200);
  st.posteriors = &p;
  SelectionConfig cfg;
  cfg.batch_k = 16;
  std::set<std::string> union_of_batches;
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    cfg.seed = seed;
    SelectionTrace trace;
    const auto got = select(st, StrategyId::margin, cfg, &trace);
    ASSERT_TRUE(trace.randomized);
    ASSERT_EQ(trace.candidate_set.size(), 32u);
    // Candidate set equals the brute-force top 32 by margin.
    std::vector<std::pair<double, std::string>> s;
    for (Eigen::Index i = 0; i < 200; ++i) {
      double a = 0, b = 0;
      for (Eigen::Index j = 0; j < 4; ++j) {
        if (p(i, j) > a) { b = a; a = p(i, j); } else if (p(i, j) > b) b = p(i, j);
      }
      s.push_back({a - b, st.ids[static_cast<std::size_t>(i)]});
    }
    std::sort(s.begin(), s.end());
    std::set<std::string> top;
    for (int i = 0; i < 32; ++i) top.insert(s[static_cast<std::size_t>(i)].second);
    EXPECT_EQ(std::set<std::string>(trace.candidate_set.begin(), trace.candidate_set.end()), top);
    EXPECT_EQ(std::set<std::string>(got.begin(), got.end()).size(), 16u);
    for (const auto& id : got) {
      EXPECT_TRUE(top.count(id));
      union_of_batches.insert(id);
    }
    EXPECT_EQ(got, select(st, StrategyId::margin, cfg));
  }
  // Over many seeds more than k distinct candidates get drawn.
  EXPECT_GT(union_of_batches.size(), 16u);
}

TEST(Randomization, SmallPoolFallsBackToTopK) {
  Rng rng = make_rng(42);
  const auto p = random_posteriors(20, 3, rng);
  PoolState st;
  st.ids = make_ids(20);
  st.posteriors = &p;
  SelectionConfig cfg;
  cfg.batch_k = 16;
  SelectionTrace trace;
  const auto got = select(st, StrategyId::entropy, cfg, &trace);
  EXPECT_FALSE(trace.randomized);
  EXPECT_EQ(got.size(), 16u);
  cfg.randomize_2k = false;
  EXPECT_EQ(got, select(st, StrategyId::entropy, cfg));
}

TEST(Select, RandomAndDiversityBatches) {
  Rng rng = make_rng(43);
  const auto x = random_embeddings(80, 5, rng);
  const auto p = random_posteriors(80, 3, rng);
  PoolState st;
  st.ids = make_ids(80);
  st.embeddings = &x;
  st.posteriors = &p;
  SelectionConfig cfg;
  cfg.batch_k = 8;
  for (auto s : kAllStrategies) {
    if (s == StrategyId::cal) continue;
    const auto got = select(st, s, cfg);
    EXPECT_EQ(got.size(), 8u) << to_string(s);
    EXPECT_EQ(std::set<std::string>(got.begin(), got.end()).size(), 8u) << to_string(s);
    EXPECT_EQ(got, select(st, s, cfg)) << to_string(s);
  }
}

TEST(Select, HybridPicksMostUncertainMemberPerCluster) {
  Rng rng = make_rng(44);
  const auto x = random_embeddings(60, 4, rng);
  const auto p = random_posteriors(60, 3, rng);
  PoolState st;
  st.ids = make_ids(60);
  st.embeddings = &x;
  st.posteriors = &p;
  SelectionConfig cfg;
  cfg.batch_k = 5;
  cfg.seed = 3;
  const auto c = kmedoids(x, 5, cfg.seed);
  const auto got = select(st, StrategyId::kmedoids_margin, cfg);
  for (std::size_t j = 0; j < 5; ++j) {
    double best = -1e9;
    std::string best_id;
    for (std::size_t i = 0; i < 60; ++i) {
      if (c.assignment[i] != j) continue;
      const double s = uncertainty_score(std::span<const double>(p.row(static_cast<Eigen::Index>(i)).data(), 3), UncertaintyKind::margin);
      if (s > best) { best = s; best_id = st.ids[i]; }
    }
    EXPECT_EQ(got[j], best_id);
  }
}

TEST(Select, Validation) {
  Rng rng = make_rng(45);
  const auto p = random_posteriors(5, 2, rng);
  PoolState st;
  st.ids = make_ids(5);
  st.posteriors = &p;
  SelectionConfig cfg;
  cfg.batch_k = 6;
  EXPECT_THROW(select(st, StrategyId::margin, cfg), ValidationError);
  cfg.batch_k = 2;
  st.labeled_ids = {st.ids[0]};
  EXPECT_THROW(select(st, StrategyId::margin, cfg), Error);
  st.labeled_ids.clear();
  EXPECT_THROW(select(st, StrategyId::kmeans, cfg), Error);  // no embeddings
}

TEST(Strategy, CanonicalNamesRoundTrip) {
  for (auto s : kAllStrategies) EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_EQ(parse_strategy("kmedoids+least"), StrategyId::kmedoids_least);
  EXPECT_EQ(parse_strategy("least"), StrategyId::least_confidence);
  EXPECT_THROW(parse_strategy("bald"), ValidationError);
}
