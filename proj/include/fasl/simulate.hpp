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

// Simulated-annotator experiments. A trial starts from the zero-shot model,
// then repeatedly selects a batch from the (capped) training pool, reveals
// the gold labels, retrains from scratch on everything labeled so far and
// scores macro F1 on the held-out test split.

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "fasl/corpus.hpp"
#include "fasl/encoder.hpp"
#include "fasl/fsl.hpp"
#include "fasl/metrics.hpp"
#include "fasl/perfpred.hpp"
#include "fasl/random.hpp"
#include "fasl/select.hpp"

namespace fasl {

// A labeled train pool, a disjoint test split and the encoder for both.
struct SimDataset {
  std::string name;
  LabelSet labels;
  Pool train;
  Pool test;
  std::shared_ptr<const Encoder> encoder;
};

struct SyntheticSpec {
  std::size_t clusters = 5;
  std::size_t dims = 32;
  std::size_t labels = 5;
  // Exponential label skew base; 0 disables skew.
  double skew = 0.0;
  double noise = 0.5;
  double separation = 1.0;
  // Perturbation of the label-description vectors the zero-shot model sees.
  double description_noise = 0.5;
  std::size_t size = 2000;
  std::size_t test_size = 1000;
  std::uint64_t seed = 0;
};

// Gaussian clusters in embedding space. Cluster c carries label c mod
// labels. Point = separation * center + noise * z / sqrt(dims), z standard
// normal, then unit-normalized. Texts are the instance ids and are resolved
// by a LookupEncoder; label descriptions are "desc:<label>" and map to the
// label's mean center perturbed by description_noise. With skew > 1 both
// splits are down-sampled with make_unbalanced.
inline SimDataset synth_dataset(const SyntheticSpec& spec, std::string name = "synthetic") {
  if (spec.labels < 2 || spec.labels > spec.clusters) {
    throw ValidationError("synthetic dataset needs 2 <= labels <= clusters");
  }
  if (spec.dims == 0 || spec.size < spec.labels || spec.test_size < spec.labels) {
    throw ValidationError("synthetic dataset needs positive dims and at least one item per label");
  }
  if (spec.skew != 0.0 && spec.skew <= 1.0) throw ValidationError("skew base must be > 1");
  Rng rng = make_rng(spec.seed);
  const auto d = static_cast<Eigen::Index>(spec.dims);
  auto gaussian = [&]() {
    Embedding z(d);
    for (Eigen::Index i = 0; i < d; ++i) z[i] = standard_normal(rng);
    return z;
  };
  std::vector<Embedding> centers;
  for (std::size_t c = 0; c < spec.clusters; ++c) {
    Embedding v = gaussian();
    v.normalize();
    centers.push_back(spec.separation * v);
  }
  std::vector<LabelEntry> entries;
  std::unordered_map<std::string, Embedding> table;
  for (std::size_t l = 0; l < spec.labels; ++l) {
    const std::string label = "label-" + std::to_string(l);
    entries.push_back({label, "desc:" + label});
    Embedding mean = Embedding::Zero(d);
    double members = 0.0;
    for (std::size_t c = l; c < spec.clusters; c += spec.labels) {
      mean += centers[c];
      members += 1.0;
    }
    mean /= members;
    Embedding desc = mean + spec.description_noise * gaussian() / std::sqrt(static_cast<double>(d));
    table.emplace("desc:" + label, std::move(desc));
  }
  LabelSet labels(entries);

  // Per-label cluster lists, for drawing a cluster given a label.
  auto make_split = [&](const std::string& prefix, std::size_t size) {
    std::size_t per_label = size / spec.labels;
    if (spec.skew > 1.0) {
      double mass = 0.0;
      for (std::size_t r = 0; r < spec.labels; ++r) mass += std::pow(spec.skew, -static_cast<double>(r));
      per_label = static_cast<std::size_t>(std::ceil(static_cast<double>(size) / mass));
    }
    std::vector<TextInstance> rows;
    std::size_t next = 0;
    for (std::size_t l = 0; l < spec.labels; ++l) {
      std::vector<std::size_t> own;
      for (std::size_t c = l; c < spec.clusters; c += spec.labels) own.push_back(c);
      for (std::size_t j = 0; j < per_label; ++j) {
        const auto c = own[uniform_index(rng, own.size())];
        Embedding v = centers[c] + spec.noise * gaussian() / std::sqrt(static_cast<double>(d));
        if (v.norm() == 0.0) v = centers[c];
        char id[32];
        std::snprintf(id, sizeof(id), "%s-%06zu", prefix.c_str(), next++);
        table.emplace(id, std::move(v));
        rows.push_back({id, id, labels.name(l)});
      }
    }
    // Interleave labels so pool order carries no label information.
    shuffle(rows, rng);
    Pool pool(std::move(rows));
    if (spec.skew > 1.0) {
      pool = make_unbalanced(pool, labels, {spec.skew, rng()});
      pool = cap_pool(pool, size, rng());
    }
    return pool;
  };
  SimDataset out;
  out.name = std::move(name);
  out.train = make_split("tr", spec.size);
  out.test = make_split("te", spec.test_size);
  out.labels = std::move(labels);
  out.encoder = std::make_shared<LookupEncoder>(std::move(table), "synthetic");
  return out;
}

struct ExperimentPlan {
  std::string name = "plan";
  ModelKind model_kind = ModelKind::label_tuning;
  StrategyId strategy = StrategyId::random;
  std::size_t batch_k = 16;
  std::size_t budget = 256;
  std::size_t trials = 10;
  std::size_t pool_cap = 20000;
  std::uint64_t seed_base = 0;
  std::size_t sample_size = kDefaultSampleSize;
  bool randomize_2k = true;
  std::size_t cal_neighbors = 10;
  std::size_t cv_folds = 5;
  TrainConfig train;

  void validate() const {
    if (batch_k == 0) throw ValidationError("batch_k must be positive");
    if (budget % batch_k != 0) throw ValidationError("budget must be a multiple of batch_k");
    if (trials == 0) throw ValidationError("trials must be at least 1");
    if (pool_cap == 0) throw ValidationError("pool_cap must be positive");
  }
};

struct CurvePoint {
  std::size_t n_train = 0;
  double test_f1 = 0.0;
  IterationSnapshot snapshot;  // posteriors_T cleared after use
  std::vector<std::string> batch;  // ids added in this iteration
};

struct LearningCurve {
  std::string plan;
  std::uint64_t seed = 0;
  std::size_t trial = 0;
  std::size_t pool_size = 0;
  bool truncated = false;
  std::vector<CurvePoint> points;
  std::vector<SelectionTrace> traces;  // one per selection round
};

inline double evaluate_test_f1(const FewShotModel& model, const EmbeddingMatrix& test_x,
                               const std::vector<std::size_t>& test_y) {
  const PosteriorMatrix p = predict_embeddings(model, test_x);
  std::vector<std::size_t> pred(test_y.size());
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = argmax_row(p, static_cast<Eigen::Index>(i));
  return macro_f1(test_y, pred, labels_of(model).size());
}

namespace detail {

inline EmbeddingMatrix gather_rows(const EmbeddingMatrix& x, const std::vector<std::size_t>& rows) {
  EmbeddingMatrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

inline std::vector<std::string> texts_of(const Pool& pool) {
  std::vector<std::string> out;
  out.reserve(pool.size());
  for (const auto& t : pool.instances()) out.push_back(t.text);
  return out;
}

}  // namespace detail

// Stratified CV macro F1 for a labeled set under the plan's model settings.
inline std::optional<double> labeled_cv_f1(const LabelSet& labels, const EncoderDescriptor& encoder,
                                           const EmbeddingMatrix& descriptions, ModelKind kind,
                                           const TrainConfig& config, const TrainingSet& data,
                                           std::uint64_t seed, std::size_t folds = 5) {
  FoldTrainer trainer = [&](const TrainingSet& train, const EmbeddingMatrix& test) {
    return predict_embeddings(fit_from_scratch(labels, encoder, descriptions, kind, train, config),
                              test);
  };
  return cross_validated_f1(data, labels.size(), trainer, seed, folds);
}

inline LearningCurve run_trial(const ExperimentPlan& plan, const SimDataset& data,
                               std::uint64_t trial_seed) {
  plan.validate();
  if (!data.train.fully_labeled() || !data.test.fully_labeled()) {
    throw ValidationError("simulation needs gold labels on every instance");
  }
  const Pool pool = cap_pool(data.train, plan.pool_cap, trial_seed);
  const auto& enc = *data.encoder;
  const EmbeddingMatrix pool_x = encode_all(enc, detail::texts_of(pool));
  const EmbeddingMatrix test_x = encode_all(enc, detail::texts_of(data.test));
  const EmbeddingMatrix desc_x = encode_descriptions(data.labels, enc);
  std::vector<std::size_t> pool_y, test_y;
  for (const auto& t : pool.instances()) pool_y.push_back(data.labels.index_of(*t.gold_label));
  for (const auto& t : data.test.instances()) test_y.push_back(data.labels.index_of(*t.gold_label));

  const auto t_rows = sample_T(pool.size(), plan.sample_size, trial_seed ^ 0x5bd1e995ULL);
  const EmbeddingMatrix t_x = detail::gather_rows(pool_x, t_rows);

  LearningCurve curve;
  curve.plan = plan.name;
  curve.seed = trial_seed;
  curve.pool_size = pool.size();

  TrainConfig train_cfg = plan.train;
  FewShotModel model = zero_shot_from_descriptions(data.labels, enc.descriptor(), desc_x,
                                                   plan.model_kind, train_cfg);
  std::vector<std::size_t> labeled_rows;
  std::vector<char> is_labeled(pool.size(), 0);
  const PosteriorMatrix* prev_T = nullptr;
  PosteriorMatrix prev_storage;

  auto record = [&](std::vector<std::string> batch, std::size_t iter) {
    TrainingSet labeled{detail::gather_rows(pool_x, labeled_rows), {}};
    for (auto r : labeled_rows) labeled.labels.push_back(pool_y[r]);
    std::optional<double> cv;
    if (!labeled_rows.empty()) {
      cv = labeled_cv_f1(data.labels, enc.descriptor(), desc_x, plan.model_kind, train_cfg,
                         labeled, trial_seed + 7919 * iter, plan.cv_folds);
    }
    CurvePoint pt;
    pt.n_train = labeled_rows.size();
    pt.test_f1 = evaluate_test_f1(model, test_x, test_y);
    pt.snapshot = snapshot(predict_embeddings(model, t_x), prev_T, iter, labeled_rows.size(), cv);
    pt.batch = std::move(batch);
    prev_storage = std::move(pt.snapshot.posteriors_T);
    pt.snapshot.posteriors_T = PosteriorMatrix();
    prev_T = &prev_storage;
    curve.points.push_back(std::move(pt));
  };

  record({}, 0);
  for (std::size_t iter = 1; labeled_rows.size() < plan.budget; ++iter) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (!is_labeled[i]) candidates.push_back(i);
    }
    if (candidates.empty()) {
      curve.truncated = true;
      break;
    }
    std::size_t k = plan.batch_k;
    if (candidates.size() < k) {
      k = candidates.size();
      curve.truncated = true;
    }
    PoolState state;
    for (auto r : candidates) state.ids.push_back(pool[r].id);
    const EmbeddingMatrix cand_x = detail::gather_rows(pool_x, candidates);
    const PosteriorMatrix cand_p = predict_embeddings(model, cand_x);
    const EmbeddingMatrix lab_x = detail::gather_rows(pool_x, labeled_rows);
    const PosteriorMatrix lab_p = predict_embeddings(model, lab_x);
    state.embeddings = &cand_x;
    state.posteriors = &cand_p;
    for (auto r : labeled_rows) {
      state.labeled_ids.push_back(pool[r].id);
      state.labeled_gold.push_back(pool_y[r]);
    }
    state.labeled_embeddings = &lab_x;
    state.labeled_posteriors = &lab_p;
    state.n_labels = data.labels.size();

    SelectionConfig sel;
    sel.batch_k = k;
    sel.randomize_2k = plan.randomize_2k;
    sel.cal_neighbors = plan.cal_neighbors;
    sel.seed = trial_seed * 1000003ULL + iter;
    StrategyId strategy = plan.strategy;
    // CAL cannot start without labeled neighbors; the first batch is random.
    if (strategy == StrategyId::cal && labeled_rows.empty()) strategy = StrategyId::random;
    SelectionTrace trace;
    auto batch = select(state, strategy, sel, &trace);
    curve.traces.push_back(std::move(trace));
    for (const auto& id : batch) {
      const auto row = *pool.find(id);
      if (is_labeled[row]) fail("instance '" + id + "' selected twice");
      is_labeled[row] = 1;
      labeled_rows.push_back(row);
    }
    TrainingSet labeled{detail::gather_rows(pool_x, labeled_rows), {}};
    for (auto r : labeled_rows) labeled.labels.push_back(pool_y[r]);
    model = fit_from_scratch(data.labels, enc.descriptor(), desc_x, plan.model_kind, labeled,
                             train_cfg);
    record(std::move(batch), iter);
    if (curve.truncated) break;
  }
  return curve;
}

// Runs every trial of a plan; trial t uses seed_base + t. Trials may run on
// up to `jobs` threads; results come back in trial order.
inline std::vector<LearningCurve> run_plan(const ExperimentPlan& plan, const SimDataset& data,
                                           std::size_t jobs = 1) {
  plan.validate();
  std::vector<LearningCurve> curves(plan.trials);
  std::vector<std::exception_ptr> errors(plan.trials);
  auto work = [&](std::size_t t) {
    try {
      curves[t] = run_trial(plan, data, plan.seed_base + t);
      curves[t].trial = t;
    } catch (...) {
      errors[t] = std::current_exception();
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, plan.trials));
  if (jobs == 1) {
    for (std::size_t t = 0; t < plan.trials; ++t) work(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t j = 0; j < jobs; ++j) {
      workers.emplace_back([&] {
        for (std::size_t t = next++; t < plan.trials; t = next++) work(t);
      });
    }
    for (auto& w : workers) w.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return curves;
}

struct AggregateCurve {
  std::vector<std::size_t> n_train;
  std::vector<double> mean;
  std::vector<double> std;  // sample standard deviation (n - 1); 0 for one curve
};

// Mean and sample std of test F1 per iteration across curves aligned on n_train.
inline AggregateCurve aggregate(const std::vector<LearningCurve>& curves) {
  if (curves.empty()) throw ValidationError("aggregate needs at least one curve");
  AggregateCurve out;
  for (const auto& p : curves.front().points) out.n_train.push_back(p.n_train);
  for (const auto& c : curves) {
    if (c.points.size() != out.n_train.size()) throw ValidationError("curves are not aligned");
    for (std::size_t i = 0; i < c.points.size(); ++i) {
      if (c.points[i].n_train != out.n_train[i]) throw ValidationError("curves are not aligned");
    }
  }
  const double m = static_cast<double>(curves.size());
  for (std::size_t i = 0; i < out.n_train.size(); ++i) {
    double sum = 0.0;
    for (const auto& c : curves) sum += c.points[i].test_f1;
    const double mean = sum / m;
    double ss = 0.0;
    for (const auto& c : curves) ss += (c.points[i].test_f1 - mean) * (c.points[i].test_f1 - mean);
    out.mean.push_back(mean);
    out.std.push_back(curves.size() > 1 ? std::sqrt(ss / (m - 1.0)) : 0.0);
  }
  return out;
}

// Curve-corpus rows for one learning curve.
inline std::vector<CurveRecord> to_curve_records(const LearningCurve& curve,
                                                 const std::string& dataset,
                                                 StrategyId strategy, std::size_t n_labels) {
  std::vector<CurveRecord> out;
  for (const auto& p : curve.points) {
    CurveRecord r;
    r.dataset = dataset;
    r.run_id = curve.plan + "/trial-" + std::to_string(curve.trial);
    r.strategy = strategy;
    r.iter = p.snapshot.iter;
    r.n_train = p.n_train;
    r.n_labels = n_labels;
    r.cv_f1 = p.snapshot.cv_f1;
    r.neg_entropy = p.snapshot.neg_entropy;
    r.max_prob = p.snapshot.max_prob;
    r.margin = p.snapshot.margin;
    r.agreement = p.snapshot.agreement;
    r.neg_kl = p.snapshot.neg_kl;
    r.test_f1 = p.test_f1;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fasl
