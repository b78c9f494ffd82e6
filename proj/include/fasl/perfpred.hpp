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

// Performance prediction: label-free convergence signals computed on a fixed
// unlabeled sample T after every iteration, the feature vectors built from
// them, the normalized-F1 regression target, the tau stopping rule and the
// evaluation of a predictor against fixed-step baselines.

#include <algorithm>
#include <array>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fasl/error.hpp"
#include "fasl/forest.hpp"
#include "fasl/fsl.hpp"
#include "fasl/metrics.hpp"
#include "fasl/random.hpp"
#include "fasl/select.hpp"

namespace fasl {

inline constexpr std::size_t kDefaultSampleSize = 1000;
inline constexpr std::size_t kDefaultHistory = 5;
inline constexpr double kDefaultTau = 0.95;

// Signals averaged over T for one iteration.
struct IterationSnapshot {
  std::size_t iter = 0;
  std::size_t n_train = 0;
  std::optional<double> cv_f1;
  double neg_entropy = 0.0;
  double max_prob = 0.0;
  double margin = 0.0;
  double agreement = 1.0;
  double neg_kl = 0.0;
  // Posteriors on T, kept for the next iteration's agreement and KL.
  PosteriorMatrix posteriors_T;
};

inline constexpr std::size_t kSignalCount = 6;
inline constexpr std::array<std::string_view, kSignalCount> kSignalNames = {
    "cv_f1", "neg_entropy", "max_prob", "margin", "agreement", "neg_kl"};

// Signal values in kSignalNames order; an absent cv_f1 reads as 0.
inline std::array<double, kSignalCount> signal_values(const IterationSnapshot& s) {
  return {s.cv_f1.value_or(0.0), s.neg_entropy, s.max_prob, s.margin, s.agreement, s.neg_kl};
}

// Uniform sample of min(size, n) distinct positions out of n.
inline std::vector<std::size_t> sample_T(std::size_t pool_size, std::size_t size,
                                         std::uint64_t seed) {
  Rng rng = make_rng(seed);
  auto picks = sample_without_replacement(rng, pool_size, size);
  std::sort(picks.begin(), picks.end());
  return picks;
}

// Signals for `current` posteriors on T. `previous` is the prior iteration's
// posteriors on the same T, or nullptr at the first iteration (agreement 1,
// neg_kl 0).
inline IterationSnapshot snapshot(const PosteriorMatrix& current, const PosteriorMatrix* previous,
                                  std::size_t iter, std::size_t n_train,
                                  std::optional<double> cv_f1) {
  if (current.rows() == 0) throw ValidationError("sample T is empty");
  if (previous && (previous->rows() != current.rows() || previous->cols() != current.cols())) {
    fail("previous posteriors do not match the sample T");
  }
  IterationSnapshot s;
  s.iter = iter;
  s.n_train = n_train;
  s.cv_f1 = cv_f1;
  const auto cols = static_cast<std::size_t>(current.cols());
  double ent = 0.0, maxp = 0.0, marg = 0.0, agree = 0.0, kl = 0.0;
  for (Eigen::Index i = 0; i < current.rows(); ++i) {
    std::span<const double> p(current.row(i).data(), cols);
    ent += uncertainty_score(p, UncertaintyKind::entropy);
    maxp += -uncertainty_score(p, UncertaintyKind::least_confidence);
    marg += -uncertainty_score(p, UncertaintyKind::margin);
    if (previous) {
      std::span<const double> q(previous->row(i).data(), cols);
      agree += argmax_row(current, i) == argmax_row(*previous, i) ? 1.0 : 0.0;
      kl += kl_divergence(p, q);
    }
  }
  const double n = static_cast<double>(current.rows());
  s.neg_entropy = -ent / n;
  s.max_prob = maxp / n;
  s.margin = marg / n;
  s.agreement = previous ? agree / n : 1.0;
  s.neg_kl = previous ? -kl / n : 0.0;
  s.posteriors_T = current;
  return s;
}

// Trains on `train` and returns posteriors for `test`.
using FoldTrainer =
    std::function<PosteriorMatrix(const TrainingSet& train, const EmbeddingMatrix& test)>;

// Stratified cross-validated macro F1 over all n_labels labels, from pooled
// out-of-fold predictions. Classes with at least `folds` examples are spread
// round-robin over the folds; smaller classes hold out one example per fold
// (leave-one-out over their members); a class with a single example is never
// held out. Absent when fewer than two classes are labeled.
inline std::optional<double> cross_validated_f1(const TrainingSet& data, std::size_t n_labels,
                                                const FoldTrainer& trainer,
                                                std::uint64_t seed, std::size_t folds = 5) {
  std::vector<std::vector<std::size_t>> by_class(n_labels);
  for (std::size_t i = 0; i < data.size(); ++i) by_class.at(data.labels[i]).push_back(i);
  std::size_t classes = 0;
  for (const auto& c : by_class) classes += c.empty() ? 0 : 1;
  if (classes < 2) return std::nullopt;

  Rng rng = make_rng(seed);
  constexpr std::size_t kNever = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> fold_of(data.size(), kNever);
  for (auto& members : by_class) {
    if (members.size() < 2) continue;
    shuffle(members, rng);
    for (std::size_t j = 0; j < members.size(); ++j) fold_of[members[j]] = j % folds;
  }
  std::vector<std::size_t> gold, predicted;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t i = 0; i < data.size(); ++i) {
      (fold_of[i] == f ? test_rows : train_rows).push_back(i);
    }
    if (test_rows.empty() || train_rows.empty()) continue;
    TrainingSet train;
    train.features.resize(static_cast<Eigen::Index>(train_rows.size()), data.features.cols());
    for (std::size_t j = 0; j < train_rows.size(); ++j) {
      train.features.row(static_cast<Eigen::Index>(j)) =
          data.features.row(static_cast<Eigen::Index>(train_rows[j]));
      train.labels.push_back(data.labels[train_rows[j]]);
    }
    EmbeddingMatrix test(static_cast<Eigen::Index>(test_rows.size()), data.features.cols());
    for (std::size_t j = 0; j < test_rows.size(); ++j) {
      test.row(static_cast<Eigen::Index>(j)) = data.features.row(static_cast<Eigen::Index>(test_rows[j]));
    }
    const PosteriorMatrix p = trainer(train, test);
    for (std::size_t j = 0; j < test_rows.size(); ++j) {
      gold.push_back(data.labels[test_rows[j]]);
      predicted.push_back(argmax_row(p, static_cast<Eigen::Index>(j)));
    }
  }
  if (gold.empty()) return std::nullopt;
  return macro_f1(gold, predicted, n_labels);
}

// f1 / max(f1).
inline std::vector<double> normalize_curve(const std::vector<double>& f1_by_iter) {
  if (f1_by_iter.empty()) throw ValidationError("cannot normalize an empty curve");
  const double mx = *std::max_element(f1_by_iter.begin(), f1_by_iter.end());
  if (!(mx > 0.0)) throw ValidationError("cannot normalize a curve without a positive value");
  std::vector<double> out;
  out.reserve(f1_by_iter.size());
  for (double v : f1_by_iter) out.push_back(v / mx);
  return out;
}

// --- features --------------------------------------------------------------

struct FeatureLayout {
  std::size_t history = kDefaultHistory;

  std::size_t size() const { return 2 + kAllStrategies.size() + kSignalCount * (history + 1); }

  std::vector<std::string> names() const {
    std::vector<std::string> out{"n_train"};
    for (auto s : kAllStrategies) out.push_back("strategy=" + std::string(to_string(s)));
    out.push_back("n_labels");
    for (auto name : kSignalNames) {
      for (std::size_t lag = 0; lag <= history; ++lag) {
        out.push_back(std::string(name) + (lag == 0 ? "" : "[-" + std::to_string(lag) + "]"));
      }
    }
    return out;
  }
};

// Features for iteration i of a run: base features, then for every signal its
// value at i followed by the values at i-1 ... i-h. Iterations before the
// first one repeat the earliest available value.
inline std::vector<double> build_features(const std::vector<std::array<double, kSignalCount>>& signals,
                                          std::size_t i, std::size_t n_train, StrategyId strategy,
                                          std::size_t n_labels, const FeatureLayout& layout = {}) {
  require(i < signals.size(), "feature index past the recorded history");
  std::vector<double> f;
  f.reserve(layout.size());
  f.push_back(static_cast<double>(n_train));
  for (auto s : kAllStrategies) f.push_back(s == strategy ? 1.0 : 0.0);
  f.push_back(static_cast<double>(n_labels));
  for (std::size_t k = 0; k < kSignalCount; ++k) {
    for (std::size_t lag = 0; lag <= layout.history; ++lag) {
      const std::size_t at = i >= lag ? i - lag : 0;
      f.push_back(signals[at][k]);
    }
  }
  return f;
}

// --- curve corpus ----------------------------------------------------------

// One iteration of one simulated run, as stored in curve-corpus files.
struct CurveRecord {
  std::string dataset;
  std::string run_id;
  StrategyId strategy = StrategyId::random;
  std::size_t iter = 0;
  std::size_t n_train = 0;
  std::size_t n_labels = 0;
  std::optional<double> cv_f1;
  double neg_entropy = 0.0;
  double max_prob = 0.0;
  double margin = 0.0;
  double agreement = 1.0;
  double neg_kl = 0.0;
  double test_f1 = 0.0;

  std::array<double, kSignalCount> signals() const {
    return {cv_f1.value_or(0.0), neg_entropy, max_prob, margin, agreement, neg_kl};
  }

  nlohmann::json to_json() const {
    return {{"dataset", dataset},
            {"run_id", run_id},
            {"strategy", std::string(to_string(strategy))},
            {"iter", iter},
            {"n_train", n_train},
            {"n_labels", n_labels},
            {"cv_f1", cv_f1 ? nlohmann::json(*cv_f1) : nlohmann::json(nullptr)},
            {"neg_entropy", neg_entropy},
            {"max_prob", max_prob},
            {"margin", margin},
            {"agreement", agreement},
            {"neg_kl", neg_kl},
            {"test_f1", test_f1}};
  }

  static CurveRecord from_json(const nlohmann::json& j) {
    CurveRecord r;
    r.dataset = j.at("dataset").get<std::string>();
    r.run_id = j.at("run_id").get<std::string>();
    r.strategy = parse_strategy(j.at("strategy").get<std::string>());
    r.iter = j.at("iter").get<std::size_t>();
    r.n_train = j.at("n_train").get<std::size_t>();
    r.n_labels = j.at("n_labels").get<std::size_t>();
    if (j.contains("cv_f1") && !j["cv_f1"].is_null()) r.cv_f1 = j["cv_f1"].get<double>();
    r.neg_entropy = j.at("neg_entropy").get<double>();
    r.max_prob = j.at("max_prob").get<double>();
    r.margin = j.at("margin").get<double>();
    r.agreement = j.at("agreement").get<double>();
    r.neg_kl = j.at("neg_kl").get<double>();
    r.test_f1 = j.at("test_f1").get<double>();
    return r;
  }
};

inline void write_curve_records(std::ostream& out, const std::vector<CurveRecord>& records) {
  for (const auto& r : records) out << r.to_json().dump() << '\n';
}

inline std::vector<CurveRecord> read_curve_records(std::istream& in) {
  std::vector<CurveRecord> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(CurveRecord::from_json(nlohmann::json::parse(text)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad curve record: ") + e.what(), line);
    } catch (const Error& e) {
      throw ParseError(e.what(), line);
    }
  }
  return out;
}

// A run's rows turned into predictor inputs.
struct RunSeries {
  std::string dataset;
  std::string run_id;
  StrategyId strategy = StrategyId::random;
  std::vector<double> n_train;
  std::vector<std::vector<double>> features;
  std::vector<double> targets;  // normalized test F1
  std::vector<double> test_f1;
};

// Groups records into runs (ordered by dataset, run_id), sorts each by iter,
// and builds features and normalized targets.
inline std::vector<RunSeries> build_series(const std::vector<CurveRecord>& records,
                                           const FeatureLayout& layout = {}) {
  std::map<std::pair<std::string, std::string>, std::vector<const CurveRecord*>> runs;
  for (const auto& r : records) runs[{r.dataset, r.run_id}].push_back(&r);
  std::vector<RunSeries> out;
  for (auto& [key, rows] : runs) {
    std::sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->iter < b->iter; });
    RunSeries s;
    s.dataset = key.first;
    s.run_id = key.second;
    s.strategy = rows.front()->strategy;
    std::vector<std::array<double, kSignalCount>> signals;
    for (auto* r : rows) {
      signals.push_back(r->signals());
      s.test_f1.push_back(r->test_f1);
      s.n_train.push_back(static_cast<double>(r->n_train));
    }
    s.targets = normalize_curve(s.test_f1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      s.features.push_back(build_features(signals, i, rows[i]->n_train, rows[i]->strategy,
                                          rows[i]->n_labels, layout));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Trains one forest per dataset on the runs of every other dataset.
inline std::map<std::string, ForestModel> leave_one_out_train(const std::vector<RunSeries>& runs,
                                                             const ForestConfig& config) {
  std::map<std::string, std::size_t> groups;
  for (const auto& r : runs) ++groups[r.dataset];
  if (groups.size() < 2) throw ValidationError("leave-one-out needs at least two dataset groups");
  std::map<std::string, ForestModel> out;
  for (const auto& [held_out, count] : groups) {
    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (const auto& r : runs) {
      if (r.dataset == held_out) continue;
      x.insert(x.end(), r.features.begin(), r.features.end());
      y.insert(y.end(), r.targets.begin(), r.targets.end());
    }
    out.emplace(held_out, forest_fit(x, y, config));
  }
  return out;
}

// --- predictor evaluation -------------------------------------------------

struct StoppingRule {
  double tau = kDefaultTau;
};

// Aligned curves of one run.
struct RunCurve {
  std::vector<double> n_train;
  std::vector<double> predictions;
  std::vector<double> targets;  // normalized test F1
  std::vector<double> test_f1;  // raw test F1
};

struct StopStats {
  std::size_t runs = 0;
  std::size_t stopped = 0;  // runs whose prediction ever exceeded tau
  // Means over all runs. A run that never stops ends at its last point, when
  // the budget is spent.
  double test_f1 = std::numeric_limits<double>::quiet_NaN();
  double normalized_f1 = std::numeric_limits<double>::quiet_NaN();
  double err = std::numeric_limits<double>::quiet_NaN();
  double instances = std::numeric_limits<double>::quiet_NaN();
};

struct PredictorReport {
  std::size_t points = 0;
  double mse_per_myriad = 0.0;  // MSE x 10^4
  double auc = std::numeric_limits<double>::quiet_NaN();
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  StopStats stop;
};

// First index whose prediction exceeds tau, if any.
inline std::optional<std::size_t> stop_index(const std::vector<double>& predictions, double tau) {
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] > tau) return i;
  }
  return std::nullopt;
}

// Area under the ROC curve of `scores` for binary `positive`, by the rank
// statistic with tied scores counted one half.
inline double rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (positive[order[t]]) rank_sum += avg_rank;
    }
    i = j;
  }
  for (bool p : positive) (p ? pos : neg) += 1.0;
  if (pos == 0.0 || neg == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

inline PredictorReport evaluate_predictor(const std::vector<RunCurve>& runs,
                                          const StoppingRule& rule = {}) {
  PredictorReport rep;
  std::vector<double> scores;
  std::vector<bool> positive;
  double sq = 0.0, tp = 0.0, fp = 0.0, fn = 0.0;
  double stop_f1 = 0.0, stop_norm = 0.0, stop_n = 0.0, counted = 0.0;
  for (const auto& run : runs) {
    const std::size_t n = run.predictions.size();
    if (run.targets.size() != n || run.n_train.size() != n || run.test_f1.size() != n) {
      throw ValidationError("prediction and target curves differ in length");
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double e = run.predictions[i] - run.targets[i];
      sq += e * e;
      const bool truth = run.targets[i] > rule.tau;
      const bool guess = run.predictions[i] > rule.tau;
      tp += truth && guess;
      fp += !truth && guess;
      fn += truth && !guess;
      scores.push_back(run.predictions[i]);
      positive.push_back(truth);
    }
    ++rep.stop.runs;
    if (n == 0) continue;
    auto s = stop_index(run.predictions, rule.tau);
    if (s) ++rep.stop.stopped;
    const std::size_t at = s.value_or(n - 1);
    stop_f1 += run.test_f1[at];
    stop_norm += run.targets[at];
    stop_n += run.n_train[at];
    ++counted;
  }
  rep.points = scores.size();
  if (rep.points == 0) throw ValidationError("no points to evaluate");
  rep.mse_per_myriad = 1e4 * sq / static_cast<double>(rep.points);
  rep.auc = rank_auc(scores, positive);
  rep.precision = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
  rep.recall = tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
  rep.f1 = rep.precision + rep.recall > 0.0
               ? 2.0 * rep.precision * rep.recall / (rep.precision + rep.recall)
               : 0.0;
  if (counted > 0.0) {
    const double m = counted;
    rep.stop.test_f1 = stop_f1 / m;
    rep.stop.normalized_f1 = stop_norm / m;
    rep.stop.err = (1.0 - rep.stop.normalized_f1) * 100.0;
    rep.stop.instances = stop_n / m;
  }
  return rep;
}

// Fixed-step baseline: predicts 0 before `instances` labels and 1 from then on.
inline std::vector<double> baseline_predictions(const std::vector<double>& n_train,
                                                double instances) {
  std::vector<double> out;
  out.reserve(n_train.size());
  for (double n : n_train) out.push_back(n < instances ? 0.0 : 1.0);
  return out;
}

// Delimited report mirroring the predictor-evaluation table. Percent-scaled
// except MSE (per ten thousand) and instances.
struct ReportRow {
  std::string model;
  PredictorReport report;
};

inline void write_report_table(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "model,MSE,AUC,F1,P,R,test F1,err,instances,stopped,runs\n";
  auto num = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    std::ostringstream s;
    s << std::fixed << std::setprecision(1) << v;
    return s.str();
  };
  for (const auto& r : rows) {
    const auto& p = r.report;
    out << r.model << ',' << num(p.mse_per_myriad) << ',' << num(100 * p.auc) << ','
        << num(100 * p.f1) << ',' << num(100 * p.precision) << ',' << num(100 * p.recall) << ','
        << num(100 * p.stop.test_f1) << ',' << num(p.stop.err) << ','
        << num(p.stop.instances) << ',' << p.stop.stopped << ',' << p.stop.runs << '\n';
  }
}

}  // namespace fasl
