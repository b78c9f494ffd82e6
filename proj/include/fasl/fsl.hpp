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

// Few-shot classifiers over fixed text embeddings.
//
// Label tuning (LT) keeps one embedding per label, initialized from the
// encoded label descriptions, and scores an input by scale * <x, w_label>.
// Training touches only the label embeddings: full-batch gradient descent on
//
//   mean_i CE(softmax(scale * E W^T)_i, y_i) + l2_to_init * ||W - W_init||_F^2
//
// Logistic regression (LR) is multinomial softmax regression with an
// unregularized bias, minimizing (1/n) * (sum_i CE_i + l2/2 * ||W||_F^2).
// Both optimizers backtrack on the step size so the objective never rises.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "fasl/corpus.hpp"
#include "fasl/encoder.hpp"
#include "fasl/error.hpp"

namespace fasl {

// One probability row per instance, columns in label-set order.
using PosteriorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Posterior {
  std::vector<double> probs;

  // Most probable label; ties go to the lowest index.
  std::size_t argmax() const {
    return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  }
};

inline std::size_t argmax_row(const PosteriorMatrix& p, Eigen::Index row) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < p.cols(); ++j) {
    if (p(row, j) > p(row, best)) best = j;
  }
  return static_cast<std::size_t>(best);
}

inline std::vector<Posterior> to_posteriors(const PosteriorMatrix& p) {
  std::vector<Posterior> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    out[static_cast<std::size_t>(i)].probs.assign(p.row(i).data(), p.row(i).data() + p.cols());
  }
  return out;
}

enum class ModelKind { label_tuning, logistic_regression };

inline std::string_view to_string(ModelKind kind) {
  return kind == ModelKind::label_tuning ? "lt" : "lr";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "lt" || s == "LT" || s == "label_tuning") return ModelKind::label_tuning;
  if (s == "lr" || s == "LR" || s == "logistic_regression") return ModelKind::logistic_regression;
  throw ValidationError("unknown model kind '" + std::string(s) + "' (expected lt or lr)");
}

struct TrainConfig {
  // label tuning
  std::size_t epochs = 100;
  double learning_rate = 0.05;
  double l2_to_init = 0.01;
  double scale = 10.0;
  // logistic regression
  double lr_l2 = 1.0;
  std::size_t max_iter = 500;
  double lr_step = 1.0;
  double lr_tolerance = 1e-6;
  // Retraining adds one pseudo-example per label built from its description.
  bool lr_include_descriptions = true;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Embedded examples with label indices into the model's label set.
struct TrainingSet {
  EmbeddingMatrix features;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

struct LabelTuningModel {
  LabelSet labels;
  EncoderDescriptor encoder;
  Eigen::MatrixXd label_matrix;  // |L| x dim
  Eigen::MatrixXd init_matrix;   // frozen zero-shot embeddings
  TrainConfig config;
};

struct LogRegModel {
  LabelSet labels;
  EncoderDescriptor encoder;
  Eigen::MatrixXd weights;  // |L| x dim
  Eigen::VectorXd bias;     // |L|
  TrainConfig config;
};

using FewShotModel = std::variant<LabelTuningModel, LogRegModel>;

inline ModelKind kind_of(const FewShotModel& m) {
  return std::holds_alternative<LabelTuningModel>(m) ? ModelKind::label_tuning
                                                     : ModelKind::logistic_regression;
}
inline const LabelSet& labels_of(const FewShotModel& m) {
  return std::visit([](const auto& x) -> const LabelSet& { return x.labels; }, m);
}
inline const EncoderDescriptor& encoder_of(const FewShotModel& m) {
  return std::visit([](const auto& x) -> const EncoderDescriptor& { return x.encoder; }, m);
}
inline const TrainConfig& config_of(const FewShotModel& m) {
  return std::visit([](const auto& x) -> const TrainConfig& { return x.config; }, m);
}

namespace detail {

inline void softmax_rows(Eigen::MatrixXd& logits) {
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - mx).exp();
    logits.row(i) /= logits.row(i).sum();
  }
}

// Mean cross-entropy given logits; also returns softmax(logits) in probs.
inline double mean_cross_entropy(const Eigen::MatrixXd& logits,
                                 const std::vector<std::size_t>& labels, Eigen::MatrixXd& probs) {
  probs = logits;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    loss += lse - logits(i, static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]));
  }
  softmax_rows(probs);
  return loss / static_cast<double>(logits.rows());
}

inline Eigen::MatrixXd one_hot(const std::vector<std::size_t>& labels, std::size_t n_labels) {
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()),
                                            static_cast<Eigen::Index>(n_labels));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(labels[i])) = 1.0;
  }
  return y;
}

inline void check_training_set(const TrainingSet& data, const LabelSet& labels, std::size_t dim) {
  if (data.size() == 0) throw ValidationError("training needs at least one example");
  if (static_cast<std::size_t>(data.features.rows()) != data.size()) {
    fail("training set: features and labels differ in length");
  }
  if (static_cast<std::size_t>(data.features.cols()) != dim) {
    fail("training set: embedding dim does not match the model");
  }
  for (auto y : data.labels) {
    if (y >= labels.size()) {
      throw ValidationError("unknown label index " + std::to_string(y));
    }
  }
}

}  // namespace detail

// Builds a TrainingSet from label names; unknown names are rejected.
inline TrainingSet make_training_set(const LabelSet& labels, EmbeddingMatrix features,
                                     std::span<const std::string> label_names) {
  TrainingSet out;
  out.features = std::move(features);
  out.labels.reserve(label_names.size());
  for (const auto& name : label_names) out.labels.push_back(labels.index_of(name));
  return out;
}

// --- label tuning ----------------------------------------------------------

// Objective value and gradient with respect to the label matrix.
inline double lt_objective(const LabelTuningModel& model, const TrainingSet& data,
                           Eigen::MatrixXd* gradient = nullptr) {
  const double scale = model.config.scale;
  const Eigen::MatrixXd logits = scale * (data.features * model.label_matrix.transpose());
  Eigen::MatrixXd probs;
  double loss = detail::mean_cross_entropy(logits, data.labels, probs);
  const Eigen::MatrixXd drift = model.label_matrix - model.init_matrix;
  loss += model.config.l2_to_init * drift.squaredNorm();
  if (gradient) {
    const Eigen::MatrixXd residual = probs - detail::one_hot(data.labels, model.labels.size());
    *gradient = (scale / static_cast<double>(data.size())) * residual.transpose() * data.features +
                2.0 * model.config.l2_to_init * drift;
  }
  return loss;
}

// Trains the label embeddings; returns a new model. `losses`, when given,
// receives the objective before the first step and after every epoch.
inline LabelTuningModel lt_train(LabelTuningModel model, const TrainingSet& data,
                                 std::vector<double>* losses = nullptr) {
  detail::check_training_set(data, model.labels, model.encoder.dim);
  Eigen::MatrixXd grad;
  double loss = lt_objective(model, data, &grad);
  if (losses) losses->assign(1, loss);
  for (std::size_t epoch = 0; epoch < model.config.epochs; ++epoch) {
    double step = model.config.learning_rate;
    bool moved = false;
    LabelTuningModel trial = model;
    for (int halvings = 0; halvings < 40; ++halvings, step *= 0.5) {
      trial.label_matrix = model.label_matrix - step * grad;
      const double trial_loss = lt_objective(trial, data);
      if (trial_loss <= loss) {
        moved = true;
        model.label_matrix = std::move(trial.label_matrix);
        loss = lt_objective(model, data, &grad);
        break;
      }
    }
    if (losses) losses->push_back(loss);
    if (!moved) break;
  }
  return model;
}

// --- logistic regression ---------------------------------------------------

inline double lr_objective(const LogRegModel& model, const TrainingSet& data,
                           Eigen::MatrixXd* grad_w = nullptr, Eigen::VectorXd* grad_b = nullptr) {
  Eigen::MatrixXd logits = data.features * model.weights.transpose();
  logits.rowwise() += model.bias.transpose();
  Eigen::MatrixXd probs;
  const double n = static_cast<double>(data.size());
  const double l2 = model.config.lr_l2;
  double objective = detail::mean_cross_entropy(logits, data.labels, probs);
  objective += 0.5 * l2 * model.weights.squaredNorm() / n;
  if (grad_w) {
    const Eigen::MatrixXd residual = probs - detail::one_hot(data.labels, model.labels.size());
    *grad_w = (residual.transpose() * data.features + l2 * model.weights) / n;
    *grad_b = residual.colwise().sum().transpose() / n;
  }
  return objective;
}

// Fits the regression by gradient descent with Armijo backtracking, starting
// from the model's current parameters. `objectives` records every accepted
// iterate.
inline LogRegModel lr_train(LogRegModel model, const TrainingSet& data,
                            std::vector<double>* objectives = nullptr) {
  detail::check_training_set(data, model.labels, model.encoder.dim);
  Eigen::MatrixXd gw;
  Eigen::VectorXd gb;
  double obj = lr_objective(model, data, &gw, &gb);
  if (objectives) objectives->assign(1, obj);
  double step = model.config.lr_step;
  LogRegModel trial = model;
  for (std::size_t iter = 0; iter < model.config.max_iter; ++iter) {
    const double gnorm2 = gw.squaredNorm() + gb.squaredNorm();
    if (std::sqrt(gnorm2) < model.config.lr_tolerance) break;
    bool moved = false;
    for (int halvings = 0; halvings < 50; ++halvings, step *= 0.5) {
      trial.weights = model.weights - step * gw;
      trial.bias = model.bias - step * gb;
      const double trial_obj = lr_objective(trial, data);
      if (trial_obj <= obj - 1e-4 * step * gnorm2) {
        model.weights = trial.weights;
        model.bias = trial.bias;
        obj = lr_objective(model, data, &gw, &gb);
        moved = true;
        break;
      }
    }
    if (objectives) objectives->push_back(obj);
    if (!moved) break;
    step = std::min(step * 2.0, 64.0 * model.config.lr_step);
  }
  return model;
}

// --- construction and inference -------------------------------------------

// Zero-shot model from the encoded label descriptions (one row per label).
inline FewShotModel zero_shot_from_descriptions(const LabelSet& labels,
                                                const EncoderDescriptor& encoder,
                                                const EmbeddingMatrix& descriptions,
                                                ModelKind kind, const TrainConfig& config = {}) {
  require(static_cast<std::size_t>(descriptions.rows()) == labels.size(),
          "need one description embedding per label");
  require(static_cast<std::size_t>(descriptions.cols()) == encoder.dim,
          "description embeddings do not match the encoder dim");
  if (kind == ModelKind::label_tuning) {
    LabelTuningModel m{labels, encoder, descriptions, descriptions, config};
    return m;
  }
  LogRegModel m{labels, encoder,
                Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()),
                                      static_cast<Eigen::Index>(encoder.dim)),
                Eigen::VectorXd::Zero(static_cast<Eigen::Index>(labels.size())), config};
  TrainingSet seed{descriptions, {}};
  for (std::size_t i = 0; i < labels.size(); ++i) seed.labels.push_back(i);
  return lr_train(std::move(m), seed);
}

inline EmbeddingMatrix encode_descriptions(const LabelSet& labels, const Encoder& encoder) {
  std::vector<std::string> texts;
  for (const auto& e : labels.entries()) {
    if (e.description.empty()) throw ValidationError("label '" + e.name + "' has no description");
    texts.push_back(e.description);
  }
  return encode_all(encoder, texts);
}

inline FewShotModel zero_shot_init(const LabelSet& labels, const Encoder& encoder, ModelKind kind,
                                   const TrainConfig& config = {}) {
  return zero_shot_from_descriptions(labels, encoder.descriptor(),
                                     encode_descriptions(labels, encoder), kind, config);
}

// Retrains from the zero-shot initialization on all examples. For LR the
// description pseudo-examples are included when configured.
inline FewShotModel fit_from_scratch(const LabelSet& labels, const EncoderDescriptor& encoder,
                                     const EmbeddingMatrix& descriptions, ModelKind kind,
                                     const TrainingSet& data, const TrainConfig& config = {}) {
  FewShotModel model = zero_shot_from_descriptions(labels, encoder, descriptions, kind, config);
  if (data.size() == 0) return model;
  if (kind == ModelKind::label_tuning) {
    return lt_train(std::get<LabelTuningModel>(std::move(model)), data);
  }
  TrainingSet all = data;
  if (config.lr_include_descriptions) {
    const Eigen::Index n = data.features.rows();
    all.features.resize(n + descriptions.rows(), descriptions.cols());
    all.features.topRows(n) = data.features;
    all.features.bottomRows(descriptions.rows()) = descriptions;
    for (std::size_t i = 0; i < labels.size(); ++i) all.labels.push_back(i);
  }
  return lr_train(std::get<LogRegModel>(std::move(model)), all);
}

inline PosteriorMatrix predict_embeddings(const FewShotModel& model,
                                          const EmbeddingMatrix& features) {
  const auto& enc = encoder_of(model);
  if (features.rows() > 0 && static_cast<std::size_t>(features.cols()) != enc.dim) {
    throw Error(ErrorCode::invalid_argument, "embedding dim does not match the model encoder");
  }
  Eigen::MatrixXd logits;
  if (const auto* lt = std::get_if<LabelTuningModel>(&model)) {
    logits = lt->config.scale * (features * lt->label_matrix.transpose());
  } else {
    const auto& lr = std::get<LogRegModel>(model);
    logits = features * lr.weights.transpose();
    logits.rowwise() += lr.bias.transpose();
  }
  detail::softmax_rows(logits);
  return logits;
}

// Inference on raw texts; the encoder must be the one the model was built with.
inline PosteriorMatrix predict(const FewShotModel& model, const Encoder& encoder,
                               std::span<const std::string> texts) {
  if (encoder.descriptor() != encoder_of(model)) {
    throw Error(ErrorCode::conflict, "model was built with encoder '" +
                                         encoder_of(model).encoder_id + "', got '" +
                                         encoder.id() + "'");
  }
  return predict_embeddings(model, encode_all(encoder, texts));
}

// Rounds every parameter to 32-bit precision, the precision of model files.
inline FewShotModel quantize(FewShotModel model) {
  auto round = [](auto& m) { m = m.template cast<float>().template cast<double>(); };
  if (auto* lt = std::get_if<LabelTuningModel>(&model)) {
    round(lt->label_matrix);
    round(lt->init_matrix);
  } else {
    auto& lr = std::get<LogRegModel>(model);
    round(lr.weights);
    round(lr.bias);
  }
  return model;
}

}  // namespace fasl
