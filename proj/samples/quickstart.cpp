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

// Minimal library walk-through: zero-shot model from label descriptions,
// one margin-selected batch labeled by hand, retrain, classify.

#include <iostream>
#include <vector>

#include "fasl/fasl.hpp"

int main() {
  using namespace fasl;
  LabelSet labels({{"sports", "sports match team score game"},
                   {"weather", "weather rain sun forecast storm"}});
  Pool pool({{"1", "the team won the match in overtime", "sports"},
             {"2", "heavy rain expected tomorrow", "weather"},
             {"3", "storm warning for the coast", "weather"},
             {"4", "final score was three to one", "sports"},
             {"5", "sunny skies all weekend", "weather"},
             {"6", "the striker scored twice", "sports"}});

  HashingEncoder encoder(256);
  std::vector<std::string> texts;
  for (const auto& t : pool.instances()) texts.push_back(t.text);
  const EmbeddingMatrix x = encode_all(encoder, texts);
  const EmbeddingMatrix desc = encode_descriptions(labels, encoder);

  FewShotModel model = zero_shot_init(labels, encoder, ModelKind::label_tuning, {});
  const PosteriorMatrix p = predict_embeddings(model, x);

  PoolState state;
  for (const auto& t : pool.instances()) state.ids.push_back(t.id);
  state.embeddings = &x;
  state.posteriors = &p;
  state.n_labels = labels.size();
  SelectionConfig sel;
  sel.batch_k = 2;
  const auto batch = select(state, StrategyId::margin, sel);

  TrainingSet data;
  data.features.resize(static_cast<Eigen::Index>(batch.size()), x.cols());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto row = *pool.find(batch[i]);
    std::cout << "annotate " << batch[i] << ": " << pool[row].text << "\n";
    data.features.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(row));
    data.labels.push_back(labels.index_of(*pool[row].gold_label));
  }
  model = fit_from_scratch(labels, encoder.descriptor(), desc, ModelKind::label_tuning, data, {});

  for (const auto& text : {std::string("rain and storms in the forecast"), std::string("the team scored late in the match")}) {
    const auto post = predict(model, encoder, std::vector<std::string>{text});
    std::cout << text << " -> " << labels.name(argmax_row(post, 0)) << "\n";
  }
  return 0;
}
