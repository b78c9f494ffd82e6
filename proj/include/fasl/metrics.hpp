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

#include <span>
#include <vector>

#include "fasl/error.hpp"

namespace fasl {

// Unweighted mean of per-label F1 over all n_labels labels. A label that
// appears in neither gold nor predictions scores 0.
inline double macro_f1(std::span<const std::size_t> gold, std::span<const std::size_t> predicted,
                       std::size_t n_labels) {
  if (gold.empty()) throw ValidationError("macro F1 of an empty sequence");
  if (gold.size() != predicted.size()) fail("macro F1: gold and predictions differ in length");
  require(n_labels > 0, "macro F1 needs at least one label");
  std::vector<double> tp(n_labels, 0.0), fp(n_labels, 0.0), fn(n_labels, 0.0);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    require(gold[i] < n_labels && predicted[i] < n_labels, "macro F1: label out of range");
    if (gold[i] == predicted[i]) {
      tp[gold[i]] += 1.0;
    } else {
      fp[predicted[i]] += 1.0;
      fn[gold[i]] += 1.0;
    }
  }
  double total = 0.0;
  for (std::size_t l = 0; l < n_labels; ++l) {
    const double denom = 2.0 * tp[l] + fp[l] + fn[l];
    total += denom > 0.0 ? 2.0 * tp[l] / denom : 0.0;
  }
  return total / static_cast<double>(n_labels);
}

}  // namespace fasl
