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

// Seeded sampling helpers. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; the distributions below are written out
// because the standard library ones are implementation-defined, and curves
// must be reproducible across toolchains.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace fasl {

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Uniform integer in [0, n). Rejection sampling, no modulo bias.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = Rng::max() - (Rng::max() % bound + 1) % bound;
  std::uint64_t draw = rng();
  while (draw > limit) draw = rng();
  return static_cast<std::size_t>(draw % bound);
}

// Uniform real in [0, 1).
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller; stateless (the second variate is dropped).
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template <typename T>
void shuffle(std::vector<T>& values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    std::swap(values[i - 1], values[uniform_index(rng, i)]);
  }
}

// k distinct indices from [0, n) in draw order (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n,
                                                           std::size_t k) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  if (k > n) k = n;
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(perm[i], perm[i + uniform_index(rng, n - i)]);
  }
  perm.resize(k);
  return perm;
}

}  // namespace fasl
