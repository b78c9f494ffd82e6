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

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>

namespace fasl {

// FNV-1a, 64 bit.
inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t state = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    state ^= c;
    state *= 0x100000001b3ULL;
  }
  return state;
}

struct Digest128 {
  std::uint64_t hi = 0;
  std::uint64_t lo = 0;

  friend bool operator==(const Digest128&, const Digest128&) = default;

  std::string hex() const {
    std::ostringstream out;
    out << std::hex << std::setfill('0') << std::setw(16) << hi << std::setw(16) << lo;
    return out.str();
  }
};

// FNV-1a, 128 bit, incremental. Chunks passed to update() are
// length-prefixed so ("ab","c") and ("a","bc") differ.
class Digester {
 public:
  void update(std::string_view bytes) {
    std::uint64_t size = bytes.size();
    for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(size >> (8 * i)));
    for (unsigned char c : bytes) mix(c);
  }
  void update_raw(std::string_view bytes) {
    for (unsigned char c : bytes) mix(c);
  }
  Digest128 finish() const {
    return {static_cast<std::uint64_t>(state_ >> 64), static_cast<std::uint64_t>(state_)};
  }

 private:
  using u128 = unsigned __int128;
  static constexpr u128 kPrime = (static_cast<u128>(0x0000000001000000ULL) << 64) | 0x13bULL;

  void mix(unsigned char c) {
    state_ ^= c;
    state_ *= kPrime;
  }

  u128 state_ = (static_cast<u128>(0x6c62272e07bb0142ULL) << 64) | 0x62b821756295c58dULL;
};

inline Digest128 fnv1a128(std::string_view bytes) {
  Digester d;
  d.update_raw(bytes);
  return d.finish();
}

}  // namespace fasl
