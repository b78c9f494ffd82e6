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

// Text encoders. Every encoder maps a non-empty text to a unit-norm vector of
// fixed dimension and is identified by an encoder_id: two encoders with the
// same id must produce identical vectors for identical text.

#include <cctype>
#include <cmath>
#include <istream>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "fasl/corpus.hpp"
#include "fasl/error.hpp"
#include "fasl/hashing.hpp"

namespace fasl {

using Embedding = Eigen::VectorXd;
// One embedding per row.
using EmbeddingMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EncoderDescriptor {
  std::string encoder_id;
  std::size_t dim = 0;

  friend bool operator==(const EncoderDescriptor&, const EncoderDescriptor&) = default;
};

// Scales v to unit L2 norm in place. Zero or non-finite vectors are rejected.
inline void normalize_in_place(Embedding& v) {
  const double norm = v.norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw ValidationError("cannot normalize a zero or non-finite vector");
  }
  v /= norm;
}

class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual const EncoderDescriptor& descriptor() const = 0;
  virtual Embedding encode(std::string_view text) const = 0;

  std::size_t dim() const { return descriptor().dim; }
  const std::string& id() const { return descriptor().encoder_id; }
};

// Character n-gram hashing encoder. The text is ASCII-lowercased and wrapped
// in \x02 ... \x03 boundary bytes; every byte n-gram with n in [min_n, max_n]
// is hashed with FNV-1a 64. The low bits pick the bucket (h mod dim) and bit
// 32 picks the sign. Bucket values are signed n-gram counts, L2-normalized.
class HashingEncoder final : public Encoder {
 public:
  explicit HashingEncoder(std::size_t dim = 256, std::size_t min_n = 2, std::size_t max_n = 4)
      : min_n_(min_n), max_n_(max_n) {
    require(dim > 0, "encoder dim must be positive");
    require(min_n >= 1 && min_n <= max_n, "invalid n-gram range");
    desc_.dim = dim;
    desc_.encoder_id = "hashed-ngram-v1/dim=" + std::to_string(dim) + "/n=" +
                       std::to_string(min_n) + "-" + std::to_string(max_n);
  }

  const EncoderDescriptor& descriptor() const override { return desc_; }

  Embedding encode(std::string_view text) const override {
    if (text.empty()) throw ValidationError("cannot encode empty text");
    std::string padded;
    padded.reserve(text.size() + 2);
    padded.push_back('\x02');
    for (char c : text) {
      padded.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    padded.push_back('\x03');

    Embedding v = Embedding::Zero(static_cast<Eigen::Index>(desc_.dim));
    const std::string_view view(padded);
    for (std::size_t n = min_n_; n <= max_n_; ++n) {
      for (std::size_t i = 0; i + n <= view.size(); ++i) {
        const std::uint64_t h = fnv1a64(view.substr(i, n));
        const auto bucket = static_cast<Eigen::Index>(h % desc_.dim);
        v[bucket] += ((h >> 32) & 1U) ? -1.0 : 1.0;
      }
    }
    normalize_in_place(v);
    return v;
  }

 private:
  EncoderDescriptor desc_;
  std::size_t min_n_;
  std::size_t max_n_;
};

// Serves vectors computed elsewhere (an external sentence encoder, or
// synthetic data). Keys are the texts handed to encode().
class LookupEncoder final : public Encoder {
 public:
  LookupEncoder(std::unordered_map<std::string, Embedding> table, std::string name = "lookup")
      : table_(std::move(table)) {
    require(!table_.empty(), "lookup encoder needs at least one vector");
    desc_.dim = static_cast<std::size_t>(table_.begin()->second.size());
    // Id covers the content so stale caches are detected.
    std::vector<const std::string*> keys;
    for (auto& [k, v] : table_) {
      require(static_cast<std::size_t>(v.size()) == desc_.dim, "lookup vectors differ in dim");
      normalize_in_place(v);
      keys.push_back(&k);
    }
    std::sort(keys.begin(), keys.end(), [](auto* a, auto* b) { return *a < *b; });
    Digester d;
    for (auto* k : keys) {
      d.update(*k);
      const auto& v = table_.at(*k);
      d.update(std::string_view(reinterpret_cast<const char*>(v.data()),
                                sizeof(double) * static_cast<std::size_t>(v.size())));
    }
    desc_.encoder_id = name + "/dim=" + std::to_string(desc_.dim) + "/" + d.finish().hex();
  }

  const EncoderDescriptor& descriptor() const override { return desc_; }

  Embedding encode(std::string_view text) const override {
    if (text.empty()) throw ValidationError("cannot encode empty text");
    auto it = table_.find(std::string(text));
    if (it == table_.end()) {
      throw Error(ErrorCode::not_found, "no precomputed vector for '" + std::string(text) + "'");
    }
    return it->second;
  }

  bool contains(const std::string& text) const { return table_.count(text) != 0; }

 private:
  EncoderDescriptor desc_;
  std::unordered_map<std::string, Embedding> table_;
};

inline EmbeddingMatrix encode_all(const Encoder& encoder, std::span<const std::string> texts) {
  EmbeddingMatrix out(static_cast<Eigen::Index>(texts.size()),
                      static_cast<Eigen::Index>(encoder.dim()));
  for (std::size_t i = 0; i < texts.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = encoder.encode(texts[i]).transpose();
  }
  return out;
}

// Precomputed-vector file: delimited rows `id,v1,...,vd`. An optional header
// row whose first field is "id" is skipped. Vectors are normalized on load.
inline std::unordered_map<std::string, Embedding> load_precomputed(std::istream& in) {
  std::unordered_map<std::string, Embedding> out;
  std::vector<std::string> fields;
  std::size_t line = 1;
  std::size_t dim = 0;
  bool first = true;
  while (true) {
    const std::size_t record_line = line;
    if (!detail::read_csv_record(in, fields, line)) break;
    if (detail::blank_record(fields)) continue;
    if (first && !fields.empty() && fields[0] == "id") {
      first = false;
      continue;
    }
    first = false;
    if (fields.size() < 2) throw ParseError("row needs an id and at least one value", record_line);
    const std::size_t row_dim = fields.size() - 1;
    if (dim == 0) dim = row_dim;
    if (row_dim != dim) {
      throw ParseError("expected " + std::to_string(dim) + " values, got " +
                           std::to_string(row_dim),
                       record_line);
    }
    Embedding v(static_cast<Eigen::Index>(dim));
    for (std::size_t j = 0; j < dim; ++j) {
      try {
        std::size_t used = 0;
        v[static_cast<Eigen::Index>(j)] = std::stod(fields[j + 1], &used);
        if (used != fields[j + 1].size() &&
            fields[j + 1].find_first_not_of(" \t", used) != std::string::npos) {
          throw std::invalid_argument("trailing characters");
        }
      } catch (const std::exception&) {
        throw ParseError("invalid number '" + fields[j + 1] + "'", record_line);
      }
    }
    if (!v.allFinite()) throw ParseError("non-finite value", record_line);
    if (v.norm() == 0.0) throw ParseError("zero vector cannot be normalized", record_line);
    v.normalize();
    if (!out.emplace(fields[0], std::move(v)).second) {
      throw ConflictError("duplicate vector id '" + fields[0] + "'", {fields[0]});
    }
  }
  return out;
}

inline double cosine(const Embedding& a, const Embedding& b) {
  const double c = a.dot(b) / (a.norm() * b.norm());
  return std::clamp(c, -1.0, 1.0);
}

}  // namespace fasl
