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

// Persistent embedding cache.
//
// A cache is one directory holding `embeddings.bin`:
//
//   header : "FASLEMB1" | u32 len | encoder_id bytes | u32 dim
//   record : u64 key | u64 digest_hi | u64 digest_lo | u32 dim | dim x f32
//
// All integers and floats are little-endian. key is FNV-1a 64 of the text,
// digest is FNV-1a 128 of the text and is compared on every hit, so a key
// collision reads as a miss. Records are appended; a truncated tail record
// (crash during append) is ignored on open.
//
// Vectors are stored at 32-bit precision. Both the hit path and the miss path
// return the stored float values re-normalized in double precision, so a
// text always encodes to the same vector whether or not it was cached.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <unordered_map>
#include <vector>

#include "fasl/binary_io.hpp"
#include "fasl/encoder.hpp"
#include "fasl/hashing.hpp"

namespace fasl {

struct CacheCounters {
  std::size_t hits = 0;
  std::size_t misses = 0;
  std::size_t stores = 0;
};

class EmbeddingCache {
 public:
  static constexpr std::string_view kMagic = "FASLEMB1";

  // Opens (or creates) the cache in `dir` for the given encoder. A cache
  // created under a different encoder_id or dim is rejected.
  EmbeddingCache(const std::filesystem::path& dir, EncoderDescriptor encoder)
      : path_(dir / "embeddings.bin"), encoder_(std::move(encoder)) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create cache directory " + dir.string() + ": " + ec.message());
    if (std::filesystem::exists(path_)) {
      load();
    } else {
      binary::Writer w;
      w.raw(kMagic);
      w.str(encoder_.encoder_id);
      w.u32(static_cast<std::uint32_t>(encoder_.dim));
      append_bytes(w.bytes());
    }
  }

  // In-memory cache with no backing file.
  explicit EmbeddingCache(EncoderDescriptor encoder) : encoder_(std::move(encoder)) {}

  const EncoderDescriptor& encoder() const noexcept { return encoder_; }

  std::optional<Embedding> lookup(std::string_view text) const {
    const auto key = fnv1a64(text);
    const auto digest = fnv1a128(text);
    std::shared_lock lock(mutex_);
    auto range = entries_.equal_range(key);
    for (auto it = range.first; it != range.second; ++it) {
      if (it->second.digest == digest) return to_embedding(it->second.values);
    }
    return std::nullopt;
  }

  // Stores the vector at float precision and returns the value a later
  // lookup() will produce.
  Embedding store(std::string_view text, const Embedding& v) {
    require(static_cast<std::size_t>(v.size()) == encoder_.dim, "cache store: dim mismatch");
    Entry entry;
    entry.digest = fnv1a128(text);
    entry.values.resize(encoder_.dim);
    for (std::size_t i = 0; i < encoder_.dim; ++i) {
      entry.values[i] = static_cast<float>(v[static_cast<Eigen::Index>(i)]);
    }
    const auto key = fnv1a64(text);
    Embedding out = to_embedding(entry.values);
    std::unique_lock lock(mutex_);
    auto range = entries_.equal_range(key);
    for (auto it = range.first; it != range.second; ++it) {
      if (it->second.digest == entry.digest) return out;
    }
    if (!path_.empty()) {
      binary::Writer w;
      w.u64(key);
      w.u64(entry.digest.hi);
      w.u64(entry.digest.lo);
      w.u32(static_cast<std::uint32_t>(encoder_.dim));
      for (float f : entry.values) w.f32(f);
      append_bytes(w.bytes());
    }
    entries_.emplace(key, std::move(entry));
    return out;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  CacheCounters counters() const {
    return {hits_.load(), misses_.load(), stores_.load()};
  }
  void reset_counters() {
    hits_ = 0;
    misses_ = 0;
    stores_ = 0;
  }

  void count_hit() { ++hits_; }
  void count_miss() { ++misses_; }
  void count_store() { ++stores_; }

 private:
  struct Entry {
    Digest128 digest;
    std::vector<float> values;
  };

  static Embedding to_embedding(const std::vector<float>& values) {
    Embedding v(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
      v[static_cast<Eigen::Index>(i)] = static_cast<double>(values[i]);
    }
    normalize_in_place(v);
    return v;
  }

  void append_bytes(const std::string& bytes) {
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("cannot write embedding cache " + path_.string());
  }

  void load() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw IoError("cannot read embedding cache " + path_.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    binary::Reader r(bytes);
    try {
      if (r.raw(kMagic.size()) != kMagic) throw IoError("not an embedding cache: " + path_.string());
      const auto id = r.str();
      const auto dim = r.u32();
      if (id != encoder_.encoder_id || dim != encoder_.dim) {
        throw Error(ErrorCode::conflict, "embedding cache was built by encoder '" + id +
                                             "', not '" + encoder_.encoder_id + "'");
      }
    } catch (const IoError&) {
      throw IoError("corrupt embedding cache header: " + path_.string());
    }
    const std::size_t record_size = 8 + 16 + 4 + 4 * encoder_.dim;
    std::size_t valid_end = r.position();
    while (r.remaining() >= record_size) {
      const auto key = r.u64();
      Entry entry;
      entry.digest.hi = r.u64();
      entry.digest.lo = r.u64();
      const auto dim = r.u32();
      if (dim != encoder_.dim) throw IoError("corrupt embedding cache record");
      entry.values.resize(dim);
      for (auto& f : entry.values) f = r.f32();
      entries_.emplace(key, std::move(entry));
      valid_end = r.position();
    }
    if (valid_end != bytes.size()) {
      // Drop a partially written record so later appends stay aligned.
      std::filesystem::resize_file(path_, valid_end);
    }
  }

  std::filesystem::path path_;
  EncoderDescriptor encoder_;
  mutable std::shared_mutex mutex_;
  std::unordered_multimap<std::uint64_t, Entry> entries_;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
  std::atomic<std::size_t> stores_{0};
};

// Encodes texts through the cache; output order matches input order.
inline EmbeddingMatrix encode_batch_cached(const Encoder& encoder,
                                           std::span<const std::string> texts,
                                           EmbeddingCache& cache) {
  if (cache.encoder() != encoder.descriptor()) {
    throw Error(ErrorCode::conflict, "cache encoder '" + cache.encoder().encoder_id +
                                         "' does not match '" + encoder.id() + "'");
  }
  EmbeddingMatrix out(static_cast<Eigen::Index>(texts.size()),
                      static_cast<Eigen::Index>(encoder.dim()));
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (auto hit = cache.lookup(texts[i])) {
      cache.count_hit();
      out.row(static_cast<Eigen::Index>(i)) = hit->transpose();
      continue;
    }
    cache.count_miss();
    const Embedding stored = cache.store(texts[i], encoder.encode(texts[i]));
    cache.count_store();
    out.row(static_cast<Eigen::Index>(i)) = stored.transpose();
  }
  return out;
}

}  // namespace fasl
