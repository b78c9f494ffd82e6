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

// Dataset ingestion, pools, label-distribution statistics and the
// exponential-decay down-sampler used to build unbalanced variants.

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "fasl/error.hpp"
#include "fasl/random.hpp"

namespace fasl {

struct TextInstance {
  std::string id;
  std::string text;
  std::optional<std::string> gold_label;

  friend bool operator==(const TextInstance&, const TextInstance&) = default;
};

struct LabelEntry {
  std::string name;
  std::string description;

  friend bool operator==(const LabelEntry&, const LabelEntry&) = default;
};

// Ordered label inventory. Posteriors and weight matrices follow this order.
class LabelSet {
 public:
  LabelSet() = default;

  explicit LabelSet(std::vector<LabelEntry> entries) : entries_(std::move(entries)) {
    if (entries_.size() < 2) throw ValidationError("label set needs at least 2 labels");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (e.name.empty()) throw ValidationError("label name must be non-empty");
      if (e.description.empty()) {
        throw ValidationError("label '" + e.name + "' has no description", {e.name});
      }
      if (!index_.emplace(e.name, i).second) {
        throw ValidationError("duplicate label name '" + e.name + "'", {e.name});
      }
    }
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<LabelEntry>& entries() const noexcept { return entries_; }
  const LabelEntry& operator[](std::size_t i) const { return entries_.at(i); }
  const std::string& name(std::size_t i) const { return entries_.at(i).name; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t index_of(const std::string& name) const {
    auto idx = find(name);
    if (!idx) throw ValidationError("unknown label '" + name + "'", {name});
    return *idx;
  }

  friend bool operator==(const LabelSet& a, const LabelSet& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<LabelEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Immutable collection of instances with unique ids.
class Pool {
 public:
  Pool() = default;

  explicit Pool(std::vector<TextInstance> instances) : instances_(std::move(instances)) {
    index_.reserve(instances_.size());
    for (std::size_t i = 0; i < instances_.size(); ++i) {
      const auto& inst = instances_[i];
      if (inst.text.empty()) {
        throw ValidationError("instance '" + inst.id + "' has empty text", {inst.id});
      }
      if (!index_.emplace(inst.id, i).second) {
        throw ConflictError("duplicate instance id '" + inst.id + "'", {inst.id});
      }
    }
  }

  std::size_t size() const noexcept { return instances_.size(); }
  bool empty() const noexcept { return instances_.empty(); }
  const std::vector<TextInstance>& instances() const noexcept { return instances_; }
  const TextInstance& operator[](std::size_t i) const { return instances_.at(i); }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  bool fully_labeled() const {
    return std::all_of(instances_.begin(), instances_.end(),
                       [](const TextInstance& t) { return t.gold_label.has_value(); });
  }

  // Sub-pool keeping the given positions, in the order given.
  Pool subset(const std::vector<std::size_t>& positions) const {
    std::vector<TextInstance> out;
    out.reserve(positions.size());
    for (auto p : positions) out.push_back(instances_.at(p));
    return Pool(std::move(out));
  }

 private:
  std::vector<TextInstance> instances_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class InputFormat { delimited_table, record_lines };

struct IngestResult {
  Pool pool;
  // Distinct gold labels in order of first appearance.
  std::vector<std::string> observed_labels;
};

namespace detail {

// One RFC-4180 record. Returns false at end of input. Quoted fields may span
// lines; `line` is advanced past every newline consumed.
inline bool read_csv_record(std::istream& in, std::vector<std::string>& fields,
                            std::size_t& line) {
  fields.clear();
  if (in.peek() == std::char_traits<char>::eof()) return false;
  std::string field;
  bool quoted = false;
  bool was_quoted = false;
  const std::size_t start_line = line;
  char c;
  while (in.get(c)) {
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      if (!field.empty()) throw ParseError("unexpected quote inside unquoted field", line);
      if (was_quoted) throw ParseError("unexpected quote after closing quote", line);
      quoted = true;
      was_quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
      was_quoted = false;
    } else if (c == '\r') {
      // tolerated before \n
    } else if (c == '\n') {
      ++line;
      fields.push_back(std::move(field));
      return true;
    } else {
      if (was_quoted) throw ParseError("characters after closing quote", line);
      field.push_back(c);
    }
  }
  if (quoted) throw ParseError("unterminated quoted field", start_line);
  fields.push_back(std::move(field));
  return true;
}

inline bool blank_record(const std::vector<std::string>& fields) {
  return fields.size() == 1 && fields[0].empty();
}

}  // namespace detail

// Parses a pool from a delimited table (header `id,text[,label]`) or from
// record lines (one JSON object per line with `id`, `text`, optional `label`).
inline IngestResult ingest(std::istream& in, InputFormat format) {
  std::vector<TextInstance> rows;
  std::vector<std::string> observed;
  std::unordered_set<std::string> seen_labels;
  std::unordered_set<std::string> seen_ids;

  auto add = [&](TextInstance inst, std::size_t line) {
    if (inst.id.empty()) throw ParseError("empty id", line);
    if (inst.text.empty()) throw ParseError("empty text for id '" + inst.id + "'", line);
    if (!seen_ids.insert(inst.id).second) {
      throw ConflictError("duplicate instance id '" + inst.id + "' at line " +
                              std::to_string(line),
                          {inst.id});
    }
    if (inst.gold_label && seen_labels.insert(*inst.gold_label).second) {
      observed.push_back(*inst.gold_label);
    }
    rows.push_back(std::move(inst));
  };

  if (format == InputFormat::delimited_table) {
    std::vector<std::string> fields;
    std::size_t line = 1;
    if (!detail::read_csv_record(in, fields, line)) throw ParseError("missing header", 1);
    int id_col = -1, text_col = -1, label_col = -1;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (fields[i] == "id") id_col = static_cast<int>(i);
      else if (fields[i] == "text") text_col = static_cast<int>(i);
      else if (fields[i] == "label") label_col = static_cast<int>(i);
    }
    if (id_col < 0 || text_col < 0) throw ParseError("header must contain id and text", 1);
    const std::size_t width = fields.size();
    while (true) {
      const std::size_t record_line = line;
      if (!detail::read_csv_record(in, fields, line)) break;
      if (detail::blank_record(fields)) continue;
      if (fields.size() != width) {
        throw ParseError("expected " + std::to_string(width) + " fields, got " +
                             std::to_string(fields.size()),
                         record_line);
      }
      TextInstance inst{fields[id_col], fields[text_col], std::nullopt};
      if (label_col >= 0 && !fields[label_col].empty()) inst.gold_label = fields[label_col];
      add(std::move(inst), record_line);
    }
  } else {
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
      ++line;
      if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json obj;
      try {
        obj = nlohmann::json::parse(text);
      } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), line);
      }
      if (!obj.is_object() || !obj.contains("id") || !obj.contains("text")) {
        throw ParseError("record needs keys id and text", line);
      }
      TextInstance inst;
      const auto& id = obj["id"];
      if (id.is_string()) inst.id = id.get<std::string>();
      else if (id.is_number_integer()) inst.id = std::to_string(id.get<long long>());
      else throw ParseError("id must be a string or integer", line);
      if (!obj["text"].is_string()) throw ParseError("text must be a string", line);
      inst.text = obj["text"].get<std::string>();
      if (obj.contains("label") && !obj["label"].is_null()) {
        if (!obj["label"].is_string()) throw ParseError("label must be a string", line);
        inst.gold_label = obj["label"].get<std::string>();
      }
      add(std::move(inst), line);
    }
  }
  return {Pool(std::move(rows)), std::move(observed)};
}

// Label-set file: record lines with keys `name`, `description`.
inline LabelSet load_label_set(std::istream& in) {
  std::vector<LabelEntry> entries;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line);
    }
    if (!obj.is_object() || !obj.contains("name") || !obj["name"].is_string()) {
      throw ParseError("label record needs a string name", line);
    }
    std::string description;
    if (obj.contains("description") && obj["description"].is_string()) {
      description = obj["description"].get<std::string>();
    }
    entries.push_back({obj["name"].get<std::string>(), std::move(description)});
  }
  return LabelSet(std::move(entries));
}

struct DatasetStats {
  // Relative frequency per label, in label-set order.
  std::vector<double> frequencies;
  std::vector<std::size_t> counts;
  double uniformness = 0.0;
};

inline std::vector<std::size_t> label_counts(const Pool& pool, const LabelSet& labels) {
  std::vector<std::size_t> counts(labels.size(), 0);
  for (const auto& inst : pool.instances()) {
    if (!inst.gold_label) {
      throw ValidationError("instance '" + inst.id + "' has no gold label", {inst.id});
    }
    ++counts[labels.index_of(*inst.gold_label)];
  }
  return counts;
}

// U = sum_l |f(l) - 1/|L||.
inline double uniformness(const std::vector<double>& frequencies) {
  const double uniform = 1.0 / static_cast<double>(frequencies.size());
  double u = 0.0;
  for (double f : frequencies) u += std::abs(f - uniform);
  return u;
}

inline DatasetStats compute_stats(const Pool& pool, const LabelSet& labels) {
  if (pool.empty()) throw ValidationError("statistics need a non-empty labeled pool");
  DatasetStats stats;
  stats.counts = label_counts(pool, labels);
  const double total = static_cast<double>(pool.size());
  for (auto c : stats.counts) stats.frequencies.push_back(static_cast<double>(c) / total);
  stats.uniformness = uniformness(stats.frequencies);
  return stats;
}

struct UnbalanceSpec {
  double decay_base = 2.0;
  std::uint64_t seed = 0;
};

// Per-label target counts n'(y) = n(top) * base^-rank(y), rounded, at least 1
// for labels that have instances, capped at n(y). Ranks follow descending
// count; ties go to the earlier label in the label set.
inline std::vector<std::size_t> unbalanced_targets(const std::vector<std::size_t>& counts,
                                                   double decay_base) {
  require(decay_base > 1.0, "decay_base must be > 1");
  std::vector<std::size_t> order(counts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  std::vector<std::size_t> targets(counts.size(), 0);
  if (counts.empty()) return targets;
  const double top = static_cast<double>(counts[order[0]]);
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const std::size_t label = order[rank];
    if (counts[label] == 0) continue;
    const double raw = top * std::pow(decay_base, -static_cast<double>(rank));
    auto target = static_cast<std::size_t>(std::llround(raw));
    target = std::max<std::size_t>(target, 1);
    targets[label] = std::min(target, counts[label]);
  }
  return targets;
}

// Down-samples labels without replacement to the exponential-decay targets.
// Output keeps the input order of the surviving instances.
inline Pool make_unbalanced(const Pool& pool, const LabelSet& labels, const UnbalanceSpec& spec) {
  const auto counts = label_counts(pool, labels);
  const auto targets = unbalanced_targets(counts, spec.decay_base);
  std::vector<std::vector<std::size_t>> members(labels.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    members[labels.index_of(*pool[i].gold_label)].push_back(i);
  }
  Rng rng = make_rng(spec.seed);
  std::vector<char> keep(pool.size(), 0);
  for (std::size_t l = 0; l < labels.size(); ++l) {
    for (auto pick : sample_without_replacement(rng, members[l].size(), targets[l])) {
      keep[members[l][pick]] = 1;
    }
  }
  std::vector<std::size_t> positions;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (keep[i]) positions.push_back(i);
  }
  return pool.subset(positions);
}

// Uniform sample of at most max_size instances; identity when already small.
inline Pool cap_pool(const Pool& pool, std::size_t max_size = 20000, std::uint64_t seed = 0) {
  require(max_size > 0, "max_size must be positive");
  if (pool.size() <= max_size) return pool;
  Rng rng = make_rng(seed);
  auto positions = sample_without_replacement(rng, pool.size(), max_size);
  std::sort(positions.begin(), positions.end());
  return pool.subset(positions);
}

}  // namespace fasl
