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

// Annotation service: the create / request-instances / update / run /
// evaluate cycle over registered pools, with per-model persistence.
//
// Layout under the data directory:
//
//   cache/embeddings.bin          shared embedding cache
//   pools/<pool_id>.jsonl         registered pools (id, text, label?, split?)
//   models/<model_id>/meta.json   name, kind, labels, pool, seed
//   models/<model_id>/ledger.jsonl     append-only annotations
//   models/<model_id>/model.bin        current model (model_io format)
//   models/<model_id>/snapshots.jsonl  one signal row per iteration
//   models/<model_id>/COMMIT           last committed ledger/snapshot counts
//
// An update appends the ledger, rewrites model.bin, appends the snapshot and
// finally replaces COMMIT. On open, ledger and snapshot rows past the commit
// are dropped, and the model is retrained from the committed ledger when
// model.bin does not match the digest recorded in COMMIT.
//
// Service methods speak nlohmann::json and throw fasl::Error; the HTTP
// binding in install_routes() maps error codes to status codes.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "fasl/corpus.hpp"
#include "fasl/embedding_cache.hpp"
#include "fasl/encoder.hpp"
#include "fasl/forest.hpp"
#include "fasl/fsl.hpp"
#include "fasl/hashing.hpp"
#include "fasl/model_io.hpp"
#include "fasl/perfpred.hpp"
#include "fasl/select.hpp"
#include "fasl/simulate.hpp"

namespace fasl {

using nlohmann::json;

struct ServiceConfig {
  std::filesystem::path data_dir = "fasl-data";
  std::size_t encoder_dim = 256;
  std::optional<std::filesystem::path> forest_path;
  double tau = kDefaultTau;
  std::size_t history = kDefaultHistory;
  std::size_t sample_size = kDefaultSampleSize;
  std::size_t max_run_batch = 1000;
  bool async_training = false;
  TrainConfig train;
};

namespace detail {

inline std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Writes via a temporary file and rename so readers never see a torn file.
inline void write_file_atomic(const std::filesystem::path& p, std::string_view bytes) {
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("cannot write " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, p, ec);
  if (ec) throw IoError("cannot replace " + p.string() + ": " + ec.message());
}

inline void append_file(const std::filesystem::path& p, std::string_view bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::app);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("cannot append to " + p.string());
}

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

inline json label_set_json(const LabelSet& labels) {
  json out = json::array();
  for (const auto& e : labels.entries()) out.push_back({{"name", e.name}, {"description", e.description}});
  return out;
}

inline LabelSet parse_label_set(const json& j) {
  if (!j.is_array()) throw ValidationError("labels must be an array of {name, description}");
  std::vector<LabelEntry> entries;
  for (const auto& e : j) {
    if (!e.is_object() || !e.contains("name") || !e["name"].is_string()) {
      throw ValidationError("every label needs a string name");
    }
    std::string description;
    if (e.contains("description") && e["description"].is_string()) {
      description = e["description"].get<std::string>();
    }
    entries.push_back({e["name"].get<std::string>(), description});
  }
  return LabelSet(std::move(entries));
}

}  // namespace detail

struct LedgerEntry {
  std::size_t seq = 0;
  std::size_t batch = 0;
  std::string instance_id;
  std::string text;
  std::string label;
  std::string timestamp;
  std::string note;

  json to_json() const {
    return {{"seq", seq},     {"batch", batch}, {"instance_id", instance_id}, {"text", text},
            {"label", label}, {"ts", timestamp}, {"note", note}};
  }
  static LedgerEntry from_json(const json& j) {
    return {j.at("seq").get<std::size_t>(),  j.at("batch").get<std::size_t>(),
            j.at("instance_id").get<std::string>(), j.at("text").get<std::string>(),
            j.at("label").get<std::string>(), j.at("ts").get<std::string>(),
            j.value("note", std::string())};
  }
};

struct SnapshotRow {
  IterationSnapshot signals;
  StrategyId strategy = StrategyId::random;

  json to_json() const {
    const auto& s = signals;
    return {{"iter", s.iter},
            {"n_train", s.n_train},
            {"cv_f1", s.cv_f1 ? json(*s.cv_f1) : json(nullptr)},
            {"neg_entropy", s.neg_entropy},
            {"max_prob", s.max_prob},
            {"margin", s.margin},
            {"agreement", s.agreement},
            {"neg_kl", s.neg_kl},
            {"strategy", std::string(to_string(strategy))}};
  }
  static SnapshotRow from_json(const json& j) {
    SnapshotRow r;
    r.signals.iter = j.at("iter");
    r.signals.n_train = j.at("n_train");
    if (!j.at("cv_f1").is_null()) r.signals.cv_f1 = j.at("cv_f1").get<double>();
    r.signals.neg_entropy = j.at("neg_entropy");
    r.signals.max_prob = j.at("max_prob");
    r.signals.margin = j.at("margin");
    r.signals.agreement = j.at("agreement");
    r.signals.neg_kl = j.at("neg_kl");
    r.strategy = parse_strategy(j.at("strategy").get<std::string>());
    return r;
  }
};

// A registered pool with embeddings for every instance. Instances marked
// split=test are never offered for annotation, trained on or sampled into T.
struct PoolEntry {
  std::string pool_id;
  Pool pool;
  std::vector<char> is_test;
  EmbeddingMatrix embeddings;
};

class Service {
 public:
  explicit Service(ServiceConfig config)
      : config_(std::move(config)), encoder_(config_.encoder_dim) {
    std::error_code ec;
    std::filesystem::create_directories(config_.data_dir / "pools", ec);
    std::filesystem::create_directories(config_.data_dir / "models", ec);
    if (ec) throw IoError("cannot create data directory " + config_.data_dir.string());
    cache_ = std::make_unique<EmbeddingCache>(config_.data_dir / "cache", encoder_.descriptor());
    if (config_.forest_path) {
      forest_ = ForestModel::from_json(json::parse(detail::read_file(*config_.forest_path)));
    }
    load_pools();
    load_models();
  }

  ~Service() {
    for (auto& [id, slot] : models_) {
      if (slot->worker.joinable()) slot->worker.join();
    }
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const ServiceConfig& config() const noexcept { return config_; }
  const Encoder& encoder() const noexcept { return encoder_; }
  EmbeddingCache& cache() noexcept { return *cache_; }

  void set_forest(ForestModel forest) {
    std::unique_lock lock(registry_mutex_);
    forest_ = std::move(forest);
  }

  // POST /pools  {pool_id?, instances: [{id, text, label?, split?}]}
  json register_pool(const json& body) {
    if (!body.is_object() || !body.contains("instances") || !body["instances"].is_array()) {
      throw ValidationError("pool registration needs an instances array");
    }
    std::vector<TextInstance> rows;
    std::vector<char> is_test;
    for (const auto& item : body["instances"]) {
      if (!item.is_object() || !item.contains("id") || !item.contains("text") ||
          !item["id"].is_string() || !item["text"].is_string()) {
        throw ValidationError("every instance needs string id and text");
      }
      TextInstance t{item["id"].get<std::string>(), item["text"].get<std::string>(), std::nullopt};
      if (item.contains("label") && item["label"].is_string()) t.gold_label = item["label"].get<std::string>();
      is_test.push_back(item.value("split", std::string()) == "test" ? 1 : 0);
      rows.push_back(std::move(t));
    }
    if (rows.empty()) throw ValidationError("pool must contain at least one instance");
    Pool pool(std::move(rows));

    std::unique_lock lock(registry_mutex_);
    std::string id = body.value("pool_id", std::string());
    if (id.empty()) id = next_id("pool-", pools_);
    if (!valid_id(id)) throw ValidationError("pool_id may contain only [A-Za-z0-9_.-]");
    if (pools_.count(id)) throw ConflictError("pool '" + id + "' already exists", {id});
    auto entry = build_pool_entry(id, std::move(pool), std::move(is_test));
    std::string lines;
    for (std::size_t i = 0; i < entry->pool.size(); ++i) {
      const auto& t = entry->pool[i];
      json j{{"id", t.id}, {"text", t.text}};
      if (t.gold_label) j["label"] = *t.gold_label;
      if (entry->is_test[i]) j["split"] = "test";
      lines += j.dump() + "\n";
    }
    detail::write_file_atomic(config_.data_dir / "pools" / (id + ".jsonl"), lines);
    const auto size = entry->pool.size();
    pools_.emplace(id, std::move(entry));
    return {{"pool_id", id}, {"size", size}};
  }

  // POST /models  {name, labels: [{name, description}], model_kind, pool_id,
  //                examples?: [{id | text, label}]}
  json create(const json& body) {
    if (!body.is_object()) throw ValidationError("body must be a JSON object");
    const std::string name = body.value("name", std::string("model"));
    if (!body.contains("labels")) throw ValidationError("labels are required");
    LabelSet labels = detail::parse_label_set(body["labels"]);
    const ModelKind kind = parse_model_kind(body.value("model_kind", std::string("lt")));
    const std::string pool_id = body.value("pool_id", std::string());
    auto pool = find_pool(pool_id);

    // Validate every seed example before anything is written.
    std::vector<LedgerEntry> seed;
    std::unordered_set<std::string> seen;
    std::vector<std::string> conflicts;
    if (body.contains("examples")) {
      if (!body["examples"].is_array()) throw ValidationError("examples must be an array");
      for (const auto& ex : body["examples"]) {
        if (!ex.is_object() || !ex.contains("label") || !ex["label"].is_string()) {
          throw ValidationError("every example needs a string label");
        }
        LedgerEntry e;
        e.label = ex["label"].get<std::string>();
        if (!labels.find(e.label)) {
          throw ValidationError("example has unknown label '" + e.label + "'", {e.label});
        }
        if (ex.contains("id") && ex["id"].is_string()) {
          e.instance_id = ex["id"].get<std::string>();
          auto row = pool->pool.find(e.instance_id);
          if (!row) throw ValidationError("example id '" + e.instance_id + "' is not in the pool", {e.instance_id});
          if (pool->is_test[*row]) throw ValidationError("instance '" + e.instance_id + "' is test-marked", {e.instance_id});
          e.text = pool->pool[*row].text;
        } else if (ex.contains("text") && ex["text"].is_string() && !ex["text"].get<std::string>().empty()) {
          e.text = ex["text"].get<std::string>();
          e.instance_id = "seed-" + std::to_string(seed.size());
        } else {
          throw ValidationError("every example needs an id from the pool or a non-empty text");
        }
        if (!seen.insert(e.instance_id).second) conflicts.push_back(e.instance_id);
        seed.push_back(std::move(e));
      }
    }
    if (!conflicts.empty()) throw ConflictError("duplicate example ids", conflicts);

    auto slot = std::make_shared<ModelSlot>();
    {
      std::unique_lock lock(registry_mutex_);
      slot->state.model_id = next_id("m-", models_);
      models_.emplace(slot->state.model_id, slot);
    }
    auto& st = slot->state;
    st.name = name;
    st.labels = std::move(labels);
    st.kind = kind;
    st.pool = pool;
    st.seed = fnv1a64(st.model_id);
    st.dir = config_.data_dir / "models" / st.model_id;
    const auto ts = detail::now_iso8601();
    for (std::size_t i = 0; i < seed.size(); ++i) {
      seed[i].seq = i;
      seed[i].batch = 0;
      seed[i].timestamp = ts;
    }
    try {
      std::filesystem::create_directories(st.dir);
      json meta{{"model_id", st.model_id}, {"name", st.name},   {"model_kind", std::string(to_string(kind))},
                {"pool_id", pool->pool_id}, {"labels", detail::label_set_json(st.labels)},
                {"seed", st.seed},           {"created", ts}};
      detail::write_file_atomic(st.dir / "meta.json", meta.dump(2) + "\n");
      prepare(st);
      st.ledger = std::move(seed);
      std::string ledger_bytes;
      for (const auto& e : st.ledger) ledger_bytes += e.to_json().dump() + "\n";
      detail::write_file_atomic(st.dir / "ledger.jsonl", ledger_bytes);
      detail::write_file_atomic(st.dir / "snapshots.jsonl", "");
      retrain_and_commit(st, StrategyId::random);
    } catch (...) {
      std::unique_lock lock(registry_mutex_);
      models_.erase(st.model_id);
      std::error_code ec;
      std::filesystem::remove_all(st.dir, ec);
      throw;
    }
    return summary(st);
  }

  // GET /models/{id}
  json get_model(const std::string& model_id) {
    auto slot = find_model(model_id);
    // The worker holds the lock while retraining; answer without waiting.
    if (slot->training) return {{"model_id", model_id}, {"status", "training"}};
    std::shared_lock lock(slot->mutex);
    return summary(slot->state);
  }

  // POST /models/{id}/request-instances  {strategy?, k?, reveal?}
  json request_instances(const std::string& model_id, const json& body) {
    auto slot = find_model(model_id);
    check_ready(*slot);
    std::shared_lock lock(slot->mutex);
    const auto& st = slot->state;
    const StrategyId strategy = parse_strategy(body.value("strategy", std::string("margin")));
    const std::size_t k = body.value("k", std::size_t{16});
    const bool reveal = body.value("reveal", false);
    const auto& pe = *st.pool;

    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < pe.pool.size(); ++i) {
      if (!pe.is_test[i] && !st.labeled_ids.count(pe.pool[i].id)) candidates.push_back(i);
    }
    if (candidates.empty()) throw ValidationError("no unlabeled instances remain in the pool");

    PoolState state;
    for (auto r : candidates) state.ids.push_back(pe.pool[r].id);
    const EmbeddingMatrix cand_x = detail::gather_rows(pe.embeddings, candidates);
    const PosteriorMatrix cand_p = predict_embeddings(st.model, cand_x);
    const EmbeddingMatrix lab_x = ledger_embeddings(st);
    const PosteriorMatrix lab_p = predict_embeddings(st.model, lab_x);
    state.embeddings = &cand_x;
    state.posteriors = &cand_p;
    for (const auto& e : st.ledger) {
      state.labeled_ids.push_back(e.instance_id);
      state.labeled_gold.push_back(st.labels.index_of(e.label));
    }
    state.labeled_embeddings = &lab_x;
    state.labeled_posteriors = &lab_p;
    state.n_labels = st.labels.size();

    SelectionConfig sel;
    sel.batch_k = std::min(k, candidates.size());
    sel.seed = st.seed ^ (0x9e3779b97f4a7c15ULL * (st.snapshots.size() + 1));
    const auto ids = select(state, strategy, sel);
    {
      std::lock_guard g(slot->strategy_mutex);
      slot->last_strategy = strategy;
    }
    json out = json::array();
    std::unordered_map<std::string, std::size_t> cand_row;
    for (std::size_t i = 0; i < state.ids.size(); ++i) cand_row.emplace(state.ids[i], i);
    for (const auto& id : ids) {
      const auto row = cand_row.at(id);
      json item{{"id", id}, {"text", pe.pool[candidates[row]].text}};
      if (reveal) item["prediction"] = prediction_json(st.labels, cand_p, static_cast<Eigen::Index>(row));
      out.push_back(std::move(item));
    }
    return {{"model_id", st.model_id},
            {"strategy", std::string(to_string(strategy))},
            {"revealed", reveal},
            {"instances", out}};
  }

  // POST /models/{id}/update  {annotations: [{id, label}], note?, strategy?}
  json update(const std::string& model_id, const json& body) {
    auto slot = find_model(model_id);
    check_ready(*slot);
    std::unique_lock lock(slot->mutex);
    check_ready(*slot);
    auto& st = slot->state;
    if (!body.is_object() || !body.contains("annotations") || !body["annotations"].is_array()) {
      throw ValidationError("update needs an annotations array");
    }
    const auto& pe = *st.pool;
    std::vector<LedgerEntry> batch;
    std::vector<std::string> conflicts;
    std::unordered_set<std::string> in_batch;
    for (const auto& a : body["annotations"]) {
      if (!a.is_object() || !a.contains("id") || !a.contains("label") || !a["id"].is_string() ||
          !a["label"].is_string()) {
        throw ValidationError("every annotation needs string id and label");
      }
      LedgerEntry e;
      e.instance_id = a["id"].get<std::string>();
      e.label = a["label"].get<std::string>();
      if (!st.labels.find(e.label)) {
        throw ValidationError("unknown label '" + e.label + "'", {e.label});
      }
      const auto row = pe.pool.find(e.instance_id);
      if (!row) throw ValidationError("instance '" + e.instance_id + "' is not in the pool", {e.instance_id});
      if (pe.is_test[*row]) {
        throw ValidationError("instance '" + e.instance_id + "' is test-marked", {e.instance_id});
      }
      if (st.labeled_ids.count(e.instance_id) || !in_batch.insert(e.instance_id).second) {
        conflicts.push_back(e.instance_id);
      }
      e.text = pe.pool[*row].text;
      batch.push_back(std::move(e));
    }
    if (batch.empty()) throw ValidationError("update needs at least one annotation");
    if (!conflicts.empty()) {
      throw ConflictError("instances already annotated", conflicts);
    }
    StrategyId strategy;
    if (body.contains("strategy") && body["strategy"].is_string()) {
      strategy = parse_strategy(body["strategy"].get<std::string>());
    } else {
      std::lock_guard g(slot->strategy_mutex);
      strategy = slot->last_strategy;
    }
    const auto ts = detail::now_iso8601();
    const std::size_t batch_no = st.snapshots.size();
    const std::string note = body.value("note", std::string());
    for (auto& e : batch) {
      e.seq = st.ledger.size() + (&e - batch.data());
      e.batch = batch_no;
      e.timestamp = ts;
      e.note = note;
    }

    if (config_.async_training) {
      slot->training = true;
      lock.unlock();
      if (slot->worker.joinable()) slot->worker.join();
      slot->worker = std::thread([this, slot, batch = std::move(batch), strategy]() mutable {
        std::unique_lock wl(slot->mutex);
        try {
          apply_batch(slot->state, std::move(batch), strategy);
        } catch (...) {
          // Prior state is kept; the batch is dropped.
        }
        slot->training = false;
      });
      return {{"model_id", model_id}, {"status", "training"}};
    }
    apply_batch(st, std::move(batch), strategy);
    return iteration_summary(st);
  }

  // POST /models/{id}/run  {texts: [...]}
  json run(const std::string& model_id, const json& body) {
    auto slot = find_model(model_id);
    check_ready(*slot);
    std::shared_lock lock(slot->mutex);
    const auto& st = slot->state;
    if (!body.is_object() || !body.contains("texts") || !body["texts"].is_array()) {
      throw ValidationError("run needs a texts array");
    }
    std::vector<std::string> texts;
    for (const auto& t : body["texts"]) {
      if (!t.is_string() || t.get<std::string>().empty()) {
        throw ValidationError("texts must be non-empty strings");
      }
      texts.push_back(t.get<std::string>());
    }
    if (texts.size() > config_.max_run_batch) {
      throw ValidationError("batch of " + std::to_string(texts.size()) + " exceeds the limit of " +
                            std::to_string(config_.max_run_batch));
    }
    json out = json::array();
    if (!texts.empty()) {
      const PosteriorMatrix p = predict_embeddings(st.model, encode_batch_cached(encoder_, texts, *cache_));
      for (Eigen::Index i = 0; i < p.rows(); ++i) out.push_back(prediction_json(st.labels, p, i));
    }
    return {{"model_id", st.model_id}, {"predictions", out}};
  }

  // GET /models/{id}/evaluate
  json evaluate(const std::string& model_id) {
    auto slot = find_model(model_id);
    std::shared_lock lock(slot->mutex);
    const auto& st = slot->state;
    json history = json::array();
    for (const auto& s : st.snapshots) history.push_back(s.to_json());
    json out{{"model_id", st.model_id}, {"n_train", st.ledger.size()}, {"history", history},
             {"tau", config_.tau}};
    if (auto est = stop_estimate(st)) {
      out["predicted_normalized_f1"] = *est;
      out["stop"] = *est > config_.tau;
    } else {
      out["predicted_normalized_f1"] = nullptr;
      out["stop"] = nullptr;
    }
    return out;
  }

  // Digest over the committed ledger, snapshot rows and model bytes.
  std::string state_digest(const std::string& model_id) {
    auto slot = find_model(model_id);
    std::shared_lock lock(slot->mutex);
    const auto& st = slot->state;
    Digester d;
    for (const auto& e : st.ledger) d.update(e.to_json().dump());
    for (const auto& s : st.snapshots) d.update(s.to_json().dump());
    d.update(serialize_model(st.model));
    return d.finish().hex();
  }

  std::vector<std::string> model_ids() const {
    std::shared_lock lock(registry_mutex_);
    std::vector<std::string> out;
    for (const auto& [id, slot] : models_) out.push_back(id);
    return out;
  }

  // Blocks until a background retrain of the model has finished.
  void wait_idle(const std::string& model_id) {
    auto slot = find_model(model_id);
    while (slot->training) std::this_thread::sleep_for(std::chrono::milliseconds(1));
    std::unique_lock lock(slot->mutex);
  }

 private:
  struct ModelState {
    std::string model_id;
    std::string name;
    LabelSet labels;
    ModelKind kind = ModelKind::label_tuning;
    std::shared_ptr<const PoolEntry> pool;
    std::uint64_t seed = 0;
    std::filesystem::path dir;
    FewShotModel model;
    std::vector<LedgerEntry> ledger;
    std::unordered_set<std::string> labeled_ids;
    std::vector<SnapshotRow> snapshots;
    EmbeddingMatrix descriptions;
    std::vector<std::size_t> t_rows;
    EmbeddingMatrix t_embeddings;
    PosteriorMatrix last_posteriors_T;
  };

  struct ModelSlot {
    std::shared_mutex mutex;
    ModelState state;
    std::atomic<bool> training{false};
    std::mutex strategy_mutex;
    StrategyId last_strategy = StrategyId::random;
    std::thread worker;
  };

  static bool valid_id(const std::string& id) {
    return !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    });
  }

  template <typename Map>
  static std::string next_id(const std::string& prefix, const Map& existing) {
    for (std::size_t n = existing.size() + 1;; ++n) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s%06zu", prefix.c_str(), n);
      if (!existing.count(buf)) return buf;
    }
  }

  static void check_ready(const ModelSlot& slot) {
    if (slot.training) throw Error(ErrorCode::busy, "model is training; retry shortly");
  }

  std::shared_ptr<const PoolEntry> find_pool(const std::string& pool_id) const {
    std::shared_lock lock(registry_mutex_);
    auto it = pools_.find(pool_id);
    if (it == pools_.end()) {
      throw Error(ErrorCode::not_found, "pool '" + pool_id + "' is not registered");
    }
    return it->second;
  }

  std::shared_ptr<ModelSlot> find_model(const std::string& model_id) const {
    std::shared_lock lock(registry_mutex_);
    auto it = models_.find(model_id);
    if (it == models_.end()) throw Error(ErrorCode::not_found, "model '" + model_id + "' not found");
    return it->second;
  }

  std::shared_ptr<PoolEntry> build_pool_entry(std::string id, Pool pool, std::vector<char> is_test) {
    auto entry = std::make_shared<PoolEntry>();
    entry->pool_id = std::move(id);
    std::vector<std::string> texts;
    for (const auto& t : pool.instances()) texts.push_back(t.text);
    entry->embeddings = encode_batch_cached(encoder_, texts, *cache_);
    entry->pool = std::move(pool);
    entry->is_test = std::move(is_test);
    return entry;
  }

  static json prediction_json(const LabelSet& labels, const PosteriorMatrix& p, Eigen::Index row) {
    json probs = json::object();
    for (std::size_t j = 0; j < labels.size(); ++j) probs[labels.name(j)] = p(row, static_cast<Eigen::Index>(j));
    return {{"label", labels.name(argmax_row(p, row))}, {"probs", probs}};
  }

  json summary(const ModelState& st) const {
    return {{"model_id", st.model_id},
            {"name", st.name},
            {"model_kind", std::string(to_string(st.kind))},
            {"pool_id", st.pool->pool_id},
            {"labels", detail::label_set_json(st.labels)},
            {"n_train", st.ledger.size()},
            {"iterations", st.snapshots.size()},
            {"status", "ready"}};
  }

  json iteration_summary(const ModelState& st) const {
    json out{{"model_id", st.model_id},
             {"n_train", st.ledger.size()},
             {"iteration", st.snapshots.back().signals.iter},
             {"snapshot", st.snapshots.back().to_json()}};
    if (auto est = stop_estimate(st)) {
      out["predicted_normalized_f1"] = *est;
      out["stop"] = *est > config_.tau;
    }
    return out;
  }

  std::optional<double> stop_estimate(const ModelState& st) const {
    std::shared_lock lock(registry_mutex_);
    if (!forest_ || st.snapshots.empty()) return std::nullopt;
    std::vector<std::array<double, kSignalCount>> signals;
    for (const auto& s : st.snapshots) signals.push_back(signal_values(s.signals));
    const auto& last = st.snapshots.back();
    FeatureLayout layout{config_.history};
    const auto f = build_features(signals, signals.size() - 1, last.signals.n_train, last.strategy,
                                  st.labels.size(), layout);
    if (f.size() != forest_->n_features()) return std::nullopt;
    return forest_->predict(f);
  }

  EmbeddingMatrix ledger_embeddings(const ModelState& st) const {
    const auto& pe = *st.pool;
    EmbeddingMatrix x(static_cast<Eigen::Index>(st.ledger.size()),
                      static_cast<Eigen::Index>(encoder_.dim()));
    std::vector<std::string> free_texts;
    std::vector<Eigen::Index> free_rows;
    for (std::size_t i = 0; i < st.ledger.size(); ++i) {
      const auto& e = st.ledger[i];
      if (auto row = pe.pool.find(e.instance_id)) {
        x.row(static_cast<Eigen::Index>(i)) = pe.embeddings.row(static_cast<Eigen::Index>(*row));
      } else {
        free_texts.push_back(e.text);
        free_rows.push_back(static_cast<Eigen::Index>(i));
      }
    }
    if (!free_texts.empty()) {
      const auto fx = encode_batch_cached(encoder_, free_texts, *cache_);
      for (std::size_t j = 0; j < free_rows.size(); ++j) x.row(free_rows[j]) = fx.row(static_cast<Eigen::Index>(j));
    }
    return x;
  }

  // Description embeddings and the fixed sample T.
  void prepare(ModelState& st) {
    std::vector<std::string> texts;
    for (const auto& e : st.labels.entries()) texts.push_back(e.description);
    st.descriptions = encode_batch_cached(encoder_, texts, *cache_);
    std::vector<std::size_t> train_rows;
    for (std::size_t i = 0; i < st.pool->pool.size(); ++i) {
      if (!st.pool->is_test[i]) train_rows.push_back(i);
    }
    if (train_rows.empty()) throw ValidationError("pool has no non-test instances");
    st.t_rows.clear();
    for (auto p : sample_T(train_rows.size(), config_.sample_size, st.seed)) st.t_rows.push_back(train_rows[p]);
    st.t_embeddings = detail::gather_rows(st.pool->embeddings, st.t_rows);
  }

  TrainingSet ledger_training_set(const ModelState& st) const {
    TrainingSet data{ledger_embeddings(st), {}};
    for (const auto& e : st.ledger) data.labels.push_back(st.labels.index_of(e.label));
    return data;
  }

  FewShotModel train_model(const ModelState& st) const {
    return quantize(fit_from_scratch(st.labels, encoder_.descriptor(), st.descriptions, st.kind,
                                     ledger_training_set(st), config_.train));
  }

  // Retrains on the ledger, appends a snapshot and commits. The ledger file
  // must already hold st.ledger.
  void retrain_and_commit(ModelState& st, StrategyId strategy) {
    st.labeled_ids.clear();
    for (const auto& e : st.ledger) st.labeled_ids.insert(e.instance_id);
    FewShotModel model = train_model(st);
    const std::string model_bytes = serialize_model(model);
    detail::write_file_atomic(st.dir / "model.bin", model_bytes);

    const TrainingSet data = ledger_training_set(st);
    std::optional<double> cv;
    if (data.size() > 0) {
      cv = labeled_cv_f1(st.labels, encoder_.descriptor(), st.descriptions, st.kind, config_.train,
                         data, st.seed + st.snapshots.size());
    }
    const PosteriorMatrix p_T = predict_embeddings(model, st.t_embeddings);
    SnapshotRow row;
    row.signals = snapshot(p_T, st.snapshots.empty() ? nullptr : &st.last_posteriors_T,
                           st.snapshots.size(), st.ledger.size(), cv);
    row.signals.posteriors_T = PosteriorMatrix();
    row.strategy = strategy;
    detail::append_file(st.dir / "snapshots.jsonl", row.to_json().dump() + "\n");

    st.model = std::move(model);
    st.last_posteriors_T = p_T;
    st.snapshots.push_back(std::move(row));
    write_commit(st, model_bytes);
  }

  void write_commit(const ModelState& st, const std::string& model_bytes) {
    json commit{{"ledger", st.ledger.size()},
                {"snapshots", st.snapshots.size()},
                {"model_digest", fnv1a128(model_bytes).hex()}};
    detail::write_file_atomic(st.dir / "COMMIT", commit.dump() + "\n");
  }

  // Appends a validated batch and retrains; on failure the previous state
  // (memory and files) is restored.
  void apply_batch(ModelState& st, std::vector<LedgerEntry> batch, StrategyId strategy) {
    const auto ledger_path = st.dir / "ledger.jsonl";
    const auto snap_path = st.dir / "snapshots.jsonl";
    const auto ledger_size = std::filesystem::file_size(ledger_path);
    const auto snap_size = std::filesystem::file_size(snap_path);
    const auto old_ledger = st.ledger;
    const auto old_snapshots = st.snapshots;
    const auto old_model = st.model;
    const auto old_posteriors = st.last_posteriors_T;
    try {
      std::string bytes;
      for (const auto& e : batch) bytes += e.to_json().dump() + "\n";
      detail::append_file(ledger_path, bytes);
      st.ledger.insert(st.ledger.end(), batch.begin(), batch.end());
      retrain_and_commit(st, strategy);
    } catch (...) {
      std::filesystem::resize_file(ledger_path, ledger_size);
      std::filesystem::resize_file(snap_path, snap_size);
      st.ledger = old_ledger;
      st.snapshots = old_snapshots;
      st.model = old_model;
      st.last_posteriors_T = old_posteriors;
      st.labeled_ids.clear();
      for (const auto& e : st.ledger) st.labeled_ids.insert(e.instance_id);
      detail::write_file_atomic(st.dir / "model.bin", serialize_model(st.model));
      throw;
    }
  }

  void load_pools() {
    for (const auto& f : std::filesystem::directory_iterator(config_.data_dir / "pools")) {
      if (f.path().extension() != ".jsonl") continue;
      std::vector<TextInstance> rows;
      std::vector<char> is_test;
      for (const auto& line : detail::split_lines(detail::read_file(f.path()))) {
        const auto j = json::parse(line);
        TextInstance t{j.at("id"), j.at("text"), std::nullopt};
        if (j.contains("label")) t.gold_label = j["label"].get<std::string>();
        is_test.push_back(j.value("split", std::string()) == "test" ? 1 : 0);
        rows.push_back(std::move(t));
      }
      const auto id = f.path().stem().string();
      pools_.emplace(id, build_pool_entry(id, Pool(std::move(rows)), std::move(is_test)));
    }
  }

  void load_models() {
    for (const auto& d : std::filesystem::directory_iterator(config_.data_dir / "models")) {
      if (!d.is_directory()) continue;
      if (!std::filesystem::exists(d.path() / "COMMIT")) {
        // Creation never committed.
        std::filesystem::remove_all(d.path());
        continue;
      }
      auto slot = std::make_shared<ModelSlot>();
      load_model_dir(slot->state, d.path());
      if (!slot->state.snapshots.empty()) {
        std::lock_guard g(slot->strategy_mutex);
        slot->last_strategy = slot->state.snapshots.back().strategy;
      }
      models_.emplace(slot->state.model_id, std::move(slot));
    }
  }

  void load_model_dir(ModelState& st, const std::filesystem::path& dir) {
    const auto meta = json::parse(detail::read_file(dir / "meta.json"));
    const auto commit = json::parse(detail::read_file(dir / "COMMIT"));
    st.model_id = meta.at("model_id");
    st.name = meta.at("name");
    st.kind = parse_model_kind(meta.at("model_kind").get<std::string>());
    st.labels = detail::parse_label_set(meta.at("labels"));
    st.seed = meta.at("seed");
    st.dir = dir;
    st.pool = find_pool(meta.at("pool_id"));
    prepare(st);

    const std::size_t n_ledger = commit.at("ledger");
    const std::size_t n_snap = commit.at("snapshots");
    auto ledger_lines = detail::split_lines(detail::read_file(dir / "ledger.jsonl"));
    auto snap_lines = detail::split_lines(detail::read_file(dir / "snapshots.jsonl"));
    if (ledger_lines.size() < n_ledger || snap_lines.size() < n_snap) {
      throw IoError("model " + st.model_id + " is missing committed rows");
    }
    ledger_lines.resize(n_ledger);
    snap_lines.resize(n_snap);
    std::string ledger_bytes, snap_bytes;
    for (const auto& l : ledger_lines) {
      st.ledger.push_back(LedgerEntry::from_json(json::parse(l)));
      ledger_bytes += l + "\n";
    }
    for (const auto& l : snap_lines) {
      st.snapshots.push_back(SnapshotRow::from_json(json::parse(l)));
      snap_bytes += l + "\n";
    }
    // Drop rows written after the last commit.
    detail::write_file_atomic(dir / "ledger.jsonl", ledger_bytes);
    detail::write_file_atomic(dir / "snapshots.jsonl", snap_bytes);
    for (const auto& e : st.ledger) st.labeled_ids.insert(e.instance_id);

    bool model_ok = false;
    if (std::filesystem::exists(dir / "model.bin")) {
      const auto bytes = detail::read_file(dir / "model.bin");
      if (fnv1a128(bytes).hex() == commit.at("model_digest").get<std::string>()) {
        st.model = deserialize_model(bytes);
        model_ok = true;
      }
    }
    if (!model_ok) {
      st.model = train_model(st);
      detail::write_file_atomic(dir / "model.bin", serialize_model(st.model));
    }
    st.last_posteriors_T = predict_embeddings(st.model, st.t_embeddings);
  }

  ServiceConfig config_;
  HashingEncoder encoder_;
  std::unique_ptr<EmbeddingCache> cache_;
  std::optional<ForestModel> forest_;
  mutable std::shared_mutex registry_mutex_;
  std::map<std::string, std::shared_ptr<const PoolEntry>> pools_;
  std::map<std::string, std::shared_ptr<ModelSlot>> models_;
};

}  // namespace fasl
