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


#include <gtest/gtest.h>
#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <set>

#include "fasl/http.hpp"

using namespace fasl;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("fasl-svc-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

const char* kTopics[3][6] = {
    {"football", "goal", "match", "league", "coach", "stadium"},
    {"election", "senate", "vote", "policy", "minister", "party"},
    {"software", "chip", "cloud", "startup", "robot", "code"},
};
const char* kLabels[3] = {"sports", "politics", "tech"};

json make_pool(std::size_t n, std::size_t n_test = 0, const std::string& pool_id = "p") {
  json items = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t l = i % 3;
    std::string text;
    for (std::size_t w = 0; w < 4; ++w) text += std::string(kTopics[l][(i / 3 + w * 5) % 6]) + " ";
    text += "item" + std::to_string(i);
    json item{{"id", "i" + std::to_string(i)}, {"text", text}, {"label", kLabels[l]}};
    if (i < n_test) item["split"] = "test";
    items.push_back(item);
  }
  return {{"pool_id", pool_id}, {"instances", items}};
}

json label_json() {
  return json::array({{{"name", "sports"}, {"description", "football goal match league"}},
                      {{"name", "politics"}, {"description", "election senate vote policy"}},
                      {{"name", "tech"}, {"description", "software chip cloud startup"}}});
}

ServiceConfig small_config(const fs::path& dir) {
  ServiceConfig c;
  c.data_dir = dir;
  c.encoder_dim = 64;
  c.sample_size = 100;
  c.train.epochs = 30;
  return c;
}

std::string gold_of(const std::string& id) {
  return kLabels[std::stoul(id.substr(1)) % 3];
}

json annotate(const json& requested) {
  json ann = json::array();
  for (const auto& it : requested["instances"]) ann.push_back({{"id", it["id"]}, {"label", gold_of(it["id"])}});
  return {{"annotations", ann}};
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) n += !line.empty();
  return n;
}

// One-leaf forest that always predicts `value`.
ForestModel constant_forest(double value, std::size_t history = kDefaultHistory) {
  RegressionTree tree;
  RegressionTree::Node leaf;
  leaf.value = value;
  tree.nodes().push_back(leaf);
  return ForestModel({tree}, ForestConfig{}, FeatureLayout{history}.size());
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::io;
}

}  // namespace

TEST(Service, RegistersPoolsAndRejectsDuplicates) {
  TempDir dir;
  Service svc(small_config(dir.path()));
  const auto r = svc.register_pool(make_pool(30));
  EXPECT_EQ(r["pool_id"], "p");
  EXPECT_EQ(r["size"], 30);
  EXPECT_TRUE(fs::exists(dir.path() / "pools" / "p.jsonl"));
  EXPECT_EQ(code_of([&] { svc.register_pool(make_pool(5)); }), ErrorCode::conflict);
  EXPECT_EQ(code_of([&] { svc.register_pool({{"instances", json::array()}}); }), ErrorCode::validation);
  json unnamed = make_pool(3);
  unnamed.erase("pool_id");
  EXPECT_EQ(svc.register_pool(unnamed)["pool_id"], "pool-000002");
}

TEST(Service, CreateValidatesBeforeWriting) {
  TempDir dir;
  Service svc(small_config(dir.path()));
  svc.register_pool(make_pool(30));
  json bad{{"name", "x"}, {"labels", label_json()}, {"pool_id", "p"},
           {"examples", json::array({{{"id", "i0"}, {"label", "sports"}}, {{"id", "i1"}, {"label", "weather"}}})}};
  EXPECT_EQ(code_of([&] { svc.create(bad); }), ErrorCode::validation);
  EXPECT_TRUE(fs::is_empty(dir.path() / "models"));
  EXPECT_TRUE(svc.model_ids().empty());
  EXPECT_EQ(code_of([&] { svc.create({{"labels", label_json()}, {"pool_id", "nope"}}); }), ErrorCode::not_found);
  EXPECT_EQ(code_of([&] {
              svc.create({{"labels", label_json()}, {"pool_id", "p"}, {"model_kind", "svm"}});
            }),
            ErrorCode::validation);
  EXPECT_TRUE(fs::is_empty(dir.path() / "models"));

  json ok{{"name", "news"}, {"labels", label_json()}, {"pool_id", "p"},
          {"examples", json::array({{{"id", "i0"}, {"label", "sports"}}, {{"text", "senate vote"}, {"label", "politics"}}})}};
  const auto m = svc.create(ok);
  EXPECT_EQ(m["model_id"], "m-000001");
  EXPECT_EQ(m["n_train"], 2);
  EXPECT_EQ(m["iterations"], 1);
  EXPECT_EQ(svc.get_model("m-000001")["name"], "news");
  EXPECT_EQ(code_of([&] { svc.get_model("m-000009"); }), ErrorCode::not_found);
}

TEST(Service, RequestHidesPredictionsUnlessRevealed) {
  TempDir dir;
  Service svc(small_config(dir.path()));
  svc.register_pool(make_pool(60, 12));
  const std::string id = svc.create({{"labels", label_json()}, {"pool_id", "p"}})["model_id"];
  const auto hidden = svc.request_instances(id, {{"k", 8}});
  ASSERT_EQ(hidden["instances"].size(), 8u);
  EXPECT_EQ(hidden["strategy"], "margin");
  for (const auto& it : hidden["instances"]) {
    EXPECT_FALSE(it.contains("prediction"));
    EXPECT_GE(std::stoul(it["id"].get<std::string>().substr(1)), 12u) << "test-marked instance offered";
  }
  const auto shown = svc.request_instances(id, {{"k", 8}, {"reveal", true}});
  EXPECT_TRUE(shown["revealed"].get<bool>());
  for (const auto& it : shown["instances"]) {
    ASSERT_TRUE(it.contains("prediction"));
    double sum = 0.0;
    for (auto& [k, v] : it["prediction"]["probs"].items()) sum += v.get<double>();
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
  // Same state and strategy give the same batch.
  std::vector<std::string> a, b;
  for (const auto& it : hidden["instances"]) a.push_back(it["id"]);
  for (const auto& it : shown["instances"]) b.push_back(it["id"]);
  EXPECT_EQ(a, b);
  EXPECT_THROW(svc.request_instances(id, {{"strategy", "bogus"}}), Error);
}

TEST(Service, UpdateGrowsLedgerAndConflictsAreAtomic) {
  TempDir dir;
  Service svc(small_config(dir.path()));
  svc.register_pool(make_pool(60, 6));
  const std::string id = svc.create({{"labels", label_json()}, {"pool_id", "p"}})["model_id"];
  const auto req = svc.request_instances(id, {{"k", 5}});
  const auto up = svc.update(id, annotate(req));
  EXPECT_EQ(up["n_train"], 5);
  EXPECT_EQ(up["iteration"], 1);
  const auto ledger = dir.path() / "models" / id / "ledger.jsonl";
  EXPECT_EQ(line_count(ledger), 5u);

  const std::string before = svc.state_digest(id);
  const std::string seen = req["instances"][0]["id"];
  json mixed{{"annotations", json::array({{{"id", "i40"}, {"label", gold_of("i40")}},
                                          {{"id", seen}, {"label", gold_of(seen)}}})}};
  try {
    svc.update(id, mixed);
    FAIL() << "expected conflict";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::conflict);
    EXPECT_EQ(e.details(), std::vector<std::string>{seen});
  }
  json twice{{"annotations", json::array({{{"id", "i41"}, {"label", "tech"}}, {{"id", "i41"}, {"label", "tech"}}})}};
  EXPECT_EQ(code_of([&] { svc.update(id, twice); }), ErrorCode::conflict);
  EXPECT_EQ(code_of([&] { svc.update(id, {{"annotations", json::array({{{"id", "i42"}, {"label", "weather"}}})}}); }),
            ErrorCode::validation);
  EXPECT_EQ(code_of([&] { svc.update(id, {{"annotations", json::array({{{"id", "i1"}, {"label", "tech"}}})}}); }),
            ErrorCode::validation);
  EXPECT_EQ(code_of([&] { svc.update(id, {{"annotations", json::array({{{"id", "zz"}, {"label", "tech"}}})}}); }),
            ErrorCode::validation);
  EXPECT_EQ(line_count(ledger), 5u);
  EXPECT_EQ(svc.state_digest(id), before);
}

TEST(Service, RunEnforcesBatchLimit) {
  TempDir dir;
  auto cfg = small_config(dir.path());
  cfg.max_run_batch = 3;
  Service svc(cfg);
  svc.register_pool(make_pool(30));
  const std::string id = svc.create({{"labels", label_json()}, {"pool_id", "p"}})["model_id"];
  const auto out = svc.run(id, {{"texts", {"football goal match", "senate vote"}}});
  ASSERT_EQ(out["predictions"].size(), 2u);
  EXPECT_EQ(out["predictions"][0]["label"], "sports");
  EXPECT_EQ(out["predictions"][1]["label"], "politics");
  EXPECT_EQ(code_of([&] { svc.run(id, {{"texts", {"a", "b", "c", "d"}}}); }), ErrorCode::validation);
  EXPECT_EQ(code_of([&] { svc.run(id, {{"texts", {""}}}); }), ErrorCode::validation);
}

TEST(Service, EvaluateUsesForestAndThreshold) {
  TempDir dir;
  Service svc(small_config(dir.path()));
  svc.register_pool(make_pool(60));
  const std::string id = svc.create({{"labels", label_json()}, {"pool_id", "p"}})["model_id"];
  svc.update(id, annotate(svc.request_instances(id, {{"k", 6}})));
  auto ev = svc.evaluate(id);
  EXPECT_TRUE(ev["stop"].is_null());
  ASSERT_EQ(ev["history"].size(), 2u);
  for (const char* key : {"neg_entropy", "max_prob", "margin", "agreement", "neg_kl", "cv_f1"}) {
    EXPECT_TRUE(ev["history"][1].contains(key)) << key;
  }
  svc.set_forest(constant_forest(0.97));
  ev = svc.evaluate(id);
  EXPECT_DOUBLE_EQ(ev["predicted_normalized_f1"].get<double>(), 0.97);
  EXPECT_TRUE(ev["stop"].get<bool>());
  svc.set_forest(constant_forest(0.95));
  EXPECT_FALSE(svc.evaluate(id)["stop"].get<bool>());
  // A forest trained with another history length is ignored.
  svc.set_forest(constant_forest(0.99, kDefaultHistory + 2));
  EXPECT_TRUE(svc.evaluate(id)["stop"].is_null());
}

TEST(Service, RestartRestoresIdenticalState) {
  TempDir dir;
  std::string id, digest;
  {
    Service svc(small_config(dir.path()));
    svc.register_pool(make_pool(60));
    id = svc.create({{"labels", label_json()}, {"pool_id", "p"}})["model_id"];
    for (int round = 0; round < 2; ++round) {
      svc.update(id, annotate(svc.request_instances(id, {{"k", 4}, {"strategy", "entropy"}})));
    }
    digest = svc.state_digest(id);
  }
  Service again(small_config(dir.path()));
  EXPECT_EQ(again.state_digest(id), digest);
  EXPECT_EQ(again.get_model(id)["n_train"], 8);
  // Continuing after a restart still rejects earlier ids.
  std::string line;
  std::getline(std::ifstream(dir.path() / "models" / id / "ledger.jsonl") >> std::ws, line);
  const std::string first = json::parse(line)["instance_id"];
  EXPECT_EQ(code_of([&] { again.update(id, {{"annotations", json::array({{{"id", first}, {"label", "tech"}}})}}); }),
            ErrorCode::conflict);
}

TEST(Service, RecoversFromInterruptedWrites) {
  TempDir dir;
  std::string id, digest;
  {
    Service svc(small_config(dir.path()));
    svc.register_pool(make_pool(60));
    id = svc.create({{"labels", label_json()}, {"pool_id", "p"}})["model_id"];
    svc.update(id, annotate(svc.request_instances(id, {{"k", 4}})));
    digest = svc.state_digest(id);
  }
  const auto mdir = dir.path() / "models" / id;
  // Rows appended after the last commit, plus a damaged model file.
  std::ofstream(mdir / "ledger.jsonl", std::ios::app)
      << R"({"seq":4,"batch":2,"instance_id":"i50","text":"x","label":"tech","ts":"t","note":""})" << "\n";
  std::ofstream(mdir / "snapshots.jsonl", std::ios::app) << "{\"partial\": \n";
  std::ofstream(mdir / "model.bin", std::ios::binary | std::ios::trunc) << "garbage";
  // A creation that never committed.
  fs::create_directories(dir.path() / "models" / "m-000099");
  std::ofstream(dir.path() / "models" / "m-000099" / "meta.json") << "{}";

  Service again(small_config(dir.path()));
  EXPECT_EQ(again.state_digest(id), digest);
  EXPECT_EQ(line_count(mdir / "ledger.jsonl"), 4u);
  EXPECT_FALSE(fs::exists(dir.path() / "models" / "m-000099"));
  EXPECT_EQ(again.model_ids(), std::vector<std::string>{id});
}

TEST(Service, AsyncTrainingReportsBusy) {
  TempDir dir;
  auto cfg = small_config(dir.path());
  cfg.async_training = true;
  cfg.train.epochs = 400;
  Service svc(cfg);
  svc.register_pool(make_pool(300));
  const std::string id = svc.create({{"labels", label_json()}, {"pool_id", "p"}})["model_id"];
  const auto r = svc.update(id, annotate(svc.request_instances(id, {{"k", 64}})));
  EXPECT_EQ(r["status"], "training");
  // Requests during training either see busy or, on a fast machine, a finished model.
  try {
    svc.request_instances(id, {{"k", 2}});
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::busy);
  }
  svc.wait_idle(id);
  EXPECT_EQ(svc.get_model(id)["n_train"], 64);
  EXPECT_NO_THROW(svc.request_instances(id, {{"k", 2}}));
}

TEST(ServiceHttp, RoundTripAndErrorShape) {
  TempDir dir;
  Service svc(small_config(dir.path()));
  httplib::Server server;
  install_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  auto res = cli.Get("/health");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);

  res = cli.Post("/pools", make_pool(45).dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 201);
  json create{{"name", "web"}, {"labels", label_json()}, {"pool_id", "p"}};
  res = cli.Post("/models", create.dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 201);
  const std::string id = json::parse(res->body)["model_id"];

  res = cli.Post("/models/" + id + "/request-instances", R"({"k": 4})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto req = json::parse(res->body);
  res = cli.Post("/models/" + id + "/update", annotate(req).dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["n_train"], 4);

  res = cli.Post("/models/" + id + "/update", annotate(req).dump(), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 409);
  auto err = json::parse(res->body);
  EXPECT_EQ(err["code"], "conflict");
  EXPECT_TRUE(err["message"].is_string());
  EXPECT_EQ(err["details"].size(), 4u);

  res = cli.Post("/models/" + id + "/run", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body)["code"], "parse_error");

  res = cli.Get("/models/m-404404/evaluate");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(json::parse(res->body)["code"], "not_found");

  res = cli.Get("/models/" + id + "/evaluate");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["history"].size(), 2u);

  server.stop();
  th.join();
}
