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
#include <fstream>
#include <sstream>

#include "commands.hpp"

using namespace fasl;
using namespace fasl::cli;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("fasl-cli-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
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

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

const char* kSmallDataset =
    R"({"kind": "synthetic", "clusters": 6, "labels": 3, "dims": 16, "size": 240, "test_size": 120, "noise": 0.8, "seed": 2})";

void write_plan(const fs::path& p, const std::string& body) { std::ofstream(p) << body; }

SimulateOptions sim_opts(const fs::path& plan, const fs::path& out) {
  SimulateOptions o;
  o.plan_file = plan;
  o.out_dir = out;
  return o;
}

}  // namespace

TEST(Cli, SimulateWritesCurvesAndAggregate) {
  TempDir dir;
  const auto plan = dir.path() / "plan.jsonl";
  write_plan(plan, std::string(R"({"name": "exp", "dataset": )") + kSmallDataset +
                       R"(, "strategies": ["random", "margin"], "trials": 3, "budget": 32})" + "\n");
  std::ostringstream log;
  ASSERT_EQ(cmd_simulate(sim_opts(plan, dir.path() / "out"), log), kExitOk) << log.str();
  const auto out = dir.path() / "out";
  for (const char* name : {"exp.random", "exp.margin"}) {
    std::size_t files = 0;
    for (const auto& f : fs::directory_iterator(out / "curves" / name)) {
      ++files;
      EXPECT_EQ(lines_of(f.path()).size(), 3u) << f.path();
    }
    EXPECT_EQ(files, 3u);
    const auto plot = lines_of(out / "plots" / (std::string(name) + ".csv"));
    ASSERT_EQ(plot.size(), 4u);
    EXPECT_EQ(plot[0], "n_train,mean,std");
    EXPECT_EQ(plot[3].substr(0, 3), "32,");
  }
  const auto agg = lines_of(out / "aggregate.csv");
  ASSERT_EQ(agg.size(), 3u);
  EXPECT_EQ(agg[0], "plan,dataset,model_kind,strategy,trials,n_train,mean_f1,std_f1,truncated");
  EXPECT_EQ(agg[1].substr(0, 28), "exp.random,exp,lt,random,3,3");
  EXPECT_EQ(lines_of(out / "corpus.jsonl").size(), 2u * 3u * 3u);
}

TEST(Cli, SimulateIsReproducibleAcrossRunsAndJobs) {
  TempDir dir;
  const auto plan = dir.path() / "plan.jsonl";
  write_plan(plan, std::string(R"({"name": "r", "dataset": )") + kSmallDataset +
                       R"(, "strategy": "entropy", "trials": 3, "budget": 32, "seed": 5})" + "\n");
  std::ostringstream log;
  ASSERT_EQ(cmd_simulate(sim_opts(plan, dir.path() / "a"), log), kExitOk);
  ASSERT_EQ(cmd_simulate(sim_opts(plan, dir.path() / "b"), log), kExitOk);
  auto threaded = sim_opts(plan, dir.path() / "c");
  threaded.jobs = 3;
  ASSERT_EQ(cmd_simulate(threaded, log), kExitOk);
  const auto a = slurp(dir.path() / "a" / "corpus.jsonl");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir.path() / "b" / "corpus.jsonl"));
  EXPECT_EQ(a, slurp(dir.path() / "c" / "corpus.jsonl"));
  EXPECT_EQ(slurp(dir.path() / "a" / "aggregate.csv"), slurp(dir.path() / "c" / "aggregate.csv"));
}

TEST(Cli, MalformedPlansAreUsageErrors) {
  TempDir dir;
  const auto plan = dir.path() / "plan.jsonl";
  const std::vector<std::string> bad = {
      R"({"name": "x", "dataset": {"kind": "synthetic"}, "budget": 30, "batch_k": 16})",
      R"({"name": "x", "dataset": {"kind": "csv"}})",
      R"({"name": "x", "dataset": {"kind": "synthetic"}, "strategy": "psychic"})",
      R"({"dataset": {"kind": "synthetic"}})",
      R"({"name": "x", "dataset": {"kind": "synthetic"}, "trials": "many"})",
      R"({"name": "x", "dataset": {"kind": "synthetic"})",
      "",
  };
  for (const auto& body : bad) {
    write_plan(plan, body + "\n");
    std::ostringstream log;
    EXPECT_EQ(cmd_simulate(sim_opts(plan, dir.path() / "out"), log), kExitUsage) << body;
    EXPECT_NE(log.str().find("usage error"), std::string::npos) << log.str();
  }
  write_plan(plan, std::string(R"({"name": "ok", "dataset": )") + kSmallDataset + "}\n" +
                       R"({"name": "x", "dataset": {"kind": "synthetic"}, "budget": 30})" + "\n");
  std::ostringstream log;
  EXPECT_EQ(cmd_simulate(sim_opts(plan, dir.path() / "out"), log), kExitUsage);
  EXPECT_NE(log.str().find("plan line 2"), std::string::npos) << log.str();
  EXPECT_EQ(cmd_simulate(sim_opts(dir.path() / "missing.jsonl", dir.path() / "out"), log), kExitUsage);
}

TEST(Cli, TrainPredictorReportsEveryGroup) {
  TempDir dir;
  const auto plan = dir.path() / "plan.jsonl";
  std::string body;
  for (int g = 0; g < 3; ++g) {
    body += R"({"name": "g)" + std::to_string(g) + R"(", "dataset": {"kind": "synthetic", "clusters": 6, "labels": 3, "dims": 16, "size": 240, "test_size": 120, "noise": )" +
            std::to_string(0.6 + 0.4 * g) + R"(, "seed": )" + std::to_string(g) +
            R"(}, "strategies": ["random", "margin"], "trials": 2, "budget": 64})" + "\n";
  }
  write_plan(plan, body);
  std::ostringstream log;
  ASSERT_EQ(cmd_simulate(sim_opts(plan, dir.path() / "sim"), log), kExitOk) << log.str();

  TrainPredictorOptions opt;
  opt.corpus = {dir.path() / "sim" / "corpus.jsonl"};
  opt.out_dir = dir.path() / "pred";
  opt.trees = 20;
  opt.history = 2;
  opt.baselines = {32, 48};
  ASSERT_EQ(cmd_train_predictor(opt, log), kExitOk) << log.str();
  const auto report = lines_of(opt.out_dir / "report.csv");
  ASSERT_EQ(report.size(), 1u + 3u * 3u + 3u);
  EXPECT_EQ(report[0], "model,MSE,AUC,F1,P,R,test F1,err,instances,stopped,runs");
  for (int g = 0; g < 3; ++g) {
    const std::string group = "g" + std::to_string(g);
    EXPECT_EQ(report[1 + 3 * g].rfind(group + ": forest,", 0), 0u) << report[1 + 3 * g];
    EXPECT_EQ(report[2 + 3 * g].rfind(group + ": baseline 32,", 0), 0u) << report[2 + 3 * g];
    EXPECT_TRUE(fs::exists(opt.out_dir / ("forest-" + group + ".json")));
  }
  EXPECT_EQ(report[10].rfind("all: forest,", 0), 0u);
  const auto forest = ForestModel::from_json(json::parse(slurp(opt.out_dir / "forest.json")));
  EXPECT_EQ(forest.n_features(), FeatureLayout{2}.size());

  opt.tau = 1.5;
  EXPECT_EQ(cmd_train_predictor(opt, log), kExitUsage);
  opt.tau = 0.95;
  opt.corpus = {plan};
  EXPECT_EQ(cmd_train_predictor(opt, log), kExitUsage);
}

TEST(Cli, StatsPrintsFrequenciesAndUnbalances) {
  TempDir dir;
  {
    std::ofstream data(dir.path() / "d.csv");
    data << "id,text,label\n";
    for (int i = 0; i < 90; ++i) data << "r" << i << ",text " << i << "," << (i < 30 ? "a" : i < 60 ? "b" : "c") << "\n";
    std::ofstream(dir.path() / "labels.jsonl") << "{\"name\":\"a\",\"description\":\"first\"}\n"
                                                 "{\"name\":\"b\",\"description\":\"second\"}\n"
                                                 "{\"name\":\"c\",\"description\":\"third\"}\n";
  }
  StatsOptions opt;
  opt.input = dir.path() / "d.csv";
  opt.labels = dir.path() / "labels.jsonl";
  std::ostringstream out, log;
  ASSERT_EQ(cmd_stats(opt, out, log), kExitOk) << log.str();
  EXPECT_NE(out.str().find("a,30,"), std::string::npos);
  EXPECT_NE(out.str().find("U,0\n"), std::string::npos) << out.str();

  opt.unbalance = 2.0;
  opt.output = dir.path() / "skewed.csv";
  out.str("");
  ASSERT_EQ(cmd_stats(opt, out, log), kExitOk) << log.str();
  EXPECT_NE(out.str().find("a,30,"), std::string::npos);
  EXPECT_NE(out.str().find("b,15,"), std::string::npos);
  EXPECT_NE(out.str().find("c,8,"), std::string::npos);
  EXPECT_EQ(lines_of(*opt.output).size(), 1u + 53u);

  opt.unbalance = 0.5;
  EXPECT_EQ(cmd_stats(opt, out, log), kExitUsage);
}
