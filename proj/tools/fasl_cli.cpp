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

#include <csignal>
#include <cstdlib>
#include <iostream>

#include "fasl/http.hpp"

#include <CLI11.hpp>

#include "commands.hpp"

namespace {

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string data_dir = "fasl-data";
  std::size_t dim = 256;
  std::string forest;
  double tau = fasl::kDefaultTau;
  std::size_t history = fasl::kDefaultHistory;
  bool async = false;
};

// Environment values fill options the command line left unset.
void apply_env(ServeOptions& o, const CLI::App& cmd) {
  auto env = [](const char* name) -> const char* { return std::getenv(name); };
  try {
    if (cmd.count("--port") == 0 && env("FASL_PORT")) o.port = std::stoi(env("FASL_PORT"));
    if (cmd.count("--data-dir") == 0 && env("FASL_DATA_DIR")) o.data_dir = env("FASL_DATA_DIR");
    if (cmd.count("--dim") == 0 && env("FASL_ENCODER_DIM")) o.dim = std::stoul(env("FASL_ENCODER_DIM"));
    if (cmd.count("--forest") == 0 && env("FASL_FOREST")) o.forest = env("FASL_FOREST");
    if (cmd.count("--tau") == 0 && env("FASL_TAU")) o.tau = std::stod(env("FASL_TAU"));
  } catch (const std::exception&) {
    throw fasl::cli::UsageError("malformed FASL_* environment value");
  }
}

int cmd_serve(ServeOptions o, const CLI::App& cmd) {
  try {
    apply_env(o, cmd);
    if (o.port <= 0 || o.port > 65535) throw fasl::cli::UsageError("port must be in 1..65535");
    if (o.dim == 0) throw fasl::cli::UsageError("encoder dim must be positive");
    if (!(o.tau > 0.0 && o.tau < 1.0)) throw fasl::cli::UsageError("tau must be in (0, 1)");
    if (!o.forest.empty() && !std::filesystem::exists(o.forest)) {
      throw fasl::cli::UsageError("forest file " + o.forest + " does not exist");
    }
  } catch (const fasl::cli::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return fasl::cli::kExitUsage;
  }
  try {
    fasl::ServiceConfig config;
    config.data_dir = o.data_dir;
    config.encoder_dim = o.dim;
    if (!o.forest.empty()) config.forest_path = o.forest;
    config.tau = o.tau;
    config.history = o.history;
    config.async_training = o.async;
    fasl::Service service(config);
    httplib::Server server;
    fasl::install_routes(server, service);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cerr << "listening on " << o.host << ":" << o.port << " (data dir " << o.data_dir << ")\n";
    if (!server.listen(o.host, o.port)) {
      std::cerr << "error: cannot listen on " << o.host << ":" << o.port << "\n";
      return fasl::cli::kExitFailure;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return fasl::cli::kExitFailure;
  }
  return fasl::cli::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fasl: active few-shot text classification"};
  app.require_subcommand(1);

  fasl::cli::SimulateOptions sim;
  std::string sim_plan, sim_out;
  std::uint64_t sim_seed = 0;
  std::size_t sim_budget = 0, sim_k = 0, sim_cap = 0;
  auto* simulate = app.add_subcommand("simulate", "run simulated-annotator experiments from a plan file");
  simulate->add_option("plan", sim_plan, "plan file (one JSON object per line)")->required();
  simulate->add_option("-o,--out", sim_out, "output directory")->required();
  simulate->add_option("--seed", sim_seed, "seed base for plans without one");
  simulate->add_option("--jobs", sim.jobs, "parallel trials")->check(CLI::PositiveNumber);
  simulate->add_option("--budget", sim_budget, "default labeling budget");
  simulate->add_option("--batch-k", sim_k, "default batch size");
  simulate->add_option("--pool-cap", sim_cap, "default pool cap");
  simulate->add_option("--dim", sim.encoder_dim, "hashing encoder dimension for file datasets");

  fasl::cli::TrainPredictorOptions tp;
  std::vector<std::string> tp_corpus;
  std::string tp_out;
  auto* train = app.add_subcommand("train-predictor", "leave-one-dataset-out stopping predictor");
  train->add_option("corpus", tp_corpus, "curve corpus files")->required();
  train->add_option("-o,--out", tp_out, "output directory")->required();
  train->add_option("--tau", tp.tau, "stopping threshold");
  train->add_option("--history", tp.history, "signal history length");
  train->add_option("--seed", tp.seed, "forest seed");
  train->add_option("--jobs", tp.jobs, "threads for tree fitting")->check(CLI::PositiveNumber);
  train->add_option("--trees", tp.trees, "trees per forest")->check(CLI::PositiveNumber);
  train->add_option("--baseline", tp.baselines, "fixed-step baseline sizes");

  ServeOptions so;
  auto* serve = app.add_subcommand("serve", "run the annotation service");
  serve->add_option("--host", so.host, "bind address");
  serve->add_option("--port", so.port, "port (FASL_PORT)");
  serve->add_option("--data-dir", so.data_dir, "persistent state (FASL_DATA_DIR)");
  serve->add_option("--dim", so.dim, "encoder dimension (FASL_ENCODER_DIM)");
  serve->add_option("--forest", so.forest, "stopping predictor json (FASL_FOREST)");
  serve->add_option("--tau", so.tau, "stopping threshold (FASL_TAU)");
  serve->add_option("--history", so.history, "signal history length of the forest");
  serve->add_flag("--async", so.async, "retrain in the background and answer busy meanwhile");

  fasl::cli::StatsOptions st;
  std::string st_in, st_labels, st_output;
  double st_decay = 0.0;
  auto* stats = app.add_subcommand("stats", "label statistics; optionally write an unbalanced copy");
  stats->add_option("input", st_in, "labeled .csv or .jsonl")->required();
  stats->add_option("--labels", st_labels, "label set (.jsonl)")->required();
  stats->add_option("--unbalance", st_decay, "exponential decay base (> 1)");
  stats->add_option("--seed", st.seed, "sampling seed");
  stats->add_option("--output", st_output, "write the (unbalanced) pool as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fasl::cli::kExitUsage;
  }

  if (*simulate) {
    sim.plan_file = sim_plan;
    sim.out_dir = sim_out;
    if (simulate->count("--seed")) sim.seed = sim_seed;
    if (simulate->count("--budget")) sim.budget = sim_budget;
    if (simulate->count("--batch-k")) sim.batch_k = sim_k;
    if (simulate->count("--pool-cap")) sim.pool_cap = sim_cap;
    return fasl::cli::cmd_simulate(sim);
  }
  if (*train) {
    for (const auto& c : tp_corpus) tp.corpus.emplace_back(c);
    tp.out_dir = tp_out;
    return fasl::cli::cmd_train_predictor(tp);
  }
  if (*serve) return cmd_serve(so, *serve);
  if (*stats) {
    st.input = st_in;
    st.labels = st_labels;
    if (stats->count("--unbalance")) st.unbalance = st_decay;
    if (stats->count("--output")) st.output = st_output;
    return fasl::cli::cmd_stats(st);
  }
  return fasl::cli::kExitUsage;
}
