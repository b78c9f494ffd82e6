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

// Subcommand implementations behind the `fasl` executable. Each returns a
// process exit code: 0 ok, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fasl/fasl.hpp"

namespace fasl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// Thrown for problems in operator-supplied inputs that map to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SimulateOptions {
  fs::path plan_file;
  fs::path out_dir;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::optional<std::size_t> budget;
  std::optional<std::size_t> batch_k;
  std::optional<std::size_t> pool_cap;
  std::size_t encoder_dim = 256;
};

// One parsed plan line with its dataset recipe.
struct PlanEntry {
  ExperimentPlan plan;
  std::string dataset_name;
  json dataset;
  fs::path base_dir;
};

namespace detail {

inline bool safe_name(const std::string& s) {
  return !s.empty() && s.find("..") == std::string::npos &&
         std::all_of(s.begin(), s.end(), [](char c) {
           return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ||
                  c == '.' || c == '+';
         });
}

template <typename T>
T field(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError(std::string("field '") + key + "' has the wrong type");
  }
}

inline std::ifstream open_in(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot open " + p.string());
  return in;
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

inline Pool read_pool(const fs::path& p) {
  auto in = open_in(p);
  const auto format = p.extension() == ".jsonl" ? InputFormat::record_lines : InputFormat::delimited_table;
  return ingest(in, format).pool;
}

inline SyntheticSpec synthetic_spec(const json& d) {
  SyntheticSpec s;
  s.clusters = field(d, "clusters", s.clusters);
  s.dims = field(d, "dims", s.dims);
  s.labels = field(d, "labels", s.labels);
  s.skew = field(d, "skew", s.skew);
  s.noise = field(d, "noise", s.noise);
  s.separation = field(d, "separation", s.separation);
  s.description_noise = field(d, "description_noise", s.description_noise);
  s.size = field(d, "size", s.size);
  s.test_size = field(d, "test_size", s.test_size);
  s.seed = field(d, "seed", s.seed);
  return s;
}

}  // namespace detail

// Plan file: one JSON object per line.
//   {"name": "...", "dataset": {...}, "model_kind": "lt", "strategy": "margin",
//    "strategies": [...], "trials": 10, "budget": 256, "batch_k": 16,
//    "pool_cap": 20000, "seed": 0}
// "strategies" expands to one plan per strategy named "<name>.<strategy>".
// Dataset: {"kind": "synthetic", ...SyntheticSpec fields} or
//          {"kind": "files", "train": path, "test": path, "labels": path,
//           "embeddings"?: path}. Paths are relative to the plan file.
inline std::vector<PlanEntry> parse_plan_file(std::istream& in, const fs::path& base_dir,
                                              const SimulateOptions& opt) {
  std::vector<PlanEntry> out;
  std::string text;
  std::size_t line = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = "plan line " + std::to_string(line) + ": ";
    try {
      const json j = json::parse(text);
      if (!j.is_object()) throw UsageError("expected a JSON object");
      PlanEntry base;
      base.base_dir = base_dir;
      auto& p = base.plan;
      p.name = detail::field<std::string>(j, "name", "");
      if (!detail::safe_name(p.name)) throw UsageError("plan needs a name of [A-Za-z0-9_.+-]");
      if (!j.contains("dataset") || !j["dataset"].is_object()) throw UsageError("plan needs a dataset object");
      base.dataset = j["dataset"];
      base.dataset_name = detail::field<std::string>(base.dataset, "name", p.name);
      p.model_kind = parse_model_kind(detail::field<std::string>(j, "model_kind", "lt"));
      p.batch_k = detail::field(j, "batch_k", opt.batch_k.value_or(p.batch_k));
      p.budget = detail::field(j, "budget", opt.budget.value_or(p.budget));
      p.trials = detail::field(j, "trials", p.trials);
      p.pool_cap = detail::field(j, "pool_cap", opt.pool_cap.value_or(p.pool_cap));
      p.seed_base = detail::field(j, "seed", opt.seed.value_or(p.seed_base));
      p.randomize_2k = detail::field(j, "randomize_2k", p.randomize_2k);
      p.sample_size = detail::field(j, "sample_size", p.sample_size);
      std::vector<std::string> strategies;
      if (j.contains("strategies")) {
        strategies = detail::field<std::vector<std::string>>(j, "strategies", {});
        if (strategies.empty()) throw UsageError("strategies must not be empty");
      } else {
        strategies.push_back(detail::field<std::string>(j, "strategy", "random"));
      }
      const std::string kind = detail::field<std::string>(base.dataset, "kind", "");
      if (kind != "synthetic" && kind != "files") throw UsageError("dataset kind must be synthetic or files");
      for (const auto& s : strategies) {
        PlanEntry e = base;
        e.plan.strategy = parse_strategy(s);
        if (j.contains("strategies")) e.plan.name = base.plan.name + "." + std::string(to_string(e.plan.strategy));
        e.plan.validate();
        if (seen[e.plan.name]++) throw UsageError("duplicate plan name '" + e.plan.name + "'");
        out.push_back(std::move(e));
      }
    } catch (const UsageError& e) {
      throw UsageError(where + e.what());
    } catch (const Error& e) {
      throw UsageError(where + e.what());
    } catch (const json::exception& e) {
      throw UsageError(where + e.what());
    }
  }
  if (out.empty()) throw UsageError("plan file contains no plans");
  return out;
}

inline SimDataset load_dataset(const PlanEntry& entry, std::size_t encoder_dim) {
  const auto& d = entry.dataset;
  if (d.at("kind") == "synthetic") {
    return synth_dataset(detail::synthetic_spec(d), entry.dataset_name);
  }
  auto path = [&](const char* key) {
    if (!d.contains(key) || !d[key].is_string()) throw UsageError(std::string("dataset needs '") + key + "'");
    fs::path p = d[key].get<std::string>();
    return p.is_absolute() ? p : entry.base_dir / p;
  };
  SimDataset out;
  out.name = entry.dataset_name;
  {
    auto in = detail::open_in(path("labels"));
    out.labels = load_label_set(in);
  }
  out.train = detail::read_pool(path("train"));
  out.test = detail::read_pool(path("test"));
  for (const auto& t : out.train.instances()) {
    if (out.test.contains(t.id)) throw ValidationError("instance '" + t.id + "' is in both train and test", {t.id});
  }
  if (d.contains("embeddings")) {
    auto in = detail::open_in(path("embeddings"));
    auto by_id = load_precomputed(in);
    std::unordered_map<std::string, Embedding> by_text;
    auto add = [&](const Pool& pool) {
      for (const auto& t : pool.instances()) {
        auto it = by_id.find(t.id);
        if (it == by_id.end()) throw ValidationError("no embedding for instance '" + t.id + "'", {t.id});
        by_text[t.text] = it->second;
      }
    };
    add(out.train);
    add(out.test);
    for (const auto& e : out.labels.entries()) {
      auto it = by_id.find(e.name);
      if (it == by_id.end()) throw ValidationError("no embedding for label '" + e.name + "'", {e.name});
      by_text[e.description] = it->second;
    }
    out.encoder = std::make_shared<LookupEncoder>(std::move(by_text), "precomputed");
  } else {
    out.encoder = std::make_shared<HashingEncoder>(encoder_dim);
  }
  return out;
}

// Writes curves/<plan>/trial-<t>.jsonl, plots/<plan>.csv, aggregate.csv and
// corpus.jsonl (every curve record) under out_dir.
inline int cmd_simulate(const SimulateOptions& opt, std::ostream& log = std::cerr) {
  std::vector<PlanEntry> plans;
  try {
    auto in = detail::open_in(opt.plan_file);
    plans = parse_plan_file(in, opt.plan_file.parent_path(), opt);
  } catch (const UsageError& e) {
    log << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    fs::create_directories(opt.out_dir / "curves");
    fs::create_directories(opt.out_dir / "plots");
    auto agg_out = detail::open_out(opt.out_dir / "aggregate.csv");
    auto corpus_out = detail::open_out(opt.out_dir / "corpus.jsonl");
    agg_out << "plan,dataset,model_kind,strategy,trials,n_train,mean_f1,std_f1,truncated\n";
    for (const auto& entry : plans) {
      const SimDataset data = load_dataset(entry, opt.encoder_dim);
      const auto curves = run_plan(entry.plan, data, opt.jobs);
      const auto dir = opt.out_dir / "curves" / entry.plan.name;
      fs::create_directories(dir);
      std::size_t truncated = 0;
      for (const auto& c : curves) {
        truncated += c.truncated;
        const auto records = to_curve_records(c, data.name, entry.plan.strategy, data.labels.size());
        auto out = detail::open_out(dir / ("trial-" + std::to_string(c.trial) + ".jsonl"));
        write_curve_records(out, records);
        write_curve_records(corpus_out, records);
      }
      if (truncated) log << "warning: " << entry.plan.name << ": " << truncated << " truncated trial(s)\n";
      const auto agg = aggregate(curves);
      auto plot = detail::open_out(opt.out_dir / "plots" / (entry.plan.name + ".csv"));
      plot << "n_train,mean,std\n";
      char buf[96];
      for (std::size_t i = 0; i < agg.n_train.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f\n", agg.n_train[i], agg.mean[i], agg.std[i]);
        plot << buf;
      }
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%.6f,%.6f,%zu\n", curves.size(), agg.n_train.back(),
                    agg.mean.back(), agg.std.back(), truncated);
      agg_out << entry.plan.name << ',' << data.name << ',' << to_string(entry.plan.model_kind) << ','
              << to_string(entry.plan.strategy) << ',' << buf;
      log << entry.plan.name << ": final macro F1 " << agg.mean.back() << " +- " << agg.std.back() << "\n";
    }
  } catch (const UsageError& e) {
    log << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

struct TrainPredictorOptions {
  std::vector<fs::path> corpus;
  fs::path out_dir;
  double tau = kDefaultTau;
  std::size_t history = kDefaultHistory;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::size_t trees = 200;
  std::vector<double> baselines = {272, 288, 304};
};

// Leave-one-dataset-out evaluation. Writes report.csv (one block per held-out
// group plus pooled rows), forest-<group>.json per fold and forest.json
// trained on every run.
inline int cmd_train_predictor(const TrainPredictorOptions& opt, std::ostream& log = std::cerr) {
  std::vector<CurveRecord> records;
  try {
    for (const auto& p : opt.corpus) {
      auto in = detail::open_in(p);
      auto part = read_curve_records(in);
      records.insert(records.end(), part.begin(), part.end());
    }
    if (!(opt.tau > 0.0 && opt.tau < 1.0)) throw UsageError("tau must be in (0, 1)");
    if (opt.history == 0) throw UsageError("history must be at least 1");
  } catch (const UsageError& e) {
    log << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    log << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }
  try {
    const FeatureLayout layout{opt.history};
    const auto runs = build_series(records, layout);
    ForestConfig fc;
    fc.n_trees = opt.trees;
    fc.seed = opt.seed;
    fc.jobs = opt.jobs;
    const auto forests = leave_one_out_train(runs, fc);
    fs::create_directories(opt.out_dir);
    const StoppingRule rule{opt.tau};
    std::vector<ReportRow> rows;
    std::vector<RunCurve> pooled_forest;
    std::vector<std::vector<RunCurve>> pooled_base(opt.baselines.size());
    auto base_name = [](double b) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "baseline %g", b);
      return std::string(buf);
    };
    for (const auto& [group, forest] : forests) {
      std::vector<RunCurve> fc_runs;
      std::vector<std::vector<RunCurve>> base_runs(opt.baselines.size());
      for (const auto& r : runs) {
        if (r.dataset != group) continue;
        RunCurve c{r.n_train, {}, r.targets, r.test_f1};
        for (const auto& f : r.features) c.predictions.push_back(forest.predict(f));
        fc_runs.push_back(c);
        for (std::size_t b = 0; b < opt.baselines.size(); ++b) {
          RunCurve bc{r.n_train, baseline_predictions(r.n_train, opt.baselines[b]), r.targets, r.test_f1};
          base_runs[b].push_back(bc);
        }
      }
      rows.push_back({group + ": forest", evaluate_predictor(fc_runs, rule)});
      for (std::size_t b = 0; b < opt.baselines.size(); ++b) {
        rows.push_back({group + ": " + base_name(opt.baselines[b]), evaluate_predictor(base_runs[b], rule)});
        pooled_base[b].insert(pooled_base[b].end(), base_runs[b].begin(), base_runs[b].end());
      }
      pooled_forest.insert(pooled_forest.end(), fc_runs.begin(), fc_runs.end());
      std::ofstream(opt.out_dir / ("forest-" + group + ".json")) << forest.to_json().dump() << "\n";
    }
    rows.push_back({"all: forest", evaluate_predictor(pooled_forest, rule)});
    for (std::size_t b = 0; b < opt.baselines.size(); ++b) {
      rows.push_back({"all: " + base_name(opt.baselines[b]), evaluate_predictor(pooled_base[b], rule)});
    }
    {
      auto out = detail::open_out(opt.out_dir / "report.csv");
      write_report_table(out, rows);
    }
    write_report_table(log, rows);
    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (const auto& r : runs) {
      x.insert(x.end(), r.features.begin(), r.features.end());
      y.insert(y.end(), r.targets.begin(), r.targets.end());
    }
    auto out = detail::open_out(opt.out_dir / "forest.json");
    out << forest_fit(x, y, fc).to_json().dump() << "\n";
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

struct StatsOptions {
  fs::path input;
  fs::path labels;
  std::optional<double> unbalance;
  std::uint64_t seed = 0;
  std::optional<fs::path> output;
};

// Label statistics for a labeled file; optionally writes an exponentially
// unbalanced copy as CSV.
inline int cmd_stats(const StatsOptions& opt, std::ostream& out = std::cout,
                     std::ostream& log = std::cerr) {
  try {
    Pool pool = detail::read_pool(opt.input);
    LabelSet labels = [&] {
      auto in = detail::open_in(opt.labels);
      return load_label_set(in);
    }();
    if (opt.unbalance) pool = make_unbalanced(pool, labels, {*opt.unbalance, opt.seed});
    const auto stats = compute_stats(pool, labels);
    out << "label,count,frequency\n";
    for (std::size_t l = 0; l < labels.size(); ++l) {
      out << labels.name(l) << ',' << stats.counts[l] << ',' << stats.frequencies[l] << '\n';
    }
    out << "instances," << pool.size() << "\nU," << stats.uniformness << '\n';
    if (opt.output) {
      auto f = detail::open_out(*opt.output);
      f << "id,text,label\n";
      auto quote = [](const std::string& s) {
        std::string q = "\"";
        for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
        return q + "\"";
      };
      for (const auto& t : pool.instances()) f << quote(t.id) << ',' << quote(t.text) << ',' << quote(*t.gold_label) << '\n';
    }
  } catch (const UsageError& e) {
    log << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    log << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::parse || e.code() == ErrorCode::validation ||
                   e.code() == ErrorCode::invalid_argument
               ? kExitUsage
               : kExitFailure;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace fasl::cli
