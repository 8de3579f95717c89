#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpl/config.hpp"
#include "cpl/data.hpp"
#include "cpl/trainer.hpp"

namespace cpl {

struct RunSummary {
  RunStatus status = RunStatus::Ok;
  std::uint64_t seed = 0;
  long steps = 0;
  double final_dev_ter = std::nan("");
  double final_dev_wer = std::nan("");
  double final_test_ter = std::nan("");
  double final_test_wer = std::nan("");
  double wall_time_s = 0.0;
};

inline nlohmann::ordered_json to_json(const RunSummary& s) {
  nlohmann::ordered_json j;
  j["status"] = s.status == RunStatus::Ok ? "OK" : "DV";
  j["seed"] = s.seed;
  j["steps"] = s.steps;
  j["final_dev_ter"] = s.final_dev_ter;
  j["final_dev_wer"] = s.final_dev_wer;
  j["final_test_ter"] = s.final_test_ter;
  j["final_test_wer"] = s.final_test_wer;
  j["wall_time_s"] = s.wall_time_s;
  return j;
}

// Runs one training experiment and writes the run directory: resolved
// config, JSONL step log, final checkpoint and summary. The corpus must
// already be generated.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const Corpus& corpus,
                                 std::uint64_t seed, const std::string& run_dir,
                                 RunResult* result_out = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  {
    std::ofstream os(run_dir + "/config.json");
    auto j = to_json(cfg);
    j["seed"] = seed;
    os << j.dump(2) << "\n";
  }
  std::ofstream log(run_dir + "/log.jsonl");
  if (!log) throw std::runtime_error("run_experiment: cannot open log in " + run_dir);

  const auto start = std::chrono::steady_clock::now();
  Trainer trainer(cfg.encoder, cfg.augment, cfg.lr, cfg.trainer, corpus, seed, &log,
                  make_oracle_hook(corpus));
  RunResult res = trainer.run();
  const auto end = std::chrono::steady_clock::now();

  save_checkpoint(run_dir + "/model.ckpt", cfg.encoder, trainer.state());

  RunSummary s;
  s.status = res.status;
  s.seed = seed;
  s.steps = res.steps;
  s.final_dev_ter = res.final_dev_ter;
  s.final_dev_wer = res.final_dev_wer;
  s.final_test_ter = res.final_test_ter;
  s.final_test_wer = res.final_test_wer;
  s.wall_time_s = std::chrono::duration<double>(end - start).count();
  {
    std::ofstream os(run_dir + "/summary.json");
    os << to_json(s).dump(2) << "\n";
  }
  if (result_out) *result_out = std::move(res);
  return s;
}

// ---- sweep: a grid of named override cells times a seed list.

struct SweepCell {
  std::string name;
  std::vector<std::string> overrides;
};

struct SweepRow {
  std::string cell;
  std::uint64_t seed = 0;
  std::string status;  // OK | DV | ERROR
  double dev_ter = std::nan("");
  double dev_wer = std::nan("");
  std::string error;
};

struct SweepSpec {
  std::vector<SweepCell> cells;
  std::vector<std::uint64_t> seeds;
};

inline SweepSpec load_sweep_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open grid spec " + path);
  nlohmann::json j = nlohmann::json::parse(is);
  SweepSpec spec;
  spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& jc : j.at("cells")) {
    SweepCell cell;
    cell.name = jc.at("name").get<std::string>();
    if (jc.contains("overrides"))
      cell.overrides = jc.at("overrides").get<std::vector<std::string>>();
    spec.cells.push_back(std::move(cell));
  }
  if (spec.cells.empty() || spec.seeds.empty())
    throw std::invalid_argument("grid spec needs at least one cell and one seed");
  return spec;
}

// Runs every (cell, seed) pair; partial failures are recorded and the
// sweep continues. Writes sweep.csv (per run) and sweep_agg.csv
// (mean/std and DV counts per cell) under out_dir.
inline std::vector<SweepRow> run_sweep(const nlohmann::ordered_json& base_config,
                                       const SweepSpec& spec, const Corpus& corpus,
                                       const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<SweepRow> rows;
  for (const auto& cell : spec.cells) {
    for (std::uint64_t seed : spec.seeds) {
      SweepRow row;
      row.cell = cell.name;
      row.seed = seed;
      try {
        nlohmann::ordered_json j = base_config;
        for (const auto& o : cell.overrides) apply_override(j, o);
        const ExperimentConfig cfg = experiment_config_from_json(j);
        const std::string run_dir =
            out_dir + "/" + cell.name + "/seed" + std::to_string(seed);
        const RunSummary s = run_experiment(cfg, corpus, seed, run_dir);
        row.status = s.status == RunStatus::Ok ? "OK" : "DV";
        row.dev_ter = s.final_dev_ter;
        row.dev_wer = s.final_dev_wer;
      } catch (const std::exception& e) {
        row.status = "ERROR";
        row.error = e.what();
      }
      rows.push_back(std::move(row));
    }
  }

  {
    std::ofstream os(out_dir + "/sweep.csv");
    os << "cell,seed,status,dev_ter,dev_wer,error\n";
    for (const auto& r : rows)
      os << r.cell << "," << r.seed << "," << r.status << "," << r.dev_ter << "," << r.dev_wer
         << "," << r.error << "\n";
  }
  {
    std::ofstream os(out_dir + "/sweep_agg.csv");
    os << "cell,n,n_ok,n_dv,n_error,mean_dev_ter,std_dev_ter,mean_dev_wer,std_dev_wer\n";
    for (const auto& cell : spec.cells) {
      std::vector<double> ters, wers;
      int n = 0, ndv = 0, nerr = 0;
      for (const auto& r : rows) {
        if (r.cell != cell.name) continue;
        ++n;
        if (r.status == "DV") ++ndv;
        if (r.status == "ERROR") ++nerr;
        if (r.status == "OK") {
          ters.push_back(r.dev_ter);
          wers.push_back(r.dev_wer);
        }
      }
      auto mean = [](const std::vector<double>& v) {
        if (v.empty()) return std::nan("");
        double s = 0;
        for (double d : v) s += d;
        return s / static_cast<double>(v.size());
      };
      auto stdev = [&](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        const double m = mean(v);
        double s = 0;
        for (double d : v) s += (d - m) * (d - m);
        return std::sqrt(s / static_cast<double>(v.size() - 1));
      };
      os << cell.name << "," << n << "," << (n - ndv - nerr) << "," << ndv << "," << nerr << ","
         << mean(ters) << "," << stdev(ters) << "," << mean(wers) << "," << stdev(wers) << "\n";
    }
  }
  return rows;
}

// ---- report: CSV series and the correlation scatter extracted from run logs.

struct ReportResult {
  std::size_t scatter_rows = 0;
  std::size_t missing_fields = 0;
  std::optional<double> pearson_r;
};

inline std::vector<StepRecord> load_jsonl_records(const std::string& path,
                                                  std::size_t* missing_fields = nullptr) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open log " + path);
  std::vector<StepRecord> records;
  std::string line;
  auto num = [](const nlohmann::json& j, const char* key, std::size_t* missing) {
    if (!j.contains(key)) {
      if (missing) ++*missing;
      return std::nan("");
    }
    const auto& v = j.at(key);
    return v.is_null() ? std::nan("") : v.get<double>();
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    StepRecord r;
    r.step = j.at("step").get<long>();
    r.phase = j.at("phase").get<std::string>();
    r.branch = j.at("branch").get<std::string>();
    r.loss = num(j, "loss", missing_fields);
    r.tau = num(j, "tau", missing_fields);
    r.eta = num(j, "eta", missing_fields);
    r.p_out = num(j, "p_out", missing_fields);
    r.pl_ter = num(j, "pl_ter", missing_fields);
    r.oracle_wer = num(j, "oracle_wer", missing_fields);
    r.blank_fraction = num(j, "blank_fraction", missing_fields);
    r.pl_len_ratio = num(j, "pl_len_ratio", missing_fields);
    r.dev_ter = num(j, "dev_ter", missing_fields);
    r.dev_ter_recent = num(j, "dev_ter_recent", missing_fields);
    records.push_back(std::move(r));
  }
  return records;
}

// Emits p_out, tau and blank-fraction series plus the correlation scatter
// (pl_ter vs oracle_wer) with its Pearson r for one run directory.
inline ReportResult write_report(const std::string& run_dir, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ReportResult res;
  const std::vector<StepRecord> records =
      load_jsonl_records(run_dir + "/log.jsonl", &res.missing_fields);

  {
    std::ofstream os(out_dir + "/pout_vs_step.csv");
    os << "step,p_out\n";
    for (const auto& r : records)
      if (std::isfinite(r.p_out)) os << r.step << "," << r.p_out << "\n";
  }
  {
    std::ofstream os(out_dir + "/tau_vs_step.csv");
    os << "step,tau\n";
    for (const auto& r : records)
      if (std::isfinite(r.tau)) os << r.step << "," << r.tau << "\n";
  }
  {
    std::ofstream os(out_dir + "/blank_fraction_vs_step.csv");
    os << "step,blank_fraction\n";
    for (const auto& r : records)
      if (std::isfinite(r.blank_fraction)) os << r.step << "," << r.blank_fraction << "\n";
  }
  {
    std::ofstream os(out_dir + "/correlation.csv");
    os << "step,pl_ter,oracle_wer\n";
    for (const auto& r : records) {
      if (r.branch == "unlabeled") {
        os << r.step << "," << r.pl_ter << "," << r.oracle_wer << "\n";
        ++res.scatter_rows;
      }
    }
  }
  res.pearson_r = oracle_correlation(records);
  {
    std::ofstream os(out_dir + "/report.json");
    nlohmann::ordered_json j;
    j["run_dir"] = run_dir;
    j["scatter_rows"] = res.scatter_rows;
    j["missing_fields"] = res.missing_fields;
    if (res.pearson_r)
      j["pearson_r"] = *res.pearson_r;
    else
      j["pearson_r"] = "undefined";
    os << j.dump(2) << "\n";
  }
  return res;
}

}  // namespace cpl
