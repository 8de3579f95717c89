#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cpl/config.hpp"
#include "cpl/data.hpp"
#include "cpl/experiment.hpp"

namespace {

// exit codes: 0 ok, 1 I/O error, 2 invalid config/arguments, 3 divergence
constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitInvalid = 2;
constexpr int kExitDiverged = 3;

int cmd_gen_data(const std::string& config_path, const std::vector<std::string>& overrides) {
  const cpl::ExperimentConfig cfg = cpl::load_experiment_config(config_path, overrides);
  const cpl::Corpus corpus = cpl::generate_corpus(cfg.corpus);
  namespace fs = std::filesystem;
  if (fs::path(cfg.corpus_manifest).has_parent_path())
    fs::create_directories(fs::path(cfg.corpus_manifest).parent_path());
  if (fs::path(cfg.corpus_features).has_parent_path())
    fs::create_directories(fs::path(cfg.corpus_features).parent_path());
  cpl::save_corpus(corpus, cfg.corpus_manifest, cfg.corpus_features);
  std::cout << "wrote " << cfg.corpus_manifest << " and " << cfg.corpus_features << " ("
            << corpus.utterances.size() << " utterances)\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              std::uint64_t seed, bool seed_given, const std::string& out_dir) {
  const cpl::ExperimentConfig cfg = cpl::load_experiment_config(config_path, overrides);
  const std::uint64_t use_seed = seed_given ? seed : (cfg.seeds.empty() ? 1 : cfg.seeds.front());
  const cpl::Corpus corpus = cpl::load_corpus(cfg.corpus_manifest, cfg.corpus_features);
  const std::string run_dir =
      out_dir.empty() ? cfg.output_dir + "/seed" + std::to_string(use_seed) : out_dir;
  const cpl::RunSummary s = cpl::run_experiment(cfg, corpus, use_seed, run_dir);
  std::cout << "status=" << (s.status == cpl::RunStatus::Ok ? "OK" : "DV")
            << " steps=" << s.steps << " dev_ter=" << s.final_dev_ter
            << " dev_wer=" << s.final_dev_wer << " test_ter=" << s.final_test_ter
            << " test_wer=" << s.final_test_wer << " wall_s=" << s.wall_time_s << "\n";
  return s.status == cpl::RunStatus::Ok ? kExitOk : kExitDiverged;
}

int cmd_sweep(const std::string& config_path, const std::string& grid_path,
              const std::string& out_dir) {
  std::ifstream is(config_path);
  if (!is) throw std::runtime_error("cannot open config " + config_path);
  nlohmann::ordered_json base = nlohmann::ordered_json::parse(is);
  // validate the base config before running anything
  const cpl::ExperimentConfig cfg = cpl::experiment_config_from_json(base);
  const cpl::SweepSpec spec = cpl::load_sweep_spec(grid_path);
  const cpl::Corpus corpus = cpl::load_corpus(cfg.corpus_manifest, cfg.corpus_features);
  const auto rows = cpl::run_sweep(base, spec, corpus, out_dir);
  int errors = 0;
  for (const auto& r : rows) {
    std::cout << r.cell << " seed=" << r.seed << " status=" << r.status;
    if (r.status == "OK") std::cout << " dev_ter=" << r.dev_ter;
    if (r.status == "ERROR") {
      std::cout << " error=" << r.error;
      ++errors;
    }
    std::cout << "\n";
  }
  std::cout << "wrote " << out_dir << "/sweep.csv and " << out_dir << "/sweep_agg.csv\n";
  return errors == 0 ? kExitOk : kExitIo;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  int rc = kExitOk;
  for (const auto& rd : run_dirs) {
    const std::string dest =
        run_dirs.size() == 1 ? out_dir
                             : out_dir + "/" + std::filesystem::path(rd).filename().string();
    try {
      const cpl::ReportResult res = cpl::write_report(rd, dest);
      std::cout << rd << ": scatter_rows=" << res.scatter_rows
                << " missing_fields=" << res.missing_fields << " pearson_r=";
      if (res.pearson_r)
        std::cout << *res.pearson_r;
      else
        std::cout << "undefined";
      std::cout << "\n";
    } catch (const std::exception& e) {
      std::cerr << rd << ": " << e.what() << "\n";
      rc = kExitIo;
    }
  }
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous pseudo-labeling laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string grid_path;
  std::string out_dir;
  std::vector<std::string> overrides;
  std::vector<std::string> run_dirs;
  std::uint64_t seed = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus files");
  gen->add_option("--config", config_path, "experiment config (JSON)")->required();
  gen->add_option("--set", overrides, "dotted-path override, e.g. corpus.noise_sigma=0.5");

  auto* train = app.add_subcommand("train", "Run one training experiment");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  auto* seed_opt = train->add_option("--seed", seed, "master seed for this run");
  train->add_option("--out", out_dir, "run directory (default: output_dir/seed<N>)");
  train->add_option("--set", overrides, "dotted-path override, e.g. trainer.lambda=5");

  auto* sweep = app.add_subcommand("sweep", "Run a grid of configurations across seeds");
  sweep->add_option("--config", config_path, "base experiment config (JSON)")->required();
  sweep->add_option("--grid", grid_path, "grid spec (JSON with cells and seeds)")->required();
  sweep->add_option("--out", out_dir, "sweep output directory")->required();

  auto* report = app.add_subcommand("report", "Extract CSV series and correlations from logs");
  report->add_option("--out", out_dir, "report output directory")->required();
  report->add_option("runs", run_dirs, "run directories containing log.jsonl")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, overrides);
    if (train->parsed())
      return cmd_train(config_path, overrides, seed, seed_opt->count() > 0, out_dir);
    if (sweep->parsed()) return cmd_sweep(config_path, grid_path, out_dir);
    if (report->parsed()) return cmd_report(run_dirs, out_dir);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitInvalid;
}
