// riskcal run|sweep|mc --config <file> --out <dir> [--data <csv>] [--seed <u64>] [--workers <k>]
// riskcal simulate --out <csv>   (UJIIndoorLoc-layout surrogate fingerprints)

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "riskcal/experiment.hpp"

namespace fs = std::filesystem;
using namespace riskcal;

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  std::string data;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--data", a.data, "UJIIndoorLoc trainingData.csv (sets data.source = real)");
  cmd->add_option("--seed", a.seed, "master seed (overrides the config)");
  cmd->add_option("--workers", a.workers, "worker threads (overrides the config)");
}

int execute(const std::string& command, const CommonArgs& a, const std::vector<std::string>& argv) {
  ExperimentConfig config = load_config(a.config);
  if (command == "run") {
    if (config.kind != ExperimentKind::Single) {
      throw ConfigError("'run' expects experiment = single, config has '" + std::string(to_string(config.kind)) + "'");
    }
  } else if (command == "sweep") {
    if (config.kind != ExperimentKind::SweepN && config.kind != ExperimentKind::SweepK &&
        config.kind != ExperimentKind::SweepMse) {
      throw ConfigError("'sweep' expects a sweep_n / sweep_K / sweep_mse config, got '" +
                        std::string(to_string(config.kind)) + "'");
    }
  } else {
    config.kind = ExperimentKind::MonteCarlo;
  }
  if (!a.data.empty()) {
    config.source = DataSource::Real;
    config.data_path = a.data;
  }
  if (a.seed) config.seed = *a.seed;
  if (a.workers) config.workers = *a.workers;

  const ExperimentData data(config);
  const fs::path out(a.out);
  fs::create_directories(out);
  const fs::path partial = out / "records.partial.csv";
  std::ofstream stream(partial, std::ios::trunc);
  if (!stream) throw IoError("cannot write '" + partial.string() + "'");
  stream << csv_header() << '\n' << std::flush;

  std::size_t done = 0;
  const std::size_t jobs = axis_points(config).size() * config.trials;
  RunOptions options;
  options.on_records = [&](const std::vector<TrialRecord>& recs) {
    for (const auto& r : recs) stream << to_csv_row(r) << '\n';
    stream.flush();
    ++done;
    std::cerr << "\r[" << done << "/" << jobs << "] trials" << std::flush;
  };
  const auto records = run_experiment(data, options);
  std::cerr << '\n';
  stream.close();

  const ExperimentSummary summary = emit_results(out, data, records, RunMetadata{command, argv});
  fs::remove(partial);

  for (const auto& g : summary.groups) {
    std::cout << g.method << " " << summary.axis << "=" << g.axis_value << " count=" << g.count
              << " coverage=" << g.coverage_mean << " inefficiency=" << g.inefficiency_mean;
    if (!std::isnan(g.predictor_mse_mean)) std::cout << " mse=" << g.predictor_mse_mean;
    if (g.reliable_fraction) {
      std::cout << " reliable=" << *g.reliable_fraction << " gate>=" << *g.gate_threshold << " "
                << (g.gate_pass ? "PASS" : (g.expected_failure ? "FAIL(expected)" : "FAIL"));
    }
    if (g.errors > 0) std::cout << " errors=" << g.errors;
    std::cout << '\n';
  }
  return exit_status(summary);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"risk-controlling prediction sets: calibration experiments"};
  app.require_subcommand(1);
  CommonArgs run_args, sweep_args, mc_args;
  auto* run = app.add_subcommand("run", "single-point experiment (experiment = single)");
  auto* sweep = app.add_subcommand("sweep", "sweep over n, K or auxiliary training size");
  auto* mc = app.add_subcommand("mc", "Monte Carlo reliability check on the synthetic task");
  add_common(run, run_args);
  add_common(sweep, sweep_args);
  add_common(mc, mc_args);

  std::string sim_out;
  FingerprintSimulation sim;
  auto* simulate = app.add_subcommand("simulate", "write simulated fingerprints in the UJIIndoorLoc CSV layout");
  simulate->add_option("--out", sim_out, "output CSV")->required();
  simulate->add_option("--rows", sim.rows, "rows");
  simulate->add_option("--seed", sim.seed, "simulation seed");

  CLI11_PARSE(app, argc, argv);
  const std::vector<std::string> args(argv, argv + argc);
  try {
    if (simulate->parsed()) {
      write_fingerprints(sim_out, simulate_fingerprints(sim));
      return 0;
    }
    if (run->parsed()) return execute("run", run_args, args);
    if (sweep->parsed()) return execute("sweep", sweep_args, args);
    return execute("mc", mc_args, args);
  } catch (const std::exception& e) {
    std::cerr << "riskcal: " << e.what() << '\n';
    return 2;
  }
}
