#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "riskcal/experiment.hpp"

using namespace riskcal;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("riskcal_exp_" + name);
  fs::remove_all(p);
  return p;
}

// Small synthetic setup with a cheap auxiliary predictor.
ExperimentConfig quick_config() {
  ExperimentConfig c;
  c.trials = 3;
  c.seed = 42;
  c.n = 120;
  c.unlabeled = 600;
  c.validation_size = 200;
  c.synthetic.oracle_size = 100000;
  c.aux.kind = AuxKind::Elm;
  c.aux.elm = ElmOptions{32, 1e-2};
  c.calibration.folds = 2;
  return c;
}

TrialRecord sample_record() {
  TrialRecord r;
  r.experiment = "single";
  r.axis = "none";
  r.method = "RCPS";
  r.trial = 4;
  r.master_seed = 18446744073709551615ULL;
  r.seed = 123456789;
  r.n = 200;
  r.unlabeled = 15650;
  r.folds = 5;
  r.lambda_hat = 0.1 + 0.2;
  r.coverage = 0.9;
  r.inefficiency = 1e-300;
  r.true_risk = 0.1;
  r.warnings = "a, \"quoted\"\nline";
  return r;
}

}  // namespace

TEST(Config, ParsesSectionsAndRejectsUnknownKeys) {
  const auto j = nlohmann::json::parse(R"({
    "experiment": "sweep_K", "methods": ["RCPS_CPPI"], "trials": 7, "seed": 9,
    "data": {"source": "simulated", "n": 50, "building": 1, "simulation": {"rows": 500}},
    "calibration": {"alpha": 0.2, "delta": 0.05, "K": 5, "ucb": "hoeffding"},
    "sweep": {"values": [1, 2, 5, 10]},
    "aux": {"kind": "mlp", "hidden": [16, 8, 4], "max_training_samples": 40},
    "workers": 3
  })");
  const ExperimentConfig c = config_from_json(j);
  EXPECT_EQ(c.kind, ExperimentKind::SweepK);
  EXPECT_EQ(c.methods, std::vector<Method>{Method::RcpsCppi});
  EXPECT_EQ(c.trials, 7u);
  EXPECT_EQ(c.source, DataSource::Simulated);
  EXPECT_EQ(c.building, 1);
  EXPECT_EQ(c.simulation.rows, 500u);
  EXPECT_EQ(c.calibration.alpha, 0.2);
  EXPECT_EQ(c.calibration.ucb_method, UcbMethod::Hoeffding);
  EXPECT_EQ(c.sweep_values, (std::vector<double>{1, 2, 5, 10}));
  EXPECT_EQ(c.aux.mlp.hidden, (std::vector<std::size_t>{16, 8, 4}));
  EXPECT_EQ(c.workers, 3u);
  EXPECT_NO_THROW(c.validate());

  // resolved config survives a JSON round trip
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));

  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"trails": 3})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"data": {"sorce": "real"}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"methods": ["RCPS", "XYZ"]})")), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/riskcal.json"), IoError);
}

TEST(Config, ShippedConfigsLoad) {
  std::size_t count = 0;
  for (const auto& entry : fs::directory_iterator(RISKCAL_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    ++count;
    EXPECT_NO_THROW(load_config(entry.path().string()).validate()) << entry.path();
  }
  EXPECT_GE(count, 5u);
}

TEST(Config, ValidationErrors) {
  ExperimentConfig c = quick_config();
  c.kind = ExperimentKind::MonteCarlo;
  c.source = DataSource::Real;
  c.data_path = "x.csv";
  EXPECT_THROW(c.validate(), ConfigError);
  c.source = DataSource::Simulated;
  EXPECT_THROW(c.validate(), ConfigError);

  c = quick_config();
  c.kind = ExperimentKind::SweepN;
  EXPECT_THROW(c.validate(), ConfigError);  // no values
  c.sweep_values = {50, 100.5};
  EXPECT_THROW(c.validate(), ConfigError);

  c = quick_config();
  c.source = DataSource::Real;
  EXPECT_THROW(c.validate(), ConfigError);  // no path

  c = quick_config();
  c.unlabeled = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.methods = {Method::Rcps};
  EXPECT_NO_THROW(c.validate());

  c = quick_config();
  c.calibration.delta = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Records, OneRecordIsTwoCsvLines) {
  const fs::path dir = scratch("one");
  fs::create_directories(dir);
  TrialRecord r = sample_record();
  r.warnings = "plain";
  write_records_csv(dir / "records.csv", {r});
  std::ifstream in(dir / "records.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_EQ(lines[0],
            "experiment,axis,axis_value,method,trial,master_seed,seed,n,N,K,lambda_hat,coverage,inefficiency,"
            "predictor_mse,true_risk,no_valid_threshold,warnings,error");
}

TEST(Records, CsvRoundTripIsExact) {
  std::vector<TrialRecord> records;
  records.push_back(sample_record());
  TrialRecord failed = sample_record();
  failed.method = "RCPS_CPPI";
  failed.lambda_hat = std::numeric_limits<double>::quiet_NaN();
  failed.error = "fold 2 has 1 training samples, need 2";
  failed.no_valid_threshold = true;
  records.push_back(failed);
  std::stringstream ss;
  ss << csv_header() << "\n";
  for (const auto& r : records) ss << to_csv_row(r) << "\n";
  const auto back = parse_records_csv(ss);
  ASSERT_EQ(back.size(), records.size());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_TRUE(same_record(back[i], records[i])) << i;

  std::stringstream bad("experiment,axis\nsingle,none\n");
  EXPECT_THROW(parse_records_csv(bad), SchemaError);
}

TEST(Summary, IdenticalKeysAggregate) {
  ExperimentConfig c = quick_config();
  std::vector<TrialRecord> records(5, sample_record());
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].trial = i;
    records[i].inefficiency = static_cast<double>(i);
  }
  const ExperimentSummary s = summarize(records, c);
  ASSERT_EQ(s.groups.size(), 1u);
  EXPECT_EQ(s.groups[0].count, 5u);
  EXPECT_DOUBLE_EQ(s.groups[0].inefficiency_mean, 2.0);
  EXPECT_DOUBLE_EQ(s.groups[0].inefficiency_std, std::sqrt(2.5));  // sample standard deviation
  const auto j = summary_to_json(s);
  EXPECT_EQ(j["groups"].size(), 1u);
  EXPECT_EQ(j["groups"][0]["count"], 5);
}

TEST(Summary, ExitStatusAndGates) {
  EXPECT_NEAR(reliability_gate(0.1, 200), 0.9 - 2.0 * std::sqrt(0.09 / 200.0), 1e-15);
  EXPECT_NEAR(reliability_gate(0.1, 200), 0.858, 5e-4);

  ExperimentConfig c = quick_config();
  c.kind = ExperimentKind::MonteCarlo;
  c.methods = {Method::Rcps, Method::Ss};
  std::vector<TrialRecord> records;
  for (std::size_t t = 0; t < 10; ++t) {
    TrialRecord r = sample_record();
    r.trial = t;
    r.true_risk = 0.05;
    records.push_back(r);
    r.method = "SS";
    r.true_risk = 0.3;  // every SS trial unreliable
    records.push_back(r);
  }
  ExperimentSummary s = summarize(records, c);
  EXPECT_EQ(s.groups[0].reliable_fraction, 1.0);
  EXPECT_TRUE(s.groups[0].gate_pass);
  EXPECT_FALSE(s.groups[1].gate_pass);
  EXPECT_TRUE(s.groups[1].expected_failure);
  EXPECT_EQ(exit_status(s), 0);

  c.expected_failures.clear();
  EXPECT_EQ(exit_status(summarize(records, c)), 1);

  c.expected_failures = {Method::Ss};
  records[0].error = "boom";
  EXPECT_EQ(exit_status(summarize(records, c)), 1);
}

TEST(Experiment, SingleRunProducesValidRecords) {
  const ExperimentData data(quick_config());
  const auto records = run_experiment(data);
  ASSERT_EQ(records.size(), 3u * 4u);
  for (const auto& r : records) {
    EXPECT_TRUE(r.ok()) << r.method << ": " << r.error;
    EXPECT_GE(r.coverage, 0.0);
    EXPECT_LE(r.coverage, 1.0);
    EXPECT_DOUBLE_EQ(r.coverage, 1.0 - r.true_risk);
    EXPECT_GE(r.inefficiency, 0.0);
    EXPECT_EQ(r.n, 120u);
    EXPECT_EQ(r.seed, derive_seed(42, r.trial));
    if (r.method == "RCPS") EXPECT_TRUE(std::isnan(r.predictor_mse));
    if (r.method == "RCPS_CPPI") EXPECT_EQ(r.folds, 2u);
  }
}

TEST(Experiment, AlphaOneRecordIsValid) {
  ExperimentConfig c = quick_config();
  c.methods = {Method::Rcps};
  const TrialRecord strict = run_single(ExperimentData(c));
  c.calibration.alpha = 1.0;
  const TrialRecord r = run_single(ExperimentData(c));
  EXPECT_TRUE(r.ok()) << r.error;
  EXPECT_FALSE(r.no_valid_threshold);
  EXPECT_LT(r.lambda_hat, strict.lambda_hat);
  EXPECT_GE(r.coverage, 0.0);
  EXPECT_LT(r.coverage, 0.5);  // near-empty sets
}

TEST(Experiment, WorkerCountDoesNotChangeResults) {
  ExperimentConfig c = quick_config();
  c.trials = 6;
  const auto serial = run_experiment(ExperimentData(c));
  c.workers = 4;
  std::size_t streamed = 0;
  RunOptions opts;
  opts.on_records = [&](const std::vector<TrialRecord>& rs) { streamed += rs.size(); };
  const auto parallel = run_experiment(ExperimentData(c), opts);
  ASSERT_EQ(serial.size(), parallel.size());
  EXPECT_EQ(streamed, parallel.size());
  for (std::size_t i = 0; i < serial.size(); ++i) EXPECT_TRUE(same_record(serial[i], parallel[i])) << i;
}

TEST(Experiment, RecordReplaysFromItsSeeds) {
  const ExperimentData data(quick_config());
  const auto records = run_experiment(data);
  const auto replay = run_trial(data, axis_points(data.config()).front(), 2);
  for (std::size_t m = 0; m < replay.size(); ++m) EXPECT_TRUE(same_record(replay[m], records[2 * 4 + m]));
}

TEST(Experiment, SweepRecordCount) {
  ExperimentConfig c = quick_config();
  c.kind = ExperimentKind::SweepN;
  c.sweep_values = {50, 100, 200, 350, 500};
  c.trials = 2;
  const auto records = run_experiment(ExperimentData(c));
  EXPECT_EQ(records.size(), 5u * 4u * 2u);
  EXPECT_EQ(records.front().axis, "n");
  EXPECT_EQ(records.back().n, 500u);
}

TEST(Experiment, KSweepRunsPpiAtOneFold) {
  ExperimentConfig c = quick_config();
  c.kind = ExperimentKind::SweepK;
  c.methods = {Method::RcpsCppi, Method::RcpsPpi};
  c.sweep_values = {1, 2};
  c.trials = 1;
  const auto records = run_experiment(ExperimentData(c));
  ASSERT_EQ(records.size(), 4u);
  // at K = 1 cross-fitting is the single split
  EXPECT_EQ(records[0].folds, 1u);
  EXPECT_EQ(records[0].lambda_hat, records[1].lambda_hat);
  EXPECT_EQ(records[2].folds, 2u);
}

TEST(Experiment, FailedTrialIsRecordedAndRunContinues) {
  ExperimentConfig c = quick_config();
  // the single split trains on 60 samples, each of 4 folds on 90
  c.calibration.folds = 4;
  c.calibration.min_training_size = 70;
  const ExperimentData data(c);
  const auto records = run_experiment(data);
  std::size_t errors = 0;
  for (const auto& r : records) {
    if (r.method == "RCPS_PPI") {
      EXPECT_FALSE(r.ok());
      ++errors;
    } else {
      EXPECT_TRUE(r.ok()) << r.error;
    }
  }
  EXPECT_EQ(errors, 3u);
  EXPECT_EQ(exit_status(summarize(records, c)), 1);
}

TEST(Experiment, SimulatedSourceEndToEnd) {
  ExperimentConfig c;
  c.source = DataSource::Simulated;
  c.simulation.rows = 900;
  c.simulation.access_points = 60;
  c.n = 100;
  c.trials = 2;
  c.aux.kind = AuxKind::Elm;
  c.calibration.folds = 2;
  const ExperimentData data(c);
  const auto records = run_experiment(data);
  ASSERT_EQ(records.size(), 8u);
  for (const auto& r : records) {
    EXPECT_TRUE(r.ok()) << r.error;
    EXPECT_EQ(r.unlabeled, 900u - 230u);
    EXPECT_TRUE(std::isnan(r.true_risk));
  }
}

TEST(Outputs, EmitWritesAllFiles) {
  const fs::path dir = scratch("emit");
  const ExperimentData data(quick_config());
  const auto records = run_experiment(data);
  emit_results(dir, data, records, RunMetadata{"run", {"riskcal", "run"}});
  for (const char* f : {"records.csv", "summary.json", "config.json", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto back = load_records((dir / "records.csv").string());
  ASSERT_EQ(back.size(), records.size());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_TRUE(same_record(back[i], records[i]));

  // the written config replays the same records
  const ExperimentConfig replayed = load_config((dir / "config.json").string());
  const auto again = run_experiment(ExperimentData(replayed));
  for (std::size_t i = 0; i < again.size(); ++i) EXPECT_TRUE(same_record(again[i], records[i]));

  std::ifstream m(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(m);
  EXPECT_EQ(manifest["master_seed"], 42);
  EXPECT_EQ(manifest["records"], records.size());

  // a regular file where the directory should go
  const fs::path blocker = scratch("blocker");
  std::ofstream(blocker) << "x";
  EXPECT_THROW(emit_results(blocker / "sub", data, records, RunMetadata{"run", {}}), IoError);
  EXPECT_THROW(emit_results(dir, data, {}, RunMetadata{"run", {}}), InvalidInput);
}

TEST(ModelCache, HitSkipsTraining) {
  const fs::path dir = scratch("cache");
  int calls = 0;
  RegressorTrainer counting = [&](const LabeledDataset& d, std::uint64_t seed) {
    ++calls;
    return elm_trainer(ElmOptions{16, 1e-2})(d, seed);
  };
  const RegressorTrainer cached = cached_trainer(counting, dir.string(), "elm16");
  const LabeledDataset train = SyntheticTask().sample(40, 1);
  const RegressorPtr a = cached(train, 5);
  const RegressorPtr b = cached(train, 5);
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(a->predict(train.features()), b->predict(train.features()));
  cached(train, 6);
  EXPECT_EQ(calls, 2);
}
