#pragma once

// Experiment configuration and the command implementations behind the
// `uqseq` tool: prepare, train, evaluate, calibrate, plot, permtest.
//
// Output directory layout:
//   <out>/config.json                      resolved configuration
//   <out>/data/{train,dev,dev2,test}.jsonl standardized splits
//   <out>/data/meta.json                   statistics, features, window
//   <out>/<variant>/model.json             checkpoint
//   <out>/<variant>/train_log.json
//   <out>/<variant>/predictions_<split>.jsonl
//   <out>/<variant>/report.json, report.csv
//   <out>/<variant>/calibration.json

#include "uqseq/calibration.hpp"
#include "uqseq/core.hpp"
#include "uqseq/data.hpp"
#include "uqseq/garch.hpp"
#include "uqseq/metrics.hpp"
#include "uqseq/models.hpp"
#include "uqseq/svg.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace uqseq {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- configuration

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | mitv
  std::string csv;                 // raw MITV table
  std::array<std::size_t, 4> sizes = mitv::kPartitionSizes;
  WindowSpec window;
  std::size_t synthetic_train = 2000;
  SyntheticProfile profile;

  bool contiguous() const { return kind == "mitv"; }
};

struct GarchConfig {
  bool enabled = false;
  int p = 5;
  int q = 5;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  std::string variant = "jms";
  nlohmann::json architecture = nlohmann::json::object();  // overrides of ArchitectureConfig
  std::vector<double> targets{kDefaultMissrateTargets.begin(), kDefaultMissrateTargets.end()};
  std::string calibration_split = "dev2";
  bool drift = false;
  int permutation_resamples = 10000;
  GarchConfig garch;
  std::uint64_t seed = 0;
  std::string out = "out";
  bool quiet = false;
};

inline std::string to_string(NoiseKind k) { return k == NoiseKind::gaussian ? "gaussian" : "one_sided"; }

inline NoiseKind parse_noise(const std::string& s) {
  if (s == "gaussian") return NoiseKind::gaussian;
  if (s == "one_sided") return NoiseKind::one_sided;
  fail(ErrorCode::InvalidArgument, "unknown noise kind '" + s + "'");
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  const auto& p = d.profile;
  return {{"dataset",
           {{"kind", d.kind},
            {"csv", d.csv},
            {"sizes", d.sizes},
            {"window",
             {{"length", d.window.length},
              {"step", d.window.step},
              {"observed", d.window.observed},
              {"forecast", d.window.forecast}}},
            {"synthetic",
             {{"train", d.synthetic_train},
              {"horizon", p.horizon},
              {"dev", p.dev},
              {"dev2", p.dev2},
              {"test", p.test},
              {"sigma_min", p.sigma_min},
              {"sigma_max", p.sigma_max},
              {"noise", to_string(p.noise)},
              {"burst_probability", p.burst_probability},
              {"burst_scale", p.burst_scale},
              {"jitter", p.jitter}}}}},
          {"variant", c.variant},
          {"architecture", c.architecture},
          {"calibration", {{"targets", c.targets}, {"split", c.calibration_split}}},
          {"evaluation", {{"drift", c.drift}, {"permutation_resamples", c.permutation_resamples}}},
          {"garch", {{"enabled", c.garch.enabled}, {"p", c.garch.p}, {"q", c.garch.q}}},
          {"seed", c.seed},
          {"out", c.out}};
}

/// Explicit defaulting: every absent key keeps its default value.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.dataset.kind = d.value("kind", c.dataset.kind);
    c.dataset.csv = d.value("csv", c.dataset.csv);
    if (d.contains("sizes")) c.dataset.sizes = d.at("sizes").get<std::array<std::size_t, 4>>();
    if (d.contains("window")) {
      const auto& w = d.at("window");
      c.dataset.window.length = w.value("length", c.dataset.window.length);
      c.dataset.window.step = w.value("step", c.dataset.window.step);
      c.dataset.window.observed = w.value("observed", c.dataset.window.observed);
      c.dataset.window.forecast = w.value("forecast", c.dataset.window.forecast);
    }
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      auto& p = c.dataset.profile;
      c.dataset.synthetic_train = s.value("train", c.dataset.synthetic_train);
      p.horizon = s.value("horizon", p.horizon);
      p.dev = s.value("dev", p.dev);
      p.dev2 = s.value("dev2", p.dev2);
      p.test = s.value("test", p.test);
      p.sigma_min = s.value("sigma_min", p.sigma_min);
      p.sigma_max = s.value("sigma_max", p.sigma_max);
      p.noise = parse_noise(s.value("noise", to_string(p.noise)));
      p.burst_probability = s.value("burst_probability", p.burst_probability);
      p.burst_scale = s.value("burst_scale", p.burst_scale);
      p.jitter = s.value("jitter", p.jitter);
    }
  }
  c.variant = j.value("variant", c.variant);
  if (j.contains("architecture")) c.architecture = j.at("architecture");
  if (j.contains("calibration")) {
    c.targets = j.at("calibration").value("targets", c.targets);
    c.calibration_split = j.at("calibration").value("split", c.calibration_split);
  }
  if (j.contains("evaluation")) {
    c.drift = j.at("evaluation").value("drift", c.drift);
    c.permutation_resamples = j.at("evaluation").value("permutation_resamples", c.permutation_resamples);
  }
  if (j.contains("garch")) {
    c.garch.enabled = j.at("garch").value("enabled", c.garch.enabled);
    c.garch.p = j.at("garch").value("p", c.garch.p);
    c.garch.q = j.at("garch").value("q", c.garch.q);
  }
  c.seed = j.value("seed", c.seed);
  c.out = j.value("out", c.out);
  if (c.dataset.kind != "synthetic" && c.dataset.kind != "mitv") {
    fail(ErrorCode::InvalidArgument, "dataset.kind must be 'synthetic' or 'mitv'");
  }
  if (c.calibration_split != "dev2" && c.calibration_split != "dev") {
    fail(ErrorCode::InvalidArgument, "calibration.split must be 'dev2' or 'dev'");
  }
  for (double t : c.targets) {
    if (!(t > 0.0 && t < 1.0)) fail(ErrorCode::InvalidArgument, "missrate targets must lie in (0, 1)");
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::Io, "cannot open config " + path);
  try {
    return experiment_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, "config " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------- files

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::Io, "cannot write " + path.string());
  os << text;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// Exclusive ownership of an output directory for one process.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) fail(ErrorCode::Io, "output directory " + dir.string() + " is locked (" + path_.string() + ")");
    std::fclose(f);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

struct PreparedData {
  SplitDataset data;
  std::vector<FeatureSpec> features;
  std::string kind;
  WindowSpec window;
};

inline fs::path data_dir(const ExperimentConfig& c) { return fs::path(c.out) / "data"; }
inline fs::path variant_dir(const ExperimentConfig& c) { return fs::path(c.out) / c.variant; }

inline void write_prepared(const fs::path& dir, const PreparedData& p) {
  const std::pair<const char*, const std::vector<SequenceSample>*> splits[] = {
      {"train", &p.data.train}, {"dev", &p.data.dev}, {"dev2", &p.data.dev2}, {"test", &p.data.test}};
  for (const auto& [name, samples] : splits) {
    std::ostringstream os;
    write_samples_jsonl(os, *samples);
    write_text(dir / (std::string(name) + ".jsonl"), os.str());
  }
  auto features = nlohmann::json::array();
  for (const auto& f : p.features) features.push_back(to_json(f));
  write_json(dir / "meta.json", {{"kind", p.kind},
                                 {"features", features},
                                 {"input_stats", to_json(p.data.input_stats)},
                                 {"output_stats", to_json(p.data.output_stats)},
                                 {"window",
                                  {{"length", p.window.length},
                                   {"step", p.window.step},
                                   {"observed", p.window.observed},
                                   {"forecast", p.window.forecast}}},
                                 {"counts",
                                  {{"train", p.data.train.size()},
                                   {"dev", p.data.dev.size()},
                                   {"dev2", p.data.dev2.size()},
                                   {"test", p.data.test.size()}}}});
}

inline PreparedData read_prepared(const fs::path& dir) {
  if (!fs::exists(dir / "meta.json")) {
    fail(ErrorCode::Io, "no prepared dataset in " + dir.string() + " (run 'prepare' first)");
  }
  const auto meta = nlohmann::json::parse(read_text(dir / "meta.json"));
  PreparedData p;
  p.kind = meta.at("kind").get<std::string>();
  for (const auto& f : meta.at("features")) p.features.push_back(feature_from_json(f));
  p.data.input_stats = standardization_from_json(meta.at("input_stats"));
  p.data.output_stats = standardization_from_json(meta.at("output_stats"));
  const auto& w = meta.at("window");
  p.window = {w.at("length").get<int>(), w.at("step").get<int>(), w.at("observed").get<int>(),
              w.at("forecast").get<int>()};
  auto read = [&](const char* name) {
    std::istringstream is(read_text(dir / (std::string(name) + ".jsonl")));
    return read_samples_jsonl(is);
  };
  p.data.train = read("train");
  p.data.dev = read("dev");
  p.data.dev2 = read("dev2");
  p.data.test = read("test");
  return p;
}

inline ArchitectureConfig architecture_for(const ExperimentConfig& c, const PreparedData& p) {
  ArchitectureConfig a;
  a.features = p.features;
  a.output_dim = static_cast<int>(p.data.output_stats.size());
  return architecture_from_json(c.architecture, a);
}

// ---------------------------------------------------------------- commands

inline std::ostream& log_stream(const ExperimentConfig& c) {
  static std::ostringstream sink;
  return c.quiet ? sink : std::cerr;
}

/// Standardized splits and statistics written under <out>/data.
inline PreparedData cmd_prepare(const ExperimentConfig& c) {
  DirectoryLock lock(c.out);
  PreparedData p;
  p.kind = c.dataset.kind;
  p.window = c.dataset.window;
  if (c.dataset.kind == "mitv") {
    if (c.dataset.csv.empty()) fail(ErrorCode::Io, "dataset.csv is required for kind 'mitv'");
    if (!fs::exists(c.dataset.csv)) fail(ErrorCode::Io, "input file " + c.dataset.csv + " does not exist");
    const auto table = load_table(c.dataset.csv, mitv::table_spec());
    p.data = prepare_windowed(table, c.dataset.sizes, c.dataset.window, &p.features);
  } else {
    auto s = synth_heteroskedastic(c.dataset.synthetic_train, c.seed, c.dataset.profile);
    p.data = std::move(s.data);
    p.features = {FeatureSpec::real("u"), FeatureSpec::real("v"), FeatureSpec::real("tau")};
    p.window = {c.dataset.profile.horizon, 1, 0, c.dataset.profile.horizon};
  }
  write_prepared(data_dir(c), p);
  write_json(fs::path(c.out) / "config.json", to_json(c));
  log_stream(c) << "prepared " << p.data.train.size() << "/" << p.data.dev.size() << "/" << p.data.dev2.size() << "/"
                << p.data.test.size() << " sequences in " << data_dir(c).string() << '\n';
  return p;
}

inline fs::path default_checkpoint(const ExperimentConfig& c) { return variant_dir(c) / "model.json"; }

inline TrainedModel cmd_train(const ExperimentConfig& c, std::optional<std::string> checkpoint = std::nullopt) {
  const auto variant = parse_variant(c.variant);
  const auto prepared = read_prepared(data_dir(c));
  DirectoryLock lock(c.out);
  const auto arch = architecture_for(c, prepared);
  auto model = train_variant(variant, prepared.data, arch, c.seed, c.quiet ? nullptr : &std::cerr);
  const fs::path path = checkpoint ? fs::path(*checkpoint) : default_checkpoint(c);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_model(model, path.string());
  auto log = nlohmann::json::array();
  for (const auto& e : model.log) log.push_back(to_json(e));
  write_json(variant_dir(c) / "train_log.json", log);
  write_json(variant_dir(c) / "config.json", to_json(c));
  log_stream(c) << "trained " << c.variant << " (" << model.params.parameter_count() << " parameters, "
                << model.log.size() << " epochs) -> " << path.string() << '\n';
  return model;
}

struct PredictionSet {
  std::vector<BoundedPrediction> predictions;
  std::vector<Matrix> observations;
};

inline PredictionSet predict_split(const TrainedModel& model, const std::vector<SequenceSample>& samples,
                                   std::uint64_t seed, std::optional<int> observed = std::nullopt) {
  auto opt = default_predict_options(model, seed);
  opt.observed_steps = observed;
  return {predict_all(model, samples, opt), observations(model, samples)};
}

inline void write_prediction_file(const fs::path& path, const PredictionSet& s) {
  std::ostringstream os;
  write_predictions_jsonl(os, s.predictions, s.observations);
  write_text(path, os.str());
}

inline PredictionSet read_prediction_file(const fs::path& path) {
  std::istringstream is(read_text(path));
  auto r = read_predictions_jsonl(is);
  return {std::move(r.predictions), std::move(r.observations)};
}

/// One evaluation stream: pooled prediction and observation plus the length
/// of the blocks used as permutation-test units.
struct EvaluationStream {
  BoundedPrediction prediction;
  Matrix observation;
  Index block = 1;
};

inline EvaluationStream make_stream(const PredictionSet& s, const PreparedData& meta) {
  if (s.predictions.empty()) fail(ErrorCode::EmptyRange, "no predictions to evaluate");
  EvaluationStream e;
  if (meta.kind == "mitv") {
    e.prediction = recombine(s.predictions, meta.window);
    e.observation = recombine(s.observations, meta.window);
    e.block = meta.window.forecast;
  } else {
    e.prediction = concat_predictions(s.predictions);
    e.observation = concat_columns(s.observations);
    e.block = s.predictions.front().cols();
  }
  return e;
}

/// Per-block Excess-Deficit costs at a given band scale.
inline std::vector<double> block_costs(const EvaluationStream& e, double scale) {
  std::vector<double> out;
  const auto scaled = apply_scale(e.prediction, CalibrationScale{{}, scale, ""});
  for (Index start = 0; start + e.block <= e.observation.cols(); start += e.block) {
    const BoundedPrediction part{scaled.yhat.middleCols(start, e.block), scaled.z_lower.middleCols(start, e.block),
                                 scaled.z_upper.middleCols(start, e.block)};
    out.push_back(core_metrics(part, e.observation.middleCols(start, e.block)).cost());
  }
  return out;
}

struct SystemEvaluation {
  std::string system;
  std::string condition;
  double e_base = 0.0;
  OperatingPointTable oracle_system, oracle_reference;
  OperatingPointTable xval_system, xval_reference;
  GainSummary oracle_gain, xval_gain;
  double permutation_p = 1.0;

  nlohmann::json to_json() const {
    return {{"system", system},
            {"condition", condition},
            {"e_base", e_base},
            {"oracle", {{"system", oracle_system.to_json()},
                        {"reference", oracle_reference.to_json()},
                        {"gains", oracle_gain.to_json()}}},
            {"xval", {{"system", xval_system.to_json()},
                      {"reference", xval_reference.to_json()},
                      {"gains", xval_gain.to_json()}}},
            {"permutation_vs_constant", {{"p_value", permutation_p}}}};
  }
};

/// G* uses scales found on the evaluated stream itself; G^xval uses scales
/// found on the calibration stream. The reference is a unit band around
/// the same base predictions.
inline SystemEvaluation evaluate_streams(const std::string& system, const std::string& condition,
                                         const EvaluationStream& eval, const EvaluationStream& calib,
                                         std::span<const double> targets, int resamples, std::uint64_t seed) {
  SystemEvaluation r;
  r.system = system;
  r.condition = condition;
  r.e_base = base_error(eval.prediction.yhat, eval.observation);
  const auto ref_eval = constant_band(eval.prediction);
  const auto ref_calib = constant_band(calib.prediction);
  r.oracle_system = operating_point_table(eval.observation, eval.prediction, eval.observation, eval.prediction, targets);
  r.oracle_reference = operating_point_table(eval.observation, ref_eval, eval.observation, ref_eval, targets);
  r.xval_system = operating_point_table(eval.observation, eval.prediction, calib.observation, calib.prediction, targets);
  r.xval_reference = operating_point_table(eval.observation, ref_eval, calib.observation, ref_calib, targets);
  r.oracle_gain = compare_tables(r.oracle_system, r.oracle_reference);
  r.xval_gain = compare_tables(r.xval_system, r.xval_reference);
  if (resamples > 0 && !r.xval_system.points.empty()) {
    const auto a = block_costs(EvaluationStream{eval.prediction, eval.observation, eval.block},
                               r.xval_system.points.front().scale);
    const auto b = block_costs(EvaluationStream{ref_eval, eval.observation, eval.block},
                               r.xval_reference.points.front().scale);
    r.permutation_p = paired_permutation_test(a, b, resamples, seed);
  }
  return r;
}

inline const char* kReportCsvHeader =
    "condition,system,e_base,ed_gain_star,ed_gain_xval,bw_gain_star,bw_gain_xval,min_cost_gain,permutation_p";

inline std::string report_csv_row(const SystemEvaluation& e) {
  std::ostringstream os;
  os.precision(10);
  os << e.condition << ',' << e.system << ',' << e.e_base << ',' << e.oracle_gain.excess_deficit_average() << ','
     << e.xval_gain.excess_deficit_average() << ',' << e.oracle_gain.bandwidth_average() << ','
     << e.xval_gain.bandwidth_average() << ',' << e.oracle_gain.min_cost_gain << ',' << e.permutation_p;
  return os.str();
}

/// Unit residual-variance bands from GARCH fitted on the calibration stream,
/// forecasting each block from all residuals observed before it.
inline EvaluationStream garch_stream(const GarchFit& fit, const EvaluationStream& base,
                                     std::span<const double> history) {
  EvaluationStream g = base;
  const Index n = base.observation.cols();
  std::vector<double> resid(history.begin(), history.end());
  for (Index start = 0; start < n; start += base.block) {
    const Index len = std::min(base.block, n - start);
    const Vector z = garch_band(fit, resid, static_cast<std::size_t>(len));
    g.prediction.z_lower.block(0, start, 1, len) = z.transpose();
    g.prediction.z_upper.block(0, start, 1, len) = z.transpose();
    for (Index t = start; t < start + len; ++t) resid.push_back(base.prediction.yhat(0, t) - base.observation(0, t));
  }
  return g;
}

struct EvaluationReport {
  std::vector<SystemEvaluation> systems;

  nlohmann::json to_json() const {
    auto a = nlohmann::json::array();
    for (const auto& s : systems) a.push_back(s.to_json());
    return {{"evaluations", a}};
  }

  std::string to_csv() const {
    std::string out = std::string(kReportCsvHeader) + "\n";
    for (const auto& s : systems) out += report_csv_row(s) + "\n";
    return out;
  }
};

/// Report computed from saved prediction files only.
inline EvaluationReport evaluate_prediction_files(const ExperimentConfig& c, const PreparedData& meta,
                                                  const fs::path& dir) {
  const auto calib = make_stream(read_prediction_file(dir / ("predictions_" + c.calibration_split + ".jsonl")), meta);
  EvaluationReport report;
  std::vector<std::string> conditions{"test"};
  if (c.drift) conditions.push_back("test_drift");
  for (const auto& cond : conditions) {
    const auto eval = make_stream(read_prediction_file(dir / ("predictions_" + cond + ".jsonl")), meta);
    report.systems.push_back(
        evaluate_streams(c.variant, cond, eval, calib, c.targets, c.permutation_resamples, c.seed));
    if (c.garch.enabled && meta.kind == "mitv" && eval.observation.rows() == 1) {
      const Vector r = (calib.prediction.yhat - calib.observation).row(0).transpose();
      const std::span<const double> rs(r.data(), static_cast<std::size_t>(r.size()));
      const auto fit = fit_mle(rs, c.garch.p, c.garch.q, {5, c.seed, {}});
      const Index warm = std::min<Index>(static_cast<Index>(10 * (c.garch.p + c.garch.q + 1)), r.size());
      const auto g_calib = garch_stream(fit, calib, rs.first(static_cast<std::size_t>(warm)));
      const auto g_eval = garch_stream(fit, eval, rs);
      report.systems.push_back(
          evaluate_streams("garch", cond, g_eval, g_calib, c.targets, c.permutation_resamples, c.seed));
    }
  }
  return report;
}

inline EvaluationReport cmd_evaluate(const ExperimentConfig& c, std::optional<std::string> checkpoint = std::nullopt) {
  const auto prepared = read_prepared(data_dir(c));
  const auto model = load_model(checkpoint ? *checkpoint : default_checkpoint(c).string());
  if (to_string(model.variant) != c.variant) {
    fail(ErrorCode::ConfigMismatch, "checkpoint holds variant '" + to_string(model.variant) + "', config says '" +
                                        c.variant + "'");
  }
  DirectoryLock lock(c.out);
  const auto dir = variant_dir(c);
  const auto& calib_split = c.calibration_split == "dev" ? prepared.data.dev : prepared.data.dev2;
  write_prediction_file(dir / ("predictions_" + c.calibration_split + ".jsonl"),
                        predict_split(model, calib_split, c.seed));
  write_prediction_file(dir / "predictions_test.jsonl", predict_split(model, prepared.data.test, c.seed));
  if (c.drift) {
    write_prediction_file(dir / "predictions_test_drift.jsonl", predict_split(model, prepared.data.test, c.seed, 0));
  }
  auto report = evaluate_prediction_files(c, prepared, dir);
  write_json(dir / "report.json", report.to_json());
  write_text(dir / "report.csv", report.to_csv());
  for (const auto& s : report.systems) log_stream(c) << report_csv_row(s) << '\n';
  return report;
}

/// Calibration scales on the calibration split: one global scale per missrate
/// target (candidate search) and per-dimension quantile scales.
inline nlohmann::json cmd_calibrate(const ExperimentConfig& c, std::optional<std::string> checkpoint = std::nullopt) {
  const auto prepared = read_prepared(data_dir(c));
  const auto model = load_model(checkpoint ? *checkpoint : default_checkpoint(c).string());
  DirectoryLock lock(c.out);
  const auto& split = c.calibration_split == "dev" ? prepared.data.dev : prepared.data.dev2;
  const auto stream = make_stream(predict_split(model, split, c.seed), prepared);
  nlohmann::json out{{"system", c.variant}, {"split", c.calibration_split}, {"scales", nlohmann::json::array()}};
  for (double target : c.targets) {
    const auto s = find_scale_for_metric(stream.observation, stream.prediction, MetricKind::missrate, target);
    nlohmann::json entry{{"target_missrate", target}, {"global", s.to_json()}};
    if (stream.prediction.is_symmetric()) {
      const auto z = z_scores(stream.observation, stream.prediction);
      entry["quantile"] = quantile_scale(z, 1.0 - target).to_json();
    }
    out["scales"].push_back(entry);
  }
  write_json(variant_dir(c) / "calibration.json", out);
  return out;
}

/// SVG files for every output dimension over columns [begin, end) of the
/// pooled prediction file.
inline std::vector<fs::path> cmd_plot(const fs::path& predictions, const fs::path& out_dir, Index begin, Index end,
                                      const std::string& title = "") {
  const auto set = read_prediction_file(predictions);
  if (set.predictions.empty()) fail(ErrorCode::EmptyRange, "prediction file is empty");
  const auto p = concat_predictions(set.predictions);
  const auto y = concat_columns(set.observations);
  std::vector<fs::path> written;
  for (Index d = 0; d < y.rows(); ++d) {
    PlotOptions opt;
    opt.title = title.empty() ? predictions.stem().string() + " dim " + std::to_string(d) : title;
    const auto svg = render_band_plot(p, y, d, begin, end, opt);
    const auto path = out_dir / (predictions.stem().string() + "_d" + std::to_string(d) + ".svg");
    write_text(path, svg);
    written.push_back(path);
  }
  return written;
}

struct PermutationSummary {
  double p_value = 1.0;
  double mean_a = 0.0;
  double mean_b = 0.0;
  std::size_t blocks = 0;

  nlohmann::json to_json() const {
    return {{"p_value", p_value}, {"mean_cost_a", mean_a}, {"mean_cost_b", mean_b}, {"blocks", blocks}};
  }
};

/// Paired test on per-sequence costs of two systems, each at the scale that
/// puts its own pooled missrate closest to `target`.
inline PermutationSummary cmd_permtest(const fs::path& a, const fs::path& b, double target, int resamples,
                                       std::uint64_t seed) {
  const auto sa = read_prediction_file(a);
  const auto sb = read_prediction_file(b);
  if (sa.predictions.size() != sb.predictions.size()) fail(ErrorCode::LengthMismatch, "files differ in length");
  for (std::size_t i = 0; i < sa.observations.size(); ++i) {
    if (!seqnet::bitwise_equal(sa.observations[i], sb.observations[i])) {
      fail(ErrorCode::ConfigMismatch, "files hold different observations");
    }
  }
  auto stream = [](const PredictionSet& s) {
    return EvaluationStream{concat_predictions(s.predictions), concat_columns(s.observations),
                            s.predictions.front().cols()};
  };
  const auto ea = stream(sa);
  const auto eb = stream(sb);
  const auto scale_a = find_scale_for_metric(ea.observation, ea.prediction, MetricKind::missrate, target).global_scale;
  const auto scale_b = find_scale_for_metric(eb.observation, eb.prediction, MetricKind::missrate, target).global_scale;
  const auto ca = block_costs(ea, scale_a);
  const auto cb = block_costs(eb, scale_b);
  PermutationSummary s;
  s.blocks = ca.size();
  for (std::size_t i = 0; i < ca.size(); ++i) {
    s.mean_a += ca[i] / static_cast<double>(ca.size());
    s.mean_b += cb[i] / static_cast<double>(cb.size());
  }
  s.p_value = paired_permutation_test(ca, cb, resamples, seed);
  return s;
}

// ---------------------------------------------------------------- exit codes

/// 1 usage, 2 data, 3 numerical.
inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::UnknownVariant:
    case ErrorCode::ConfigMismatch:
    case ErrorCode::BetaOutOfRange:
    case ErrorCode::RateOutOfRange:
    case ErrorCode::RunsForNonDropoutVariant: return 1;
    case ErrorCode::NonConvergence:
    case ErrorCode::NonFiniteValue:
    case ErrorCode::ZeroStd:
    case ErrorCode::ZeroNormRow:
    case ErrorCode::NonPositiveReference:
    case ErrorCode::AllZeroBands: return 3;
    default: return 2;
  }
}

}  // namespace uqseq
