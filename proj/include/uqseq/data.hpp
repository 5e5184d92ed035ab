#pragma once

// Dataset ingestion and preparation: CSV tables with derived calendar
// features, chronological partitioning, train-only standardization,
// sliding windows, recombination of windowed predictions, JSON-lines dataset
// files, and a synthetic heteroskedastic generator with known ground truth.

#include "uqseq/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace uqseq {

// ---------------------------------------------------------------- features

enum class FeatureKind { real, categorical };

/// One model input column after parsing.
struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::real;
  int cardinality = 0;  // categorical only
  int embed_dim = 0;    // categorical only

  static FeatureSpec real(std::string name) { return {std::move(name), FeatureKind::real, 0, 0}; }
  static FeatureSpec categorical(std::string name, int cardinality, int embed_dim) {
    return {std::move(name), FeatureKind::categorical, cardinality, embed_dim};
  }

  bool is_categorical() const { return kind == FeatureKind::categorical; }
  int final_dim() const { return is_categorical() ? embed_dim : 1; }
};

inline int total_input_dim(std::span<const FeatureSpec> features) {
  int n = 0;
  for (const auto& f : features) n += f.final_dim();
  return n;
}

inline nlohmann::json to_json(const FeatureSpec& f) {
  return {{"name", f.name},
          {"kind", f.is_categorical() ? "categorical" : "real"},
          {"cardinality", f.cardinality},
          {"embed_dim", f.embed_dim}};
}

inline FeatureSpec feature_from_json(const nlohmann::json& j) {
  FeatureSpec f;
  f.name = j.at("name").get<std::string>();
  f.kind = j.at("kind").get<std::string>() == "categorical" ? FeatureKind::categorical : FeatureKind::real;
  f.cardinality = j.value("cardinality", 0);
  f.embed_dim = j.value("embed_dim", 0);
  return f;
}

/// How one raw CSV column maps onto model features.
struct ColumnSpec {
  enum class Kind { real, code, vocabulary, timestamp };
  std::string source;  // CSV header name
  Kind kind = Kind::real;
  std::string name;    // feature name (unused for timestamp)
  std::vector<std::string> vocabulary;
  int cardinality = 0;
  int embed_dim = 0;
};

struct TableSpec {
  std::vector<ColumnSpec> inputs;
  std::vector<std::string> outputs;
};

namespace mitv {

inline const std::vector<std::string>& weather_vocabulary() {
  static const std::vector<std::string> v{"Clear", "Clouds", "Drizzle", "Fog",   "Haze",        "Mist",
                                          "Rain",  "Smoke",  "Snow",    "Squall", "Thunderstorm"};
  return v;
}

inline const std::vector<std::string>& holiday_vocabulary() {
  static const std::vector<std::string> v{"None",
                                          "Christmas Day",
                                          "Columbus Day",
                                          "Independence Day",
                                          "Labor Day",
                                          "Martin Luther King Jr Day",
                                          "Memorial Day",
                                          "New Years Day",
                                          "State Fair",
                                          "Thanksgiving Day",
                                          "Veterans Day",
                                          "Washingtons Birthday"};
  return v;
}

/// Raw UCI traffic CSV -> the ten model features (20 final dims) and one output.
inline TableSpec table_spec() {
  using K = ColumnSpec::Kind;
  TableSpec s;
  s.inputs = {
      {"date_time", K::timestamp, "", {}, 0, 0},
      {"weather_main", K::vocabulary, "weather_type", weather_vocabulary(), 11, 3},
      {"holiday", K::vocabulary, "holiday_type", holiday_vocabulary(), 12, 3},
      {"temp", K::real, "temperature", {}, 0, 0},
      {"rain_1h", K::real, "rain_1h", {}, 0, 0},
      {"snow_1h", K::real, "snow_1h", {}, 0, 0},
      {"clouds_all", K::real, "clouds_all", {}, 0, 0},
  };
  s.outputs = {"traffic_volume"};
  return s;
}

/// Model-side feature list in table order.
inline std::vector<FeatureSpec> feature_specs() {
  return {FeatureSpec::categorical("day_of_month", 31, 3), FeatureSpec::categorical("day_of_week", 7, 3),
          FeatureSpec::categorical("month", 12, 3),        FeatureSpec::real("frac_yday"),
          FeatureSpec::categorical("weather_type", 11, 3), FeatureSpec::categorical("holiday_type", 12, 3),
          FeatureSpec::real("temperature"),                FeatureSpec::real("rain_1h"),
          FeatureSpec::real("snow_1h"),                    FeatureSpec::real("clouds_all")};
}

inline constexpr std::array<std::size_t, 4> kPartitionSizes{33744, 4820, 4820, 4820};

}  // namespace mitv

// ---------------------------------------------------------------- calendar

struct CalendarFeatures {
  int day_of_month = 0;  // 0-based
  int day_of_week = 0;   // Monday = 0
  int month = 0;         // January = 0
  double frac_yday = 0;  // day of year / 365, capped at 1
};

/// Parses "YYYY-MM-DD[ HH:MM[:SS]]" (a 'T' separator is also accepted).
inline CalendarFeatures parse_timestamp(const std::string& text) {
  int y = 0;
  unsigned mo = 0;
  unsigned d = 0;
  char dash1 = 0;
  char dash2 = 0;
  std::istringstream is(text);
  is >> y >> dash1 >> mo >> dash2 >> d;
  if (!is || dash1 != '-' || dash2 != '-') fail(ErrorCode::UnparseableRow, "bad timestamp '" + text + "'");
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{mo}, day{d}};
  if (!ymd.ok()) fail(ErrorCode::UnparseableRow, "invalid date '" + text + "'");
  const sys_days days{ymd};
  const weekday wd{days};
  const auto yday = (days - sys_days{year{y} / January / 1}).count() + 1;
  CalendarFeatures c;
  c.day_of_month = static_cast<int>(d) - 1;
  c.day_of_week = static_cast<int>((wd.c_encoding() + 6) % 7);
  c.month = static_cast<int>(mo) - 1;
  c.frac_yday = std::min(static_cast<double>(yday), 365.0) / 365.0;
  return c;
}

// ---------------------------------------------------------------- CSV

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

/// Parsed table: T x F inputs and D x T outputs in row order of the file.
struct RawTable {
  std::vector<FeatureSpec> features;
  Matrix inputs;   // T x F
  Matrix outputs;  // D x T
  std::vector<std::string> output_names;

  Index rows() const { return inputs.rows(); }
};

inline double parse_real(const std::string& cell, std::size_t row, const std::string& column) {
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size() || !std::isfinite(v)) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::UnparseableRow, "row " + std::to_string(row) + ", column " + column + ": '" + cell + "'");
  }
}

inline RawTable load_table(std::istream& in, const TableSpec& spec) {
  std::string line;
  if (!std::getline(in, line) || line.empty()) fail(ErrorCode::MissingColumn, "no header line");
  const auto header = split_csv_line(line);
  auto column_of = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) fail(ErrorCode::MissingColumn, "column '" + name + "' not in header");
    return static_cast<std::size_t>(it - header.begin());
  };

  RawTable table;
  std::vector<std::size_t> in_cols;
  for (const auto& c : spec.inputs) {
    in_cols.push_back(column_of(c.source));
    switch (c.kind) {
      case ColumnSpec::Kind::timestamp: {
        table.features.push_back(FeatureSpec::categorical("day_of_month", 31, 3));
        table.features.push_back(FeatureSpec::categorical("day_of_week", 7, 3));
        table.features.push_back(FeatureSpec::categorical("month", 12, 3));
        table.features.push_back(FeatureSpec::real("frac_yday"));
        break;
      }
      case ColumnSpec::Kind::real: table.features.push_back(FeatureSpec::real(c.name)); break;
      case ColumnSpec::Kind::code:
      case ColumnSpec::Kind::vocabulary:
        table.features.push_back(FeatureSpec::categorical(c.name, c.cardinality, c.embed_dim));
        break;
    }
  }
  std::vector<std::size_t> out_cols;
  for (const auto& o : spec.outputs) out_cols.push_back(column_of(o));
  table.output_names = spec.outputs;

  std::vector<std::vector<double>> in_rows;
  std::vector<std::vector<double>> out_rows;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      fail(ErrorCode::UnparseableRow, "row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                                          " cells, header has " + std::to_string(header.size()));
    }
    std::vector<double> x;
    for (std::size_t k = 0; k < spec.inputs.size(); ++k) {
      const auto& c = spec.inputs[k];
      const auto& cell = cells[in_cols[k]];
      switch (c.kind) {
        case ColumnSpec::Kind::timestamp: {
          const auto cal = parse_timestamp(cell);
          x.insert(x.end(), {static_cast<double>(cal.day_of_month), static_cast<double>(cal.day_of_week),
                             static_cast<double>(cal.month), cal.frac_yday});
          break;
        }
        case ColumnSpec::Kind::real: x.push_back(parse_real(cell, row, c.source)); break;
        case ColumnSpec::Kind::code: {
          const double v = parse_real(cell, row, c.source);
          if (v < 0 || v >= c.cardinality || v != std::floor(v)) {
            fail(ErrorCode::UnparseableRow, "row " + std::to_string(row) + ": code out of range in " + c.source);
          }
          x.push_back(v);
          break;
        }
        case ColumnSpec::Kind::vocabulary: {
          const auto it = std::find(c.vocabulary.begin(), c.vocabulary.end(), cell);
          if (it == c.vocabulary.end()) {
            fail(ErrorCode::UnparseableRow,
                 "row " + std::to_string(row) + ": unknown " + c.source + " value '" + cell + "'");
          }
          x.push_back(static_cast<double>(it - c.vocabulary.begin()));
          break;
        }
      }
    }
    std::vector<double> y;
    for (std::size_t k = 0; k < out_cols.size(); ++k) y.push_back(parse_real(cells[out_cols[k]], row, spec.outputs[k]));
    in_rows.push_back(std::move(x));
    out_rows.push_back(std::move(y));
  }

  const auto T = static_cast<Index>(in_rows.size());
  table.inputs.resize(T, static_cast<Index>(table.features.size()));
  table.outputs.resize(static_cast<Index>(out_cols.size()), T);
  for (Index t = 0; t < T; ++t) {
    for (Index f = 0; f < table.inputs.cols(); ++f) table.inputs(t, f) = in_rows[static_cast<std::size_t>(t)][f];
    for (Index d = 0; d < table.outputs.rows(); ++d) table.outputs(d, t) = out_rows[static_cast<std::size_t>(t)][d];
  }
  return table;
}

inline RawTable load_table(const std::string& path, const TableSpec& spec) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  return load_table(in, spec);
}

// ---------------------------------------------------------------- partitioning

struct TablePartition {
  RawTable train;
  RawTable dev;
  RawTable dev2;
  RawTable test;
};

inline RawTable slice_rows(const RawTable& t, Index begin, Index count) {
  RawTable out;
  out.features = t.features;
  out.output_names = t.output_names;
  out.inputs = t.inputs.middleRows(begin, count);
  out.outputs = t.outputs.middleCols(begin, count);
  return out;
}

/// Contiguous chronological splits in TRAIN, DEV, DEV2, TEST order.
inline TablePartition partition(const RawTable& table, std::span<const std::size_t, 4> sizes) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  if (total > static_cast<std::size_t>(table.rows())) {
    fail(ErrorCode::SizesExceedTotal,
         "partition sizes sum to " + std::to_string(total) + " > " + std::to_string(table.rows()) + " rows");
  }
  TablePartition p;
  Index at = 0;
  RawTable* parts[] = {&p.train, &p.dev, &p.dev2, &p.test};
  for (std::size_t i = 0; i < 4; ++i) {
    *parts[i] = slice_rows(table, at, static_cast<Index>(sizes[i]));
    at += static_cast<Index>(sizes[i]);
  }
  return p;
}

// ---------------------------------------------------------------- standardization

/// Column statistics of real-valued features on the given (training) rows.
/// Categorical columns get mean 0 and std 1 and are never transformed.
/// Real columns that are constant on the training rows are reported in
/// `dropped` with a warning on stderr.
struct FeatureStandardization {
  Standardization stats;
  std::vector<std::size_t> dropped;
};

inline FeatureStandardization fit_feature_stats(const Matrix& inputs, std::span<const FeatureSpec> features,
                                                bool warn = true) {
  FeatureStandardization out;
  const Index F = inputs.cols();
  out.stats.mean = Vector::Zero(F);
  out.stats.std = Vector::Ones(F);
  for (Index f = 0; f < F; ++f) {
    if (!features.empty() && features[static_cast<std::size_t>(f)].is_categorical()) continue;
    const double mean = inputs.col(f).mean();
    const double var = (inputs.col(f).array() - mean).square().mean();
    out.stats.mean[f] = mean;
    if (var > 0.0) {
      out.stats.std[f] = std::sqrt(var);
    } else {
      out.dropped.push_back(static_cast<std::size_t>(f));
      if (warn) {
        const std::string name = features.empty() ? std::to_string(f) : features[static_cast<std::size_t>(f)].name;
        std::cerr << "warning: feature '" << name << "' is constant on the training split; dropped\n";
      }
    }
  }
  return out;
}

inline Standardization fit_output_stats(const Matrix& outputs) {
  Standardization s;
  s.mean = outputs.rowwise().mean();
  s.std = Vector(outputs.rows());
  for (Index d = 0; d < outputs.rows(); ++d) {
    const double var = (outputs.row(d).array() - s.mean[d]).square().mean();
    if (!(var > 0.0)) fail(ErrorCode::ZeroStd, "output dimension " + std::to_string(d) + " is constant");
    s.std[d] = std::sqrt(var);
  }
  return s;
}

/// Standardizes the real columns of a T x F input matrix.
inline Matrix standardize_inputs(const Matrix& inputs, const Standardization& stats) {
  if (inputs.cols() != stats.size()) fail(ErrorCode::ShapeMismatch, "feature count does not match statistics");
  Matrix out(inputs.rows(), inputs.cols());
  for (Index f = 0; f < inputs.cols(); ++f) out.col(f) = (inputs.col(f).array() - stats.mean[f]) / stats.std[f];
  return out;
}

inline Matrix drop_columns(const Matrix& m, std::span<const std::size_t> columns) {
  if (columns.empty()) return m;
  std::vector<Index> keep;
  for (Index c = 0; c < m.cols(); ++c) {
    if (std::find(columns.begin(), columns.end(), static_cast<std::size_t>(c)) == columns.end()) keep.push_back(c);
  }
  Matrix out(m.rows(), static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) out.col(static_cast<Index>(k)) = m.col(keep[k]);
  return out;
}

// ---------------------------------------------------------------- windows

struct WindowSpec {
  int length = 36;
  int step = 1;
  int observed = 12;
  int forecast = 24;

  void validate() const {
    if (length < 1 || step < 1 || observed < 0 || forecast < 1 || observed + forecast != length) {
      fail(ErrorCode::InvalidArgument, "window spec needs observed + forecast = length and step >= 1");
    }
  }
};

inline std::size_t window_count(Index n, const WindowSpec& spec) {
  if (n < spec.length) return 0;
  return static_cast<std::size_t>((n - spec.length) / spec.step + 1);
}

/// Sliding windows over one contiguous split: the encoder reads the whole
/// window's features and the decoder targets the window's outputs.
inline std::vector<SequenceSample> windows(const Matrix& inputs, const Matrix& outputs, const WindowSpec& spec) {
  spec.validate();
  if (inputs.rows() != outputs.cols()) fail(ErrorCode::ShapeMismatch, "inputs and outputs differ in length");
  const Index n = inputs.rows();
  if (n < spec.length) {
    fail(ErrorCode::SplitTooShort,
         "split of length " + std::to_string(n) + " shorter than window " + std::to_string(spec.length));
  }
  std::vector<SequenceSample> out;
  out.reserve(window_count(n, spec));
  for (Index start = 0; start + spec.length <= n; start += spec.step) {
    out.push_back({inputs.middleRows(start, spec.length), outputs.middleCols(start, spec.length), spec.observed});
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> recombination_windows(std::size_t count, const WindowSpec& spec) {
  std::vector<std::size_t> used;
  const auto stride = static_cast<std::size_t>(spec.forecast);
  for (std::size_t k = 0; k < count / stride; ++k) used.push_back(k * stride);
  return used;
}

}  // namespace detail

/// Contiguous forecast from step-1 windows: every `forecast`-th window
/// contributes its final forecast segment; a trailing group of fewer than
/// `forecast` windows is dropped.
inline Matrix recombine(std::span<const Matrix> windowed, const WindowSpec& spec) {
  spec.validate();
  if (windowed.empty()) fail(ErrorCode::InconsistentWindows, "no windows");
  for (const auto& w : windowed) {
    if (w.cols() != spec.length || w.rows() != windowed.front().rows()) {
      fail(ErrorCode::InconsistentWindows, "window shape differs from the window spec");
    }
  }
  const auto used = detail::recombination_windows(windowed.size(), spec);
  if (used.empty()) fail(ErrorCode::InconsistentWindows, "fewer windows than one forecast block");
  Matrix out(windowed.front().rows(), static_cast<Index>(used.size()) * spec.forecast);
  for (std::size_t k = 0; k < used.size(); ++k) {
    out.middleCols(static_cast<Index>(k) * spec.forecast, spec.forecast) = windowed[used[k]].rightCols(spec.forecast);
  }
  return out;
}

inline BoundedPrediction recombine(std::span<const BoundedPrediction> windowed, const WindowSpec& spec) {
  std::vector<Matrix> yhat;
  std::vector<Matrix> zl;
  std::vector<Matrix> zu;
  for (const auto& p : windowed) {
    yhat.push_back(p.yhat);
    zl.push_back(p.z_lower);
    zu.push_back(p.z_upper);
  }
  return {recombine(yhat, spec), recombine(zl, spec), recombine(zu, spec)};
}

/// MITV-style preparation: partition, train-only standardization, windows.
inline SplitDataset prepare_windowed(const RawTable& table, std::span<const std::size_t, 4> sizes,
                                     const WindowSpec& spec, std::vector<FeatureSpec>* kept_features = nullptr) {
  const auto parts = partition(table, sizes);
  const auto fstats = fit_feature_stats(parts.train.inputs, table.features);
  SplitDataset ds;
  ds.input_stats.mean = fstats.stats.mean;
  ds.input_stats.std = fstats.stats.std;
  ds.output_stats = fit_output_stats(parts.train.outputs);
  auto make = [&](const RawTable& t) {
    const Matrix x = drop_columns(standardize_inputs(t.inputs, fstats.stats), fstats.dropped);
    return windows(x, standardize(t.outputs, ds.output_stats), spec);
  };
  ds.train = make(parts.train);
  ds.dev = make(parts.dev);
  ds.dev2 = make(parts.dev2);
  ds.test = make(parts.test);
  if (kept_features) {
    kept_features->clear();
    for (std::size_t f = 0; f < table.features.size(); ++f) {
      if (std::find(fstats.dropped.begin(), fstats.dropped.end(), f) == fstats.dropped.end()) {
        kept_features->push_back(table.features[f]);
      }
    }
  }
  return ds;
}

// ---------------------------------------------------------------- JSON lines

inline nlohmann::json matrix_to_json(const Matrix& m) {
  auto rows = nlohmann::json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Index>(j.size());
  const Index cols = rows == 0 ? 0 : static_cast<Index>(j[0].size());
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    if (static_cast<Index>(j[static_cast<std::size_t>(r)].size()) != cols) {
      fail(ErrorCode::ShapeMismatch, "ragged matrix");
    }
    for (Index c = 0; c < cols; ++c) m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline nlohmann::json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

inline nlohmann::json to_json(const Standardization& s) {
  return {{"mean", vector_to_json(s.mean)}, {"std", vector_to_json(s.std)}};
}

inline Standardization standardization_from_json(const nlohmann::json& j) {
  return {vector_from_json(j.at("mean")), vector_from_json(j.at("std"))};
}

inline void write_samples_jsonl(std::ostream& os, std::span<const SequenceSample> samples) {
  for (const auto& s : samples) {
    nlohmann::json j{{"inputs", matrix_to_json(s.inputs)},
                     {"targets", matrix_to_json(s.targets)},
                     {"observed_steps", s.observed_steps}};
    os << j.dump() << '\n';
  }
}

inline std::vector<SequenceSample> read_samples_jsonl(std::istream& is) {
  std::vector<SequenceSample> out;
  std::string line;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SequenceSample s{matrix_from_json(j.at("inputs")), matrix_from_json(j.at("targets")),
                       j.value("observed_steps", 0)};
      validate_sample(s);
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::UnparseableRow, "line " + std::to_string(row) + ": " + e.what());
    }
  }
  return out;
}

inline void write_predictions_jsonl(std::ostream& os, std::span<const BoundedPrediction> preds,
                                    std::span<const Matrix> ys) {
  if (preds.size() != ys.size()) fail(ErrorCode::LengthMismatch, "one observation per prediction");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    nlohmann::json j{{"yhat", matrix_to_json(preds[i].yhat)},
                     {"z_lower", matrix_to_json(preds[i].z_lower)},
                     {"z_upper", matrix_to_json(preds[i].z_upper)},
                     {"y", matrix_to_json(ys[i])}};
    os << j.dump() << '\n';
  }
}

struct PredictionRecords {
  std::vector<BoundedPrediction> predictions;
  std::vector<Matrix> observations;
};

inline PredictionRecords read_predictions_jsonl(std::istream& is) {
  PredictionRecords out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.predictions.push_back(
        {matrix_from_json(j.at("yhat")), matrix_from_json(j.at("z_lower")), matrix_from_json(j.at("z_upper"))});
    out.observations.push_back(matrix_from_json(j.at("y")));
  }
  return out;
}

// ---------------------------------------------------------------- synthetic data

enum class NoiseKind { gaussian, one_sided };

/// Generator settings. Each sequence draws latent (u, v) ~ U(-1, 1)^2; the
/// inputs at step t are [u, v, tau_t] with tau_t = t / (M - 1), and
///   g(x_t)     = v + u * sin(2 pi tau_t)
///   sigma(x_t) = sigma_min * (sigma_max / sigma_min)^((u + 1) / 2)
/// so sigma is log-uniform over [sigma_min, sigma_max] across sequences.
/// Gaussian noise: y = g + sigma * eta, eta ~ N(0, 1).
/// One-sided noise: y = g + sigma * (eta_pos + jitter * eta_sym) where
/// eta_pos ~ Exp(1) with probability `burst_probability` (0 otherwise) and
/// eta_sym ~ N(0, 1).
struct SyntheticProfile {
  int horizon = 20;
  std::size_t dev = 0;   // 0 means train / 4
  std::size_t dev2 = 0;  // 0 means train / 4
  std::size_t test = 0;  // 0 means train / 4
  double sigma_min = 0.2;
  double sigma_max = 1.0;
  NoiseKind noise = NoiseKind::gaussian;
  double burst_probability = 1.0;
  double burst_scale = 1.0;
  double jitter = 0.0;
};

struct SyntheticTruth {
  std::vector<Matrix> clean;  // g per sequence, 1 x M
  std::vector<Matrix> sigma;  // sigma per sequence, 1 x M
};

struct SyntheticData {
  SplitDataset data;  // standardized like any other dataset
  SyntheticTruth train_truth;
  SyntheticTruth dev_truth;
  SyntheticTruth dev2_truth;
  SyntheticTruth test_truth;
};

inline double synthetic_mean(double u, double v, double tau) { return v + u * std::sin(2.0 * std::numbers::pi * tau); }

inline double synthetic_sigma(const SyntheticProfile& p, double u) {
  if (p.sigma_max <= 0.0) return 0.0;
  return p.sigma_min * std::pow(p.sigma_max / p.sigma_min, 0.5 * (u + 1.0));
}

/// One noisy observation at a fixed input.
inline double sample_target(const SyntheticProfile& p, double u, double v, double tau, std::mt19937_64& rng) {
  const double g = synthetic_mean(u, v, tau);
  const double s = synthetic_sigma(p, u);
  std::normal_distribution<double> normal(0.0, 1.0);
  if (p.noise == NoiseKind::gaussian) return g + s * normal(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);
  double eta = 0.0;
  if (unit(rng) < p.burst_probability) eta = p.burst_scale * expo(rng);
  if (p.jitter > 0.0) eta += p.jitter * std::abs(normal(rng));
  return g + s * eta;
}

inline SyntheticData synth_heteroskedastic(std::size_t n, std::uint64_t seed, const SyntheticProfile& profile = {}) {
  if (n < 100) fail(ErrorCode::InvalidArgument, "synthetic generator needs n >= 100 training sequences");
  if (profile.horizon < 2) fail(ErrorCode::InvalidArgument, "horizon must be >= 2");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> latent(-1.0, 1.0);
  const int M = profile.horizon;

  auto generate = [&](std::size_t count, std::vector<SequenceSample>& out, SyntheticTruth& truth) {
    for (std::size_t k = 0; k < count; ++k) {
      const double u = latent(rng);
      const double v = latent(rng);
      SequenceSample s{Matrix(M, 3), Matrix(1, M), 0};
      Matrix clean(1, M);
      Matrix sigma(1, M);
      for (int t = 0; t < M; ++t) {
        const double tau = static_cast<double>(t) / (M - 1);
        s.inputs(t, 0) = u;
        s.inputs(t, 1) = v;
        s.inputs(t, 2) = tau;
        clean(0, t) = synthetic_mean(u, v, tau);
        sigma(0, t) = synthetic_sigma(profile, u);
        s.targets(0, t) = sample_target(profile, u, v, tau, rng);
      }
      out.push_back(std::move(s));
      truth.clean.push_back(std::move(clean));
      truth.sigma.push_back(std::move(sigma));
    }
  };

  SyntheticData out;
  const std::size_t quarter = n / 4;
  generate(n, out.data.train, out.train_truth);
  generate(profile.dev ? profile.dev : quarter, out.data.dev, out.dev_truth);
  generate(profile.dev2 ? profile.dev2 : quarter, out.data.dev2, out.dev2_truth);
  generate(profile.test ? profile.test : quarter, out.data.test, out.test_truth);

  // Train-only statistics, reused verbatim for every split.
  std::vector<Matrix> xs;
  std::vector<Matrix> ys;
  for (const auto& s : out.data.train) {
    xs.push_back(s.inputs);
    ys.push_back(s.targets);
  }
  Matrix all_x(static_cast<Index>(xs.size()) * M, 3);
  for (std::size_t k = 0; k < xs.size(); ++k) all_x.middleRows(static_cast<Index>(k) * M, M) = xs[k];
  Matrix all_y(1, static_cast<Index>(ys.size()) * M);
  for (std::size_t k = 0; k < ys.size(); ++k) all_y.middleCols(static_cast<Index>(k) * M, M) = ys[k];
  const auto fstats = fit_feature_stats(all_x, {}, false);
  out.data.input_stats = fstats.stats;
  out.data.output_stats = fit_output_stats(all_y);
  for (auto* split : {&out.data.train, &out.data.dev, &out.data.dev2, &out.data.test}) {
    for (auto& s : *split) {
      s.inputs = standardize_inputs(s.inputs, out.data.input_stats);
      s.targets = standardize(s.targets, out.data.output_stats);
    }
  }
  return out;
}

}  // namespace uqseq
