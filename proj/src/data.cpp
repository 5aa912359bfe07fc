#include "bsa/data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "bsa/errors.hpp"

namespace bsa {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

}  // namespace

TimeSeriesDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());

  TimeSeriesDataset data;
  std::string line;
  if (!std::getline(in, line) || trim(line).empty()) {
    throw ParseError(path.string() + ": missing header row");
  }
  const auto header = split_fields(line);
  if (header.size() < 2) {
    throw ParseError(path.string() + ": need a timestamp column and at least one channel");
  }
  data.time_column = std::string(header[0]);
  for (std::size_t c = 1; c < header.size(); ++c) {
    data.channel_names.emplace_back(header[c]);
  }
  const std::size_t channels = header.size() - 1;

  std::vector<double> flat;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      std::ostringstream msg;
      msg << path.string() << ": row " << row << " has " << fields.size()
          << " fields, header has " << header.size();
      throw ParseError(msg.str());
    }
    data.timestamps.emplace_back(fields[0]);
    for (std::size_t c = 1; c < fields.size(); ++c) {
      const auto f = fields[c];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (f.empty() || ec != std::errc() || ptr != f.data() + f.size() ||
          !std::isfinite(v)) {
        std::ostringstream msg;
        msg << path.string() << ": row " << row << ", column " << c + 1 << " ('"
            << header[c] << "'): " << (f.empty() ? "missing value" : "not a number: '" + std::string(f) + "'");
        throw ParseError(msg.str());
      }
      flat.push_back(v);
    }
  }
  if (data.timestamps.empty()) {
    throw ParseError(path.string() + ": dataset has a header but no rows");
  }
  const auto t = static_cast<Eigen::Index>(data.timestamps.size());
  data.values = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                               Eigen::RowMajor>>(
      flat.data(), t, static_cast<Eigen::Index>(channels));
  return data;
}

void write_csv(const TimeSeriesDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << data.time_column;
  for (const auto& name : data.channel_names) out << ',' << name;
  out << '\n';
  out.precision(17);
  for (Eigen::Index t = 0; t < data.length(); ++t) {
    out << (static_cast<std::size_t>(t) < data.timestamps.size()
                ? data.timestamps[static_cast<std::size_t>(t)]
                : std::to_string(t));
    for (Eigen::Index n = 0; n < data.channels(); ++n) out << ',' << data.values(t, n);
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

SplitBoundaries boundaries_from_ratios(long total, const SplitRatios& ratios) {
  const double sum = ratios.train + ratios.val + ratios.test;
  if (std::abs(sum - 1.0) > 1e-9 || ratios.train <= 0.0 || ratios.val <= 0.0 ||
      ratios.test <= 0.0) {
    throw DomainError("split ratios must be positive and sum to 1");
  }
  SplitBoundaries b;
  b.total = total;
  b.train_end = static_cast<long>(std::floor(static_cast<double>(total) * ratios.train));
  const long test_rows = static_cast<long>(std::floor(static_cast<double>(total) * ratios.test));
  b.val_end = total - test_rows;
  return b;
}

ConsecutiveSplit consecutive_split(const SplitBoundaries& b, const WindowSpec& spec) {
  if (spec.lookback < 1 || spec.horizon < 1 || spec.batch < 1) {
    throw DomainError("window spec: lookback, horizon and batch must be >= 1");
  }
  const long lookback = spec.lookback;
  const long horizon = spec.horizon;
  if (lookback + horizon > b.total) {
    std::ostringstream msg;
    msg << "dataset of " << b.total << " rows is too short for lookback " << lookback
        << " + horizon " << horizon;
    throw DomainError(msg.str());
  }
  if (!(0 < b.train_end && b.train_end < b.val_end && b.val_end < b.total)) {
    throw DomainError("split boundaries must satisfy 0 < T_tr < T_val < T_end");
  }
  ConsecutiveSplit s;
  s.boundaries = b;
  s.train = {lookback, b.train_end - horizon};
  s.gap_train_val = {b.train_end - horizon + 1, b.train_end - 1};
  s.val = {b.train_end, b.val_end - horizon};
  s.gap_val_test = {b.val_end - horizon + 1, b.val_end - 1};
  s.test = {b.val_end, b.total - horizon};
  if (s.train.empty() || s.val.empty() || s.test.empty()) {
    std::ostringstream msg;
    msg << "dataset too short for lookback " << lookback << ", horizon " << horizon
        << " with boundaries " << b.train_end << "/" << b.val_end << "/" << b.total
        << " (train " << s.train.size() << ", val " << s.val.size() << ", test "
        << s.test.size() << " samples)";
    throw DomainError(msg.str());
  }
  return s;
}

ConsecutiveSplit consecutive_split(long total, const SplitRatios& ratios,
                                   const WindowSpec& spec) {
  return consecutive_split(boundaries_from_ratios(total, ratios), spec);
}

std::vector<IndexRange> sequential_batches(const IndexRange& range, int batch) {
  if (batch < 1) throw DomainError("sequential_batches: batch size must be >= 1");
  std::vector<IndexRange> blocks;
  for (long st = range.first; st <= range.last; st += batch) {
    blocks.push_back({st, std::min(st + batch - 1, range.last)});
  }
  return blocks;
}

ForecastBatch make_batch(const Matrix& values, const std::vector<long>& samples,
                         const WindowSpec& spec) {
  const auto channels = values.cols();
  const int b = static_cast<int>(samples.size());
  ForecastBatch batch;
  batch.timestamps = samples;
  for (Eigen::Index n = 0; n < channels; ++n) {
    batch.inputs.emplace_back(b, spec.lookback);
    batch.targets.emplace_back(b, spec.horizon);
  }
  for (int i = 0; i < b; ++i) {
    const long t = samples[static_cast<std::size_t>(i)];
    if (t < spec.lookback || t + spec.horizon > values.rows()) {
      std::ostringstream msg;
      msg << "sample " << t << " does not fit lookback " << spec.lookback
          << " / horizon " << spec.horizon << " in " << values.rows() << " rows";
      throw DomainError(msg.str());
    }
    for (Eigen::Index n = 0; n < channels; ++n) {
      batch.inputs[n].row(i) = values.col(n).segment(t - spec.lookback, spec.lookback).transpose();
      batch.targets[n].row(i) = values.col(n).segment(t, spec.horizon).transpose();
    }
  }
  return batch;
}

ForecastBatch make_batch(const Matrix& values, const IndexRange& range,
                         const WindowSpec& spec) {
  std::vector<long> samples;
  samples.reserve(static_cast<std::size_t>(range.size()));
  for (long t = range.first; t <= range.last; ++t) samples.push_back(t);
  return make_batch(values, samples, spec);
}

NormalizationStats train_statistics(const Matrix& values, long train_end) {
  if (train_end < 1 || train_end > values.rows()) {
    throw DomainError("train_statistics: train boundary outside the series");
  }
  const auto head = values.topRows(train_end);
  NormalizationStats s;
  s.mean = head.colwise().mean().transpose();
  s.stdev = (head.rowwise() - s.mean.transpose())
                .array()
                .square()
                .colwise()
                .mean()
                .sqrt()
                .transpose();
  return s;
}

TimeSeriesDataset standardize(const TimeSeriesDataset& data,
                              const NormalizationStats& stats) {
  if (stats.mean.size() != data.channels()) {
    throw DimensionError("standardize: statistics do not match channel count");
  }
  TimeSeriesDataset out = data;
  const Vector scale = stats.stdev.array().max(kStandardizeEps);
  out.values = (data.values.rowwise() - stats.mean.transpose()).array().rowwise() /
               scale.transpose().array();
  return out;
}

Matrix destandardize(const Matrix& values, const NormalizationStats& stats) {
  if (stats.mean.size() != values.cols()) {
    throw DimensionError("destandardize: statistics do not match channel count");
  }
  const Vector scale = stats.stdev.array().max(kStandardizeEps);
  Matrix out = values.array().rowwise() * scale.transpose().array();
  out.rowwise() += stats.mean.transpose();
  return out;
}

TimeSeriesDataset synthesize_sine(const TimeSeriesDataset& data, double period,
                                  std::uint64_t seed) {
  if (!(period >= 2.0) || !std::isfinite(period)) {
    throw DomainError("synthesize_sine: period must be finite and >= 2");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  TimeSeriesDataset out = data;
  const auto t_len = data.length();
  for (Eigen::Index n = 0; n < data.channels(); ++n) {
    const double phi = phase(rng);
    const auto col = data.values.col(n);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().mean());
    for (Eigen::Index t = 0; t < t_len; ++t) {
      out.values(t, n) += sd * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / period + phi);
    }
  }
  return out;
}

TimeSeriesDataset generate_ar_noise(const ArNoiseSpec& spec, std::uint64_t seed) {
  if (spec.length < 2 || spec.channels < 1) {
    throw DomainError("generate_ar_noise: need length >= 2 and channels >= 1");
  }
  if (!(std::abs(spec.ar_coefficient) < 1.0)) {
    throw DomainError("generate_ar_noise: AR coefficient must lie in (-1, 1)");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  TimeSeriesDataset d;
  d.values.resize(spec.length, spec.channels);
  const double phi = spec.ar_coefficient;
  const double stationary_sd = spec.innovation_std / std::sqrt(1.0 - phi * phi);
  for (int n = 0; n < spec.channels; ++n) {
    double state = stationary_sd * normal(rng);
    for (long t = 0; t < spec.length; ++t) {
      if (t > 0) state = phi * state + spec.innovation_std * normal(rng);
      d.values(t, n) = state + spec.noise_std * normal(rng);
    }
    d.channel_names.push_back("ch" + std::to_string(n));
  }
  d.time_column = "step";
  for (long t = 0; t < spec.length; ++t) d.timestamps.push_back(std::to_string(t));
  d.interval = "1";
  return d;
}

}  // namespace bsa
