#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bsa/tensor.hpp"

namespace bsa {

struct NormalizationStats {
  Vector mean;
  Vector stdev;
};

inline constexpr double kStandardizeEps = 1e-8;

struct TimeSeriesDataset {
  Matrix values;  // T x N
  std::vector<std::string> channel_names;
  std::vector<std::string> timestamps;  // first CSV column, kept verbatim
  std::string time_column = "date";
  std::string interval;  // free-form sampling interval label

  Eigen::Index length() const { return values.rows(); }
  Eigen::Index channels() const { return values.cols(); }
};

TimeSeriesDataset load_csv(const std::filesystem::path& path);
void write_csv(const TimeSeriesDataset& data, const std::filesystem::path& path);

struct WindowSpec {
  int lookback = 96;
  int horizon = 96;
  int batch = 256;
};

// Inclusive range of sample indices. Sample t has look-back rows
// [t - L, t - 1] and target rows [t, t + S - 1] (0-based).
struct IndexRange {
  long first = 0;
  long last = -1;

  long size() const { return last >= first ? last - first + 1 : 0; }
  bool empty() const { return size() == 0; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

struct SplitBoundaries {
  long train_end = 0;  // T_tr: rows [0, T_tr) are training rows
  long val_end = 0;    // T_val
  long total = 0;      // T_end
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

// Row boundaries from ratios: T_tr = floor(T * train), the test block takes
// floor(T * test) rows at the end, validation gets the rest.
SplitBoundaries boundaries_from_ratios(long total, const SplitRatios& ratios);

struct ConsecutiveSplit {
  SplitBoundaries boundaries;
  IndexRange train;
  IndexRange gap_train_val;  // momentum-only
  IndexRange val;
  IndexRange gap_val_test;   // momentum-only
  IndexRange test;

  // [L, T_end - S], the union of the five ranges above.
  IndexRange all() const { return {train.first, test.last}; }
};

ConsecutiveSplit consecutive_split(const SplitBoundaries& boundaries,
                                   const WindowSpec& spec);
ConsecutiveSplit consecutive_split(long total, const SplitRatios& ratios,
                                   const WindowSpec& spec);

// Consecutive blocks of at most `batch` indices covering `range` in order.
std::vector<IndexRange> sequential_batches(const IndexRange& range, int batch);

struct ForecastBatch {
  ChannelBatch inputs;   // N x (B x L)
  ChannelBatch targets;  // N x (B x S)
  std::vector<long> timestamps;  // sample indices

  int size() const { return static_cast<int>(timestamps.size()); }
};

// Windows for the sample indices in `range`; values is T x N.
ForecastBatch make_batch(const Matrix& values, const IndexRange& range,
                         const WindowSpec& spec);
ForecastBatch make_batch(const Matrix& values, const std::vector<long>& samples,
                         const WindowSpec& spec);

// Per-channel population statistics of rows [0, train_end).
NormalizationStats train_statistics(const Matrix& values, long train_end);
TimeSeriesDataset standardize(const TimeSeriesDataset& data,
                              const NormalizationStats& stats);
Matrix destandardize(const Matrix& values, const NormalizationStats& stats);

// out[t][n] = in[t][n] + std_n * sin(2 pi t / period + phi_n), with phi_n
// drawn uniformly from [0, 2 pi) by a generator seeded with `seed`.
TimeSeriesDataset synthesize_sine(const TimeSeriesDataset& data, double period,
                                  std::uint64_t seed);

// Stationary AR(1) per channel plus white observation noise; used as the
// base signal of the synthetic experiments.
struct ArNoiseSpec {
  long length = 6000;
  int channels = 3;
  double ar_coefficient = 0.99;
  double innovation_std = 1.0;
  double noise_std = 1.0;
};
TimeSeriesDataset generate_ar_noise(const ArNoiseSpec& spec, std::uint64_t seed);

}  // namespace bsa
