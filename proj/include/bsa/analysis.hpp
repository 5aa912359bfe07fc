#pragma once

#include <complex>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bsa/data.hpp"
#include "bsa/spectral_attention.hpp"

// Post-hoc interpretation of a trained SA-matrix: where on the frequency axis
// the attention mass sits, next to the spectrum of the data.
namespace bsa::analysis {

inline constexpr double kKdeBandwidth = 0.4;
inline constexpr double kFftSmoothingSigma = 5.0;
inline constexpr int kDirectDftLimit = 4096;

// log10(1 / (1 - sigmoid(raw))): 1 for alpha = 0.9, 3 for alpha = 0.999.
Vector modified_alpha(const Vector& raw_smoothing);

// x-axis position of each of the 2K+1 slots: the high-pass slots mirror the
// factors they subtract (-a'[K-1] .. -a'[0]), the identity slot sits at 0,
// and the low-pass slots at +a'[0] .. +a'[K-1]. Factors need not be sorted.
Vector slot_positions(const Vector& raw_smoothing);

// Gaussian mixture density sum_j w_j N(x; p_j, bandwidth^2) on `grid`.
// Throws DomainError unless the weights are non-negative and sum to 1.
Vector attention_kde(const Vector& weights, const Vector& positions,
                     double bandwidth, const Vector& grid);

// Mean of x under the mixture, sum_j w_j p_j.
double kde_first_moment(const Vector& weights, const Vector& positions);

// Evenly spaced grid over +-(max|p| + 5 * bandwidth).
Vector kde_grid(const Vector& positions, double bandwidth, int points = 401);

std::vector<std::complex<double>> dft_direct(std::span<const double> signal);
std::vector<std::complex<double>> dft_fast(std::span<const double> signal);

// |X_k| * 2 / T for k = 1 .. T/2 of the mean-removed signal; direct DFT up to
// kDirectDftLimit samples, FFT above.
Vector amplitude_spectrum(const Vector& signal);

// Same as scipy.ndimage.gaussian_filter1d(mode="reflect", truncate=4).
Vector gaussian_filter1d(const Vector& x, double sigma);

struct FftCurve {
  Vector frequency;          // cycles per step, decreasing
  Vector neg_log_frequency;  // -log10(frequency), increasing
  Vector amplitude;
  Vector smoothed;
  Vector detrended;  // smoothed minus a least-squares line, clipped at 0
};

// Bins are ordered by increasing neg_log_frequency (decreasing frequency).
FftCurve fft_curve(const Vector& signal, double sigma = kFftSmoothingSigma);

struct ChannelKde {
  std::string channel;
  Vector density;
  double first_moment = 0.0;
};

struct AnalysisReport {
  int factors = 0;
  Vector alphas;
  Vector modified_alphas;
  Vector positions;
  Matrix sa_matrix;  // (2K+1) x D
  Matrix weights;    // softmax over slots
  Vector kde_x;
  std::vector<ChannelKde> kde;  // per channel
  Vector kde_mean;              // mean across channels
  double mean_first_moment = 0.0;
  std::vector<std::string> channel_names;
  std::vector<FftCurve> fft;  // per channel; empty when the series is too short
};

AnalysisReport build_report(const SpectralAttention& module,
                            const TimeSeriesDataset& data);

// Writes heatmap.csv, kde.csv, fft_<i>.csv per channel and manifest.json.
// Returns the written paths (manifest last).
std::vector<std::filesystem::path> export_report(const AnalysisReport& report,
                                                 const std::filesystem::path& out_dir);

}  // namespace bsa::analysis
