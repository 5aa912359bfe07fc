#include "bsa/analysis.hpp"

#include <fftw3.h>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "bsa/errors.hpp"

namespace bsa::analysis {

Vector modified_alpha(const Vector& raw_smoothing) {
  // -log10(1 - sigmoid(r)) = log(1 + e^r) / ln 10
  return raw_smoothing.unaryExpr([](double r) {
    const double softplus = r > 30.0 ? r + std::log1p(std::exp(-r)) : std::log1p(std::exp(r));
    return softplus / std::numbers::ln10;
  });
}

Vector slot_positions(const Vector& raw_smoothing) {
  const Vector a = modified_alpha(raw_smoothing);
  const auto k = a.size();
  Vector pos(2 * k + 1);
  for (Eigen::Index j = 0; j < k; ++j) pos[j] = -a[k - 1 - j];
  pos[k] = 0.0;
  for (Eigen::Index m = 0; m < k; ++m) pos[k + 1 + m] = a[m];
  return pos;
}

Vector attention_kde(const Vector& weights, const Vector& positions, double bandwidth,
                     const Vector& grid) {
  if (weights.size() != positions.size()) {
    throw DimensionError("attention_kde: weights and positions differ in length");
  }
  if (!(bandwidth > 0.0)) throw DomainError("attention_kde: bandwidth must be positive");
  if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-9) {
    throw DomainError("attention_kde: weights must be non-negative and sum to 1");
  }
  const double norm = 1.0 / (bandwidth * std::sqrt(2.0 * std::numbers::pi));
  Vector density = Vector::Zero(grid.size());
  for (Eigen::Index g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < weights.size(); ++j) {
      const double z = (grid[g] - positions[j]) / bandwidth;
      acc += weights[j] * std::exp(-0.5 * z * z);
    }
    density[g] = norm * acc;
  }
  return density;
}

double kde_first_moment(const Vector& weights, const Vector& positions) {
  return weights.dot(positions);
}

Vector kde_grid(const Vector& positions, double bandwidth, int points) {
  if (points < 2) throw DomainError("kde_grid: need at least two points");
  const double span = positions.cwiseAbs().maxCoeff() + 5.0 * bandwidth;
  return Vector::LinSpaced(points, -span, span);
}

std::vector<std::complex<double>> dft_direct(std::span<const double> signal) {
  const std::size_t n = signal.size();
  std::vector<std::complex<double>> out(n / 2 + 1);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double re = 0.0;
    double im = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      // Reduce k*t mod n first so the angle stays accurate for long series.
      const double angle = -2.0 * std::numbers::pi * static_cast<double>((k * t) % n) /
                           static_cast<double>(n);
      re += signal[t] * std::cos(angle);
      im += signal[t] * std::sin(angle);
    }
    out[k] = {re, im};
  }
  return out;
}

std::vector<std::complex<double>> dft_fast(std::span<const double> signal) {
  const int n = static_cast<int>(signal.size());
  std::vector<double> in(signal.begin(), signal.end());
  std::vector<std::complex<double>> out(static_cast<std::size_t>(n / 2 + 1));
  fftw_plan plan = fftw_plan_dft_r2c_1d(n, in.data(),
                                        reinterpret_cast<fftw_complex*>(out.data()),
                                        FFTW_ESTIMATE);
  if (!plan) throw std::runtime_error("dft_fast: FFTW could not create a plan");
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  return out;
}

Vector amplitude_spectrum(const Vector& signal) {
  const auto n = signal.size();
  if (n < 2) throw DomainError("amplitude_spectrum: need at least two samples");
  const Vector centered = signal.array() - signal.mean();
  std::span<const double> s(centered.data(), static_cast<std::size_t>(n));
  const auto spec = n <= kDirectDftLimit ? dft_direct(s) : dft_fast(s);
  Vector amp(n / 2);
  for (Eigen::Index k = 1; k <= n / 2; ++k) {
    amp[k - 1] = 2.0 * std::abs(spec[static_cast<std::size_t>(k)]) / static_cast<double>(n);
  }
  return amp;
}

Vector gaussian_filter1d(const Vector& x, double sigma) {
  if (!(sigma > 0.0)) return x;
  const int radius = static_cast<int>(4.0 * sigma + 0.5);
  Vector kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i / sigma) * (i / sigma));
  }
  kernel /= kernel.sum();
  const auto n = x.size();
  // Half-sample symmetric reflection: (d c b a | a b c d | d c b a).
  auto reflect = [n](Eigen::Index i) {
    const Eigen::Index period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
  };
  Vector out(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    double acc = 0.0;
    for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * x[reflect(t + i)];
    out[t] = acc;
  }
  return out;
}

FftCurve fft_curve(const Vector& signal, double sigma) {
  const auto n = signal.size();
  if (n < 16) throw DomainError("fft_curve: need at least 16 samples");
  const Vector amp = amplitude_spectrum(signal);
  const Vector smooth = gaussian_filter1d(amp, sigma);
  const auto bins = amp.size();

  FftCurve c;
  c.frequency.resize(bins);
  c.neg_log_frequency.resize(bins);
  c.amplitude.resize(bins);
  c.smoothed.resize(bins);
  for (Eigen::Index i = 0; i < bins; ++i) {
    const Eigen::Index k = bins - i;  // bin k = 1 .. n/2, reversed
    c.frequency[i] = static_cast<double>(k) / static_cast<double>(n);
    c.neg_log_frequency[i] = -std::log10(c.frequency[i]);
    c.amplitude[i] = amp[k - 1];
    c.smoothed[i] = smooth[k - 1];
  }
  // Least-squares line in (log frequency, amplitude) removes the broadband
  // red-noise slope; what is left above it is reported.
  const double xm = c.neg_log_frequency.mean();
  const double ym = c.smoothed.mean();
  const Vector dx = c.neg_log_frequency.array() - xm;
  const double sxx = dx.squaredNorm();
  const double slope = sxx > 0.0 ? dx.dot(c.smoothed.array().matrix() - Vector::Constant(bins, ym)) / sxx : 0.0;
  const Vector line = (ym + slope * dx.array()).matrix();
  c.detrended = (c.smoothed - line).cwiseMax(0.0);
  return c;
}

AnalysisReport build_report(const SpectralAttention& module, const TimeSeriesDataset& data) {
  if (data.channels() != module.features()) {
    throw DimensionError("build_report: dataset channels do not match the module's D");
  }
  AnalysisReport r;
  r.factors = module.factors();
  r.alphas = module.smoothing_factors();
  r.modified_alphas = modified_alpha(module.raw_smoothing());
  r.positions = slot_positions(module.raw_smoothing());
  r.sa_matrix = module.sa_matrix();
  r.weights = module.attention_weights();
  r.channel_names = data.channel_names;
  if (r.channel_names.size() != static_cast<std::size_t>(data.channels())) {
    r.channel_names.clear();
    for (Eigen::Index n = 0; n < data.channels(); ++n) r.channel_names.push_back("ch" + std::to_string(n));
  }
  r.kde_x = kde_grid(r.positions, kKdeBandwidth);
  r.kde_mean = Vector::Zero(r.kde_x.size());
  for (Eigen::Index n = 0; n < data.channels(); ++n) {
    ChannelKde ck;
    ck.channel = r.channel_names[static_cast<std::size_t>(n)];
    const Vector w = r.weights.col(n);
    ck.density = attention_kde(w, r.positions, kKdeBandwidth, r.kde_x);
    ck.first_moment = kde_first_moment(w, r.positions);
    r.kde_mean += ck.density;
    r.mean_first_moment += ck.first_moment;
    r.kde.push_back(std::move(ck));
  }
  r.kde_mean /= static_cast<double>(data.channels());
  r.mean_first_moment /= static_cast<double>(data.channels());
  if (data.length() >= 16) {
    for (Eigen::Index n = 0; n < data.channels(); ++n) {
      r.fft.push_back(fft_curve(data.values.col(n)));
    }
  }
  return r;
}

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << std::setprecision(12);
  return out;
}

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

std::vector<std::filesystem::path> export_report(const AnalysisReport& r,
                                                 const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> files;

  {
    const auto p = out_dir / "heatmap.csv";
    auto out = open_out(p);
    out << "channel,slot,position,logit,weight\n";
    for (Eigen::Index n = 0; n < r.sa_matrix.cols(); ++n) {
      for (Eigen::Index j = 0; j < r.sa_matrix.rows(); ++j) {
        out << r.channel_names[static_cast<std::size_t>(n)] << ',' << j << ',' << r.positions[j]
            << ',' << r.sa_matrix(j, n) << ',' << r.weights(j, n) << '\n';
      }
    }
    files.push_back(p);
  }
  {
    const auto p = out_dir / "kde.csv";
    auto out = open_out(p);
    out << "x";
    for (const auto& c : r.kde) out << ',' << c.channel;
    out << ",mean\n";
    for (Eigen::Index g = 0; g < r.kde_x.size(); ++g) {
      out << r.kde_x[g];
      for (const auto& c : r.kde) out << ',' << c.density[g];
      out << ',' << r.kde_mean[g] << '\n';
    }
    files.push_back(p);
  }
  for (std::size_t n = 0; n < r.fft.size(); ++n) {
    const auto p = out_dir / ("fft_" + std::to_string(n) + ".csv");
    auto out = open_out(p);
    const auto& c = r.fft[n];
    out << "frequency,neg_log_frequency,amplitude,smoothed,detrended\n";
    for (Eigen::Index i = 0; i < c.frequency.size(); ++i) {
      out << c.frequency[i] << ',' << c.neg_log_frequency[i] << ',' << c.amplitude[i] << ','
          << c.smoothed[i] << ',' << c.detrended[i] << '\n';
    }
    files.push_back(p);
  }

  nlohmann::json m;
  m["format"] = "bsa-analysis";
  m["version"] = 1;
  m["factors"] = r.factors;
  m["alphas"] = to_std(r.alphas);
  m["modified_alphas"] = to_std(r.modified_alphas);
  m["positions"] = to_std(r.positions);
  m["bandwidth"] = kKdeBandwidth;
  m["fft_smoothing_sigma"] = kFftSmoothingSigma;
  m["kde_points"] = r.kde_x.size();
  m["channels"] = r.channel_names;
  nlohmann::json moments = nlohmann::json::object();
  for (const auto& c : r.kde) moments[c.channel] = c.first_moment;
  moments["mean"] = r.mean_first_moment;
  m["first_moment"] = moments;
  m["detrend"] = {
      {"method", "least-squares line in (-log10 frequency, smoothed amplitude), clipped at 0"},
      {"approximation", true}};
  std::vector<std::string> names;
  for (const auto& f : files) names.push_back(f.filename().string());
  names.push_back("manifest.json");
  m["files"] = names;
  const auto mp = out_dir / "manifest.json";
  auto out = open_out(mp);
  out << m.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + mp.string());
  files.push_back(mp);
  return files;
}

}  // namespace bsa::analysis
