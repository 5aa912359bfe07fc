#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "bsa/ema_filter.hpp"
#include "bsa/forecasters.hpp"
#include "bsa/spectral_attention.hpp"
#include "bsa/tensor.hpp"

namespace testing {

using bsa::ChannelBatch;
using bsa::Matrix;
using bsa::Vector;

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c,
                            double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  return random_matrix(rng, n, 1, scale);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// K strictly increasing factors spread between 0.5 and 0.999.
inline Vector random_alphas(std::mt19937_64& rng, int K) {
  std::uniform_real_distribution<double> u(0.3, 3.0);
  std::vector<double> v(static_cast<std::size_t>(K));
  for (auto& x : v) x = 1.0 - std::pow(10.0, -u(rng));
  std::sort(v.begin(), v.end());
  for (std::size_t k = 1; k < v.size(); ++k) {
    if (v[k] <= v[k - 1] + 1e-4) v[k] = v[k - 1] + 1e-4;
  }
  return Eigen::Map<Vector>(v.data(), K);
}

inline ChannelBatch random_batch(std::mt19937_64& rng, int channels, int B, int W,
                                 double scale = 1.0) {
  ChannelBatch out;
  for (int n = 0; n < channels; ++n) out.push_back(random_matrix(rng, B, W, scale));
  return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

inline double max_abs_diff(const ChannelBatch& a, const ChannelBatch& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i], b[i]));
  return m;
}

// Loop of single EMA steps: entry b is the momentum after b updates.
inline std::vector<Matrix> sequential_momentum(const Matrix& initial, const Matrix& features,
                                               const Vector& alphas) {
  std::vector<Matrix> out{initial};
  Matrix M = initial;
  for (Eigen::Index b = 0; b < features.rows(); ++b) {
    for (Eigen::Index k = 0; k < M.rows(); ++k) {
      for (Eigen::Index i = 0; i < M.cols(); ++i) {
        M(k, i) = alphas[k] * M(k, i) + (1.0 - alphas[k]) * features(b, i);
      }
    }
    out.push_back(M);
  }
  return out;
}

// Per-sample reference of the attention forward in the plain B x D form:
// components from the pre-update momentum, softmax per column, weighted sum.
inline Matrix sequential_attention(const Matrix& sa_matrix, const Vector& alphas,
                                   const Matrix& initial, const Matrix& features) {
  const Eigen::Index K = alphas.size();
  const Eigen::Index D = features.cols();
  Matrix out(features.rows(), D);
  Matrix M = initial;
  for (Eigen::Index b = 0; b < features.rows(); ++b) {
    for (Eigen::Index i = 0; i < D; ++i) {
      std::vector<double> w(static_cast<std::size_t>(2 * K + 1));
      double mx = -1e300;
      for (Eigen::Index j = 0; j <= 2 * K; ++j) mx = std::max(mx, sa_matrix(j, i));
      double z = 0.0;
      for (Eigen::Index j = 0; j <= 2 * K; ++j) {
        w[static_cast<std::size_t>(j)] = std::exp(sa_matrix(j, i) - mx);
        z += w[static_cast<std::size_t>(j)];
      }
      const double f = features(b, i);
      double acc = 0.0;
      for (Eigen::Index j = 0; j <= 2 * K; ++j) {
        double comp;
        if (j < K) comp = 2.0 * (f - M(K - 1 - j, i));
        else if (j == K) comp = f;
        else comp = 2.0 * M(j - K - 1, i);
        acc += w[static_cast<std::size_t>(j)] / z * comp;
      }
      out(b, i) = acc;
    }
    for (Eigen::Index k = 0; k < K; ++k) {
      for (Eigen::Index i = 0; i < D; ++i) {
        M(k, i) = alphas[k] * M(k, i) + (1.0 - alphas[k]) * features(b, i);
      }
    }
  }
  return out;
}

// Replicate-padded centred moving average by explicit summation.
inline std::vector<double> naive_trend(const std::vector<double>& x, int w) {
  const int L = static_cast<int>(x.size());
  const int h = (w - 1) / 2;
  std::vector<double> t(x.size());
  for (int i = 0; i < L; ++i) {
    double s = 0.0;
    for (int j = i - h; j <= i + h; ++j) s += x[static_cast<std::size_t>(std::clamp(j, 0, L - 1))];
    t[static_cast<std::size_t>(i)] = s / w;
  }
  return t;
}

}  // namespace testing
