#include "bsa/ema_filter.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "bsa/errors.hpp"

namespace bsa::ema {

void check_alpha_range(const Vector& alphas) {
  if (alphas.size() == 0) throw DomainError("smoothing factors: empty list");
  for (Eigen::Index k = 0; k < alphas.size(); ++k) {
    const double a = alphas[k];
    if (!(a > 0.0 && a < 1.0)) {
      std::ostringstream msg;
      msg << "smoothing factor " << k << " = " << a << " is outside (0, 1)";
      throw DomainError(msg.str());
    }
  }
}

void check_smoothing_factors(const Vector& alphas) {
  check_alpha_range(alphas);
  for (Eigen::Index k = 1; k < alphas.size(); ++k) {
    if (!(alphas[k] > alphas[k - 1])) {
      std::ostringstream msg;
      msg << "smoothing factors must be strictly increasing (index " << k
          << ": " << alphas[k - 1] << " >= " << alphas[k] << ")";
      throw DomainError(msg.str());
    }
  }
}

Matrix ema_update(const Matrix& momentum, const Vector& feature,
                  const Vector& alphas) {
  check_alpha_range(alphas);
  if (momentum.rows() != alphas.size() || momentum.cols() != feature.size()) {
    std::ostringstream msg;
    msg << "ema_update: momentum is " << momentum.rows() << "x"
        << momentum.cols() << ", expected " << alphas.size() << "x"
        << feature.size();
    throw DimensionError(msg.str());
  }
  Matrix out(momentum.rows(), momentum.cols());
  for (Eigen::Index k = 0; k < momentum.rows(); ++k) {
    const double a = alphas[k];
    out.row(k) = a * momentum.row(k) + (1.0 - a) * feature.transpose();
  }
  return out;
}

double cutoff_frequency(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    std::ostringstream msg;
    msg << "cutoff_frequency: alpha = " << alpha << " is outside (0, 1)";
    throw DomainError(msg.str());
  }
  const double one_minus = 1.0 - alpha;
  // For alpha < 3 - 2*sqrt(2) the response never falls to half power below
  // Nyquist; the argument leaves [-1, 1] and the whole band is passed.
  const double arg =
      std::clamp(1.0 - one_minus * one_minus / (2.0 * alpha), -1.0, 1.0);
  return std::acos(arg) / (2.0 * std::numbers::pi);
}

double cutoff_period(double alpha) { return 1.0 / cutoff_frequency(alpha); }

Vector alpha_powers(double alpha, int n) {
  Vector p(n + 1);
  p[0] = 1.0;
  for (int i = 1; i <= n; ++i) p[i] = p[i - 1] * alpha;
  return p;
}

UnfoldingMatrix build_unfolding_matrix(const Vector& alphas, int batch_length) {
  if (batch_length < 1) {
    throw DomainError("build_unfolding_matrix: batch length must be >= 1");
  }
  check_alpha_range(alphas);
  const int n = batch_length + 1;
  UnfoldingMatrix a;
  a.slices.reserve(static_cast<std::size_t>(alphas.size()));
  for (Eigen::Index k = 0; k < alphas.size(); ++k) {
    const double alpha = alphas[k];
    const Vector pw = alpha_powers(alpha, batch_length);
    Matrix s = Matrix::Zero(n, n);
    for (int p = 0; p < n; ++p) {
      s(p, 0) = pw[p];
      for (int q = 1; q <= p; ++q) s(p, q) = (1.0 - alpha) * pw[p - q];
    }
    a.slices.push_back(std::move(s));
  }
  return a;
}

UnfoldingMatrix unfolding_matrix_derivative(const Vector& alphas,
                                            int batch_length) {
  if (batch_length < 1) {
    throw DomainError("unfolding_matrix_derivative: batch length must be >= 1");
  }
  check_alpha_range(alphas);
  const int n = batch_length + 1;
  UnfoldingMatrix d;
  d.slices.reserve(static_cast<std::size_t>(alphas.size()));
  for (Eigen::Index k = 0; k < alphas.size(); ++k) {
    const double alpha = alphas[k];
    const Vector pw = alpha_powers(alpha, batch_length);
    // d/da a^m = m a^(m-1); d/da (1-a) a^m = -a^m + (1-a) m a^(m-1)
    Vector dpw(n);
    dpw[0] = 0.0;
    for (int m = 1; m < n; ++m) dpw[m] = m * pw[m - 1];
    Matrix s = Matrix::Zero(n, n);
    for (int p = 0; p < n; ++p) {
      s(p, 0) = dpw[p];
      for (int q = 1; q <= p; ++q) {
        s(p, q) = -pw[p - q] + (1.0 - alpha) * dpw[p - q];
      }
    }
    d.slices.push_back(std::move(s));
  }
  return d;
}

std::vector<Matrix> unfold(const UnfoldingMatrix& unfolding,
                           const Matrix& initial, const Matrix& features) {
  const int k_count = unfolding.factors();
  const int b = unfolding.batch_length();
  if (initial.rows() != k_count || features.rows() != b ||
      initial.cols() != features.cols()) {
    std::ostringstream msg;
    msg << "unfold: expected initial " << k_count << "xD and features " << b
        << "xD, got " << initial.rows() << "x" << initial.cols() << " and "
        << features.rows() << "x" << features.cols();
    throw DimensionError(msg.str());
  }
  std::vector<Matrix> traj;
  traj.reserve(static_cast<std::size_t>(k_count));
  Matrix stacked(b + 1, features.cols());
  stacked.bottomRows(b) = features;
  for (int k = 0; k < k_count; ++k) {
    stacked.row(0) = initial.row(k);
    traj.emplace_back(
        unfolding.slices[static_cast<std::size_t>(k)]
            .triangularView<Eigen::Lower>() *
        stacked);
  }
  return traj;
}

std::vector<Matrix> batched_momentum(const Matrix& initial,
                                     const Matrix& features,
                                     const Vector& alphas) {
  if (features.rows() < 1) {
    throw DimensionError("batched_momentum: empty feature batch");
  }
  if (initial.rows() != alphas.size() || initial.cols() != features.cols()) {
    std::ostringstream msg;
    msg << "batched_momentum: momentum is " << initial.rows() << "x"
        << initial.cols() << ", expected " << alphas.size() << "x"
        << features.cols();
    throw DimensionError(msg.str());
  }
  const auto a = build_unfolding_matrix(alphas, static_cast<int>(features.rows()));
  const auto traj = unfold(a, initial, features);
  const auto steps = features.rows() + 1;
  std::vector<Matrix> out(static_cast<std::size_t>(steps),
                          Matrix(initial.rows(), initial.cols()));
  for (Eigen::Index k = 0; k < initial.rows(); ++k) {
    const Matrix& tk = traj[static_cast<std::size_t>(k)];
    for (Eigen::Index p = 0; p < steps; ++p) {
      out[static_cast<std::size_t>(p)].row(k) = tk.row(p);
    }
  }
  return out;
}

}  // namespace bsa::ema
