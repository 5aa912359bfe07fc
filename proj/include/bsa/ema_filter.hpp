#pragma once

#include <vector>

#include "bsa/tensor.hpp"

// Exponential moving average filter bank.
//
// A bank holds K smoothing factors alpha_1 < ... < alpha_K and a K x D
// momentum matrix M (row k = EMA of the D-dimensional feature stream under
// alpha_k). Feeding a feature F advances every row by
//
//   M[k] <- alpha_k * M[k] + (1 - alpha_k) * F
//
// B consecutive updates can be written as a single lower-triangular
// contraction ("unfolding") over the concatenation [M_t; F_0; ...; F_{B-1}],
// which is what batched_momentum computes.
namespace bsa::ema {

// Throws DomainError unless every entry lies in the open interval (0, 1).
void check_alpha_range(const Vector& alphas);

// Range check plus strict monotonicity; used where a bank is constructed.
void check_smoothing_factors(const Vector& alphas);

// One EMA step for every factor. momentum is K x D, feature has D entries.
Matrix ema_update(const Matrix& momentum, const Vector& feature,
                  const Vector& alphas);

// -3 dB cut-off of the one-pole low-pass filter, in cycles per step.
double cutoff_frequency(double alpha);
double cutoff_period(double alpha);

// alpha^0 .. alpha^n by repeated multiplication.
Vector alpha_powers(double alpha, int n);

// K slices of size (B+1) x (B+1); slice k row p holds the coefficients that
// produce M_{t+p} from [M_t; F_t; ...; F_{t+B-1}]:
//   A[k](p, 0) = alpha_k^p
//   A[k](p, q) = (1 - alpha_k) * alpha_k^(p - q)    for 1 <= q <= p
//   A[k](p, q) = 0                                  for q > p
struct UnfoldingMatrix {
  std::vector<Matrix> slices;

  int factors() const { return static_cast<int>(slices.size()); }
  int batch_length() const {
    return slices.empty() ? 0 : static_cast<int>(slices.front().rows()) - 1;
  }
};

UnfoldingMatrix build_unfolding_matrix(const Vector& alphas, int batch_length);

// Element-wise derivative of every slice with respect to its alpha_k.
UnfoldingMatrix unfolding_matrix_derivative(const Vector& alphas,
                                            int batch_length);

// Momentum trajectory per factor: entry k is (B+1) x D with row p = M_{t+p}.
// initial is K x D, features is B x D.
std::vector<Matrix> unfold(const UnfoldingMatrix& unfolding,
                           const Matrix& initial, const Matrix& features);

// The same trajectory reorganised time-major: entry b is the K x D momentum
// after b updates. Entry 0 is the initial momentum, entry B the carry for the
// next batch.
std::vector<Matrix> batched_momentum(const Matrix& initial,
                                     const Matrix& features,
                                     const Vector& alphas);

}  // namespace bsa::ema
