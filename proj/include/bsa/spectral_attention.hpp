#pragma once

#include <cstdint>
#include <optional>

#include "bsa/ema_filter.hpp"
#include "bsa/tensor.hpp"

namespace bsa {

struct SpectralAttentionOptions {
  // Zero gradient to the smoothing parameters when false.
  bool learn_smoothing = true;
  // When false every sample sees its momentum as a constant: values are
  // unchanged, but no gradient crosses sample boundaries.
  bool batched_bptt = true;
  // Index-space std of the Gaussian SA-matrix initialisation; <= 0 picks K/2.
  double sigma_idx = 0.0;
};

// Everything backward() needs from one training forward.
struct SAForwardTape {
  std::uint64_t generation = 0;
  bool batched_bptt = true;
  // D entries, each B x W.
  ChannelBatch inputs;
  // (2K+1) x D softmax of the SA-matrix.
  Matrix weights;
  Vector alphas;
  ema::UnfoldingMatrix unfolding;
  // K x D momentum carried in from the previous batch (detached).
  Matrix carry_in;
  // K entries of (B+1) x D, row p = momentum after p updates.
  std::vector<Matrix> trajectory;
};

struct SAGradients {
  Matrix sa_matrix;     // (2K+1) x D
  Vector raw_smoothing;  // K
  ChannelBatch inputs;   // D entries, each B x W
};

struct SAForward {
  ChannelBatch output;
  std::optional<SAForwardTape> tape;
};

// Spectral attention over a bank of K EMA filters and D features.
//
// For a feature value x of feature i whose momentum bank row is M[., i], the
// output is a softmax-weighted sum over 2K+1 frequency slots:
//   slot j <  K : 2 * (x - M[K-1-j, i])    (high-pass, reversed factor order)
//   slot j == K : x                        (identity)
//   slot j >  K : 2 * M[j-K-1, i]          (low-pass)
// with weights softmax(sa_matrix[:, i]). Any SA-matrix that is symmetric
// about row K makes the module the identity map.
//
// Inputs are windows: feature i of sample b is a row of W values. The last
// value of each row drives the momentum stream (one EMA update per sample);
// the attention recombination is applied to every value in the row using the
// momentum *before* that sample's update. W = 1 gives the plain per-sample
// feature-vector form.
class SpectralAttention {
 public:
  SpectralAttention(int factors, int features, const Vector& alphas,
                    SpectralAttentionOptions options = {});

  static Matrix init_gaussian(int factors, int features, double sigma_idx);
  static double default_sigma_idx(int factors) { return 0.5 * factors; }

  // (2K+1) x D components for one feature vector f (D) and momentum (K x D).
  static Matrix decompose(const Vector& feature, const Matrix& momentum);

  int factors() const { return factors_; }
  int features() const { return features_; }
  const SpectralAttentionOptions& options() const { return options_; }
  void set_learn_smoothing(bool on) { options_.learn_smoothing = on; }
  void set_batched_bptt(bool on) { options_.batched_bptt = on; }

  const Matrix& sa_matrix() const { return sa_matrix_; }
  Matrix& sa_matrix() { return sa_matrix_; }
  const Vector& raw_smoothing() const { return raw_smoothing_; }
  Vector& raw_smoothing() { return raw_smoothing_; }

  // sigmoid(raw_smoothing)
  Vector smoothing_factors() const;
  // Sets raw_smoothing to logit(alphas); alphas must be strictly increasing.
  void set_smoothing(const Vector& alphas);
  Matrix attention_weights() const;

  bool has_momentum() const { return momentum_.has_value(); }
  const Matrix& momentum() const;
  void set_momentum(const Matrix& momentum);
  void clear_momentum() { momentum_.reset(); }
  // Every bank row starts at f0.
  void init_momentum(const Vector& f0);

  // Advances the carried momentum by B samples. A tape is returned only when
  // training is set.
  SAForward forward(const ChannelBatch& windows, bool training);
  SAGradients backward(const SAForwardTape& tape,
                       const ChannelBatch& grad_output) const;

  // Plain feature-vector form: F_batch and the result are B x D.
  struct BatchedForward {
    Matrix output;
    std::optional<SAForwardTape> tape;
  };
  BatchedForward forward_batched(const Matrix& features, bool training);
  struct BatchedGradients {
    Matrix sa_matrix;
    Vector raw_smoothing;
    Matrix features;
  };
  BatchedGradients backward_batched(const SAForwardTape& tape,
                                    const Matrix& grad_output) const;

  std::uint64_t generation() const { return generation_; }

 private:
  int factors_;
  int features_;
  SpectralAttentionOptions options_;
  Matrix sa_matrix_;
  Vector raw_smoothing_;
  std::optional<Matrix> momentum_;
  std::uint64_t generation_ = 0;
};

double sigmoid(double x);
double logit(double p);

}  // namespace bsa
