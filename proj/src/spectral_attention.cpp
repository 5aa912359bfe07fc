#include "bsa/spectral_attention.hpp"

#include <cmath>
#include <sstream>

#include "bsa/errors.hpp"

namespace bsa {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) { return std::log(p) - std::log1p(-p); }

SpectralAttention::SpectralAttention(int factors, int features,
                                     const Vector& alphas,
                                     SpectralAttentionOptions options)
    : factors_(factors), features_(features), options_(options) {
  if (factors < 1 || features < 1) {
    throw DomainError("SpectralAttention: K and D must both be >= 1");
  }
  if (alphas.size() != factors) {
    std::ostringstream msg;
    msg << "SpectralAttention: " << alphas.size()
        << " smoothing factors given for K = " << factors;
    throw DimensionError(msg.str());
  }
  if (options_.sigma_idx <= 0.0) options_.sigma_idx = default_sigma_idx(factors);
  sa_matrix_ = init_gaussian(factors, features, options_.sigma_idx);
  set_smoothing(alphas);
}

Matrix SpectralAttention::init_gaussian(int factors, int features,
                                        double sigma_idx) {
  if (factors < 1 || features < 1 || !(sigma_idx > 0.0)) {
    throw DomainError("init_gaussian: need K >= 1, D >= 1, sigma_idx > 0");
  }
  Matrix m(2 * factors + 1, features);
  const double denom = 2.0 * sigma_idx * sigma_idx;
  for (int j = 0; j <= 2 * factors; ++j) {
    const double off = static_cast<double>(j - factors);
    m.row(j).setConstant(-(off * off) / denom);
  }
  return m;
}

Matrix SpectralAttention::decompose(const Vector& feature,
                                    const Matrix& momentum) {
  if (momentum.cols() != feature.size() || momentum.rows() < 1) {
    std::ostringstream msg;
    msg << "decompose: momentum " << momentum.rows() << "x" << momentum.cols()
        << " does not match feature of size " << feature.size();
    throw DimensionError(msg.str());
  }
  const auto k_count = momentum.rows();
  Matrix out(2 * k_count + 1, feature.size());
  for (Eigen::Index j = 0; j < k_count; ++j) {
    out.row(j) = 2.0 * (feature.transpose() - momentum.row(k_count - 1 - j));
  }
  out.row(k_count) = feature.transpose();
  for (Eigen::Index k = 0; k < k_count; ++k) {
    out.row(k_count + 1 + k) = 2.0 * momentum.row(k);
  }
  return out;
}

Vector SpectralAttention::smoothing_factors() const {
  return raw_smoothing_.unaryExpr([](double r) { return sigmoid(r); });
}

void SpectralAttention::set_smoothing(const Vector& alphas) {
  if (alphas.size() != factors_) {
    throw DimensionError("set_smoothing: wrong number of smoothing factors");
  }
  ema::check_smoothing_factors(alphas);
  raw_smoothing_ = alphas.unaryExpr([](double a) { return logit(a); });
  ++generation_;
}

Matrix SpectralAttention::attention_weights() const {
  Matrix w(sa_matrix_.rows(), sa_matrix_.cols());
  for (Eigen::Index i = 0; i < sa_matrix_.cols(); ++i) {
    const double mx = sa_matrix_.col(i).maxCoeff();
    w.col(i) = (sa_matrix_.col(i).array() - mx).exp();
    w.col(i) /= w.col(i).sum();
  }
  return w;
}

const Matrix& SpectralAttention::momentum() const {
  if (!momentum_) throw StateError("spectral attention momentum is not initialized");
  return *momentum_;
}

void SpectralAttention::set_momentum(const Matrix& momentum) {
  if (momentum.rows() != factors_ || momentum.cols() != features_) {
    throw DimensionError("set_momentum: momentum must be K x D");
  }
  if (!momentum.allFinite()) throw DomainError("set_momentum: non-finite momentum");
  momentum_ = momentum;
  ++generation_;
}

void SpectralAttention::init_momentum(const Vector& f0) {
  if (f0.size() != features_) {
    throw DimensionError("init_momentum: feature size does not match D");
  }
  if (!f0.allFinite()) throw DomainError("init_momentum: non-finite feature");
  momentum_ = f0.transpose().replicate(factors_, 1);
  ++generation_;
}

namespace {

void check_windows(const ChannelBatch& windows, int features) {
  if (static_cast<int>(windows.size()) != features) {
    std::ostringstream msg;
    msg << "spectral attention expects " << features << " features, got "
        << windows.size();
    throw DimensionError(msg.str());
  }
  const auto rows = windows.front().rows();
  const auto cols = windows.front().cols();
  if (rows < 1 || cols < 1) throw DimensionError("spectral attention: empty batch");
  for (const auto& w : windows) {
    if (w.rows() != rows || w.cols() != cols) {
      throw DimensionError("spectral attention: ragged feature windows");
    }
  }
}

}  // namespace

SAForward SpectralAttention::forward(const ChannelBatch& windows,
                                     bool training) {
  if (!momentum_) throw StateError("forward: momentum is not initialized");
  check_windows(windows, features_);
  const int batch = static_cast<int>(windows.front().rows());
  const auto last = windows.front().cols() - 1;
  const int k_count = factors_;

  Matrix stream(batch, features_);
  for (int i = 0; i < features_; ++i) stream.col(i) = windows[i].col(last);

  const Vector alphas = smoothing_factors();
  auto unfolding = ema::build_unfolding_matrix(alphas, batch);
  auto trajectory = ema::unfold(unfolding, *momentum_, stream);
  const Matrix weights = attention_weights();

  SAForward result;
  result.output.reserve(windows.size());
  for (int i = 0; i < features_; ++i) {
    double direct = weights(k_count, i);
    for (int j = 0; j < k_count; ++j) direct += 2.0 * weights(j, i);
    Vector offset = Vector::Zero(batch);
    for (int m = 0; m < k_count; ++m) {
      const double coef =
          2.0 * (weights(k_count + 1 + m, i) - weights(k_count - 1 - m, i));
      offset += coef * trajectory[m].col(i).head(batch);
    }
    Matrix out = direct * windows[i];
    out.colwise() += offset;
    result.output.push_back(std::move(out));
  }

  Matrix carry(k_count, features_);
  for (int m = 0; m < k_count; ++m) carry.row(m) = trajectory[m].row(batch);

  ++generation_;
  if (training) {
    SAForwardTape tape;
    tape.generation = generation_;
    tape.batched_bptt = options_.batched_bptt;
    tape.inputs = windows;
    tape.weights = weights;
    tape.alphas = alphas;
    tape.unfolding = std::move(unfolding);
    tape.carry_in = *momentum_;
    tape.trajectory = std::move(trajectory);
    result.tape = std::move(tape);
  }
  momentum_ = std::move(carry);
  return result;
}

SAGradients SpectralAttention::backward(const SAForwardTape& tape,
                                        const ChannelBatch& grad_output) const {
  if (tape.generation == 0 || tape.generation != generation_) {
    throw StateError("backward: tape is stale (module state moved on since the forward)");
  }
  check_windows(grad_output, features_);
  const int batch = static_cast<int>(tape.inputs.front().rows());
  const auto width = tape.inputs.front().cols();
  if (grad_output.front().rows() != batch || grad_output.front().cols() != width) {
    throw DimensionError("backward: gradient shape does not match the forward input");
  }
  const int k_count = factors_;
  const Matrix& w = tape.weights;

  SAGradients g;
  g.sa_matrix = Matrix::Zero(2 * k_count + 1, features_);
  g.raw_smoothing = Vector::Zero(k_count);
  g.inputs.reserve(grad_output.size());

  // d loss / d trajectory[m](p, i); row B (the carry) never feeds an output.
  std::vector<Matrix> d_traj(static_cast<std::size_t>(k_count),
                             Matrix::Zero(batch + 1, features_));

  for (int i = 0; i < features_; ++i) {
    const Matrix& x = tape.inputs[i];
    const Matrix& go = grad_output[i];
    double direct = w(k_count, i);
    for (int j = 0; j < k_count; ++j) direct += 2.0 * w(j, i);

    const Vector row_sum = go.rowwise().sum();
    const double d_direct = (go.array() * x.array()).sum();
    Vector d_coef(k_count);
    for (int m = 0; m < k_count; ++m) {
      d_coef[m] = row_sum.dot(tape.trajectory[m].col(i).head(batch));
      const double coef = 2.0 * (w(k_count + 1 + m, i) - w(k_count - 1 - m, i));
      d_traj[m].col(i).head(batch) = coef * row_sum;
    }

    // d loss / d softmax weight
    Vector dw(2 * k_count + 1);
    for (int j = 0; j < k_count; ++j) {
      dw[j] = 2.0 * d_direct - 2.0 * d_coef[k_count - 1 - j];
    }
    dw[k_count] = d_direct;
    for (int m = 0; m < k_count; ++m) dw[k_count + 1 + m] = 2.0 * d_coef[m];
    const double inner = dw.dot(w.col(i));
    g.sa_matrix.col(i) = w.col(i).array() * (dw.array() - inner);

    g.inputs.push_back(direct * go);
  }

  if (!tape.batched_bptt) return g;

  // Back through the unfolding: trajectory_k = A_k * [carry_k; stream].
  const auto d_unfold = ema::unfolding_matrix_derivative(tape.alphas, batch);
  Matrix stacked(batch + 1, features_);
  for (int i = 0; i < features_; ++i) {
    stacked.col(i).tail(batch) = tape.inputs[i].col(width - 1);
  }
  Matrix d_stream = Matrix::Zero(batch, features_);
  for (int k = 0; k < k_count; ++k) {
    stacked.row(0) = tape.carry_in.row(k);
    const Matrix& a = tape.unfolding.slices[k];
    const Matrix d_stacked =
        a.triangularView<Eigen::Lower>().transpose() * d_traj[k];
    // Row 0 is the detached carry; its gradient is dropped.
    d_stream += d_stacked.bottomRows(batch);
    if (options_.learn_smoothing) {
      const Matrix da_c =
          d_unfold.slices[k].triangularView<Eigen::Lower>() * stacked;
      const double d_alpha = (da_c.array() * d_traj[k].array()).sum();
      const double alpha = tape.alphas[k];
      g.raw_smoothing[k] = d_alpha * alpha * (1.0 - alpha);
    }
  }
  for (int i = 0; i < features_; ++i) {
    g.inputs[i].col(width - 1) += d_stream.col(i);
  }
  return g;
}

SpectralAttention::BatchedForward SpectralAttention::forward_batched(
    const Matrix& features, bool training) {
  if (features.cols() != features_) {
    throw DimensionError("forward_batched: feature batch must be B x D");
  }
  ChannelBatch windows;
  windows.reserve(static_cast<std::size_t>(features_));
  for (int i = 0; i < features_; ++i) windows.emplace_back(features.col(i));
  auto fwd = forward(windows, training);
  BatchedForward out;
  out.output.resize(features.rows(), features_);
  for (int i = 0; i < features_; ++i) out.output.col(i) = fwd.output[i].col(0);
  out.tape = std::move(fwd.tape);
  return out;
}

SpectralAttention::BatchedGradients SpectralAttention::backward_batched(
    const SAForwardTape& tape, const Matrix& grad_output) const {
  if (grad_output.cols() != features_) {
    throw DimensionError("backward_batched: gradient must be B x D");
  }
  ChannelBatch go;
  go.reserve(static_cast<std::size_t>(features_));
  for (int i = 0; i < features_; ++i) go.emplace_back(grad_output.col(i));
  auto g = backward(tape, go);
  BatchedGradients out;
  out.sa_matrix = std::move(g.sa_matrix);
  out.raw_smoothing = std::move(g.raw_smoothing);
  out.features.resize(grad_output.rows(), features_);
  for (int i = 0; i < features_; ++i) out.features.col(i) = g.inputs[i].col(0);
  return out;
}

}  // namespace bsa
