#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bsa/spectral_attention.hpp"
#include "bsa/tensor.hpp"

namespace bsa {

// Replicate-padded centred moving average of width `window` (odd) and the
// remainder: x = seasonal + trend.
struct Decomposition {
  Vector seasonal;
  Vector trend;
};
Decomposition series_decompose(const Vector& x, int window);

// L x L operator with trend = T * x for the decomposition above.
Matrix moving_average_operator(int length, int window);

// Per-channel instance statistics over a look-back window.
struct RevinStats {
  Vector mean;  // N
  Vector stdev;  // N, population standard deviation
};
inline constexpr double kRevinEps = 1e-5;

struct RevinResult {
  Matrix normalized;  // L x N
  RevinStats stats;
};
RevinResult revin_normalize(const Matrix& x);
Matrix revin_denormalize(const RevinStats& stats, const Matrix& y);

enum class ModelKind { dlinear, rlinear };
std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct ForecastShape {
  int lookback = 96;
  int horizon = 96;
  int channels = 1;
};

// Model-specific values kept between forward and backward.
struct DLinearCache {
  ChannelBatch seasonal;
  ChannelBatch trend;
};
struct RLinearCache {
  std::vector<Vector> mean;   // per channel, B
  std::vector<Vector> stdev;  // per channel, B
  ChannelBatch centered;      // x - mean
  ChannelBatch mixed;         // linear-layer input (after attention)
  ChannelBatch linear_out;
};

struct ForecastTape {
  std::uint64_t generation = 0;
  std::variant<DLinearCache, RLinearCache> cache;
  std::optional<SAForwardTape> attention;
};

struct ForecastForward {
  ChannelBatch prediction;  // N entries, each B x S
  std::optional<ForecastTape> tape;
};

struct ForecastGradients {
  std::vector<Matrix> parameters;  // same order as Forecaster::parameters()
  std::optional<SAGradients> attention;
  ChannelBatch inputs;  // N entries, each B x L
};

// Channel-independent linear forecaster. Inputs are N matrices of B x L
// look-back windows; predictions are N matrices of B x S.
//
// An optional SpectralAttention module (D = N) is applied inside forward():
// DLinear applies it to the raw window before decomposition, RLinear right
// after instance normalisation and before the linear layer.
class Forecaster {
 public:
  explicit Forecaster(ForecastShape shape) : shape_(shape) {}
  virtual ~Forecaster() = default;

  virtual ModelKind kind() const = 0;
  virtual std::unique_ptr<Forecaster> clone() const = 0;

  const ForecastShape& shape() const { return shape_; }

  // Uniform(-1/sqrt(L), 1/sqrt(L)) weights, zero biases.
  virtual void init_parameters(std::mt19937_64& rng) = 0;

  virtual std::vector<Matrix*> parameters() = 0;
  std::vector<const Matrix*> parameters() const;
  virtual std::vector<std::string> parameter_names() const = 0;

  ForecastForward forward(const ChannelBatch& inputs,
                          SpectralAttention* attention, bool training);
  ForecastGradients backward(const ForecastTape& tape,
                             const ChannelBatch& grad_output,
                             const SpectralAttention* attention) const;

  // The values the attention module would see for these inputs (the input
  // of the insertion point).
  virtual ChannelBatch attention_input(const ChannelBatch& inputs) const = 0;

 protected:
  virtual ForecastForward do_forward(const ChannelBatch& inputs,
                                     SpectralAttention* attention,
                                     bool training) = 0;
  virtual ForecastGradients do_backward(const ForecastTape& tape,
                                        const ChannelBatch& grad_output,
                                        const SpectralAttention* attention) const = 0;
  void check_inputs(const ChannelBatch& inputs) const;

  ForecastShape shape_;
  std::uint64_t generation_ = 0;
};

class DLinearModel final : public Forecaster {
 public:
  explicit DLinearModel(ForecastShape shape, int ma_window = 25);

  ModelKind kind() const override { return ModelKind::dlinear; }
  std::unique_ptr<Forecaster> clone() const override;
  void init_parameters(std::mt19937_64& rng) override;
  std::vector<Matrix*> parameters() override;
  using Forecaster::parameters;
  std::vector<std::string> parameter_names() const override;
  ChannelBatch attention_input(const ChannelBatch& inputs) const override;

  int ma_window() const { return ma_window_; }
  // Per channel: L x S seasonal weights, L x S trend weights, 1 x S bias.
  std::vector<Matrix>& seasonal_weights() { return seasonal_; }
  std::vector<Matrix>& trend_weights() { return trend_; }
  std::vector<Matrix>& biases() { return bias_; }

 protected:
  ForecastForward do_forward(const ChannelBatch& inputs,
                             SpectralAttention* attention,
                             bool training) override;
  ForecastGradients do_backward(const ForecastTape& tape,
                                const ChannelBatch& grad_output,
                                const SpectralAttention* attention) const override;

 private:
  int ma_window_;
  Matrix trend_op_;  // L x L
  std::vector<Matrix> seasonal_;
  std::vector<Matrix> trend_;
  std::vector<Matrix> bias_;
};

class RLinearModel final : public Forecaster {
 public:
  explicit RLinearModel(ForecastShape shape);

  ModelKind kind() const override { return ModelKind::rlinear; }
  std::unique_ptr<Forecaster> clone() const override;
  void init_parameters(std::mt19937_64& rng) override;
  std::vector<Matrix*> parameters() override;
  using Forecaster::parameters;
  std::vector<std::string> parameter_names() const override;
  ChannelBatch attention_input(const ChannelBatch& inputs) const override;

  // Per channel: L x S weights, 1 x S bias.
  std::vector<Matrix>& weights() { return weight_; }
  std::vector<Matrix>& biases() { return bias_; }

 protected:
  ForecastForward do_forward(const ChannelBatch& inputs,
                             SpectralAttention* attention,
                             bool training) override;
  ForecastGradients do_backward(const ForecastTape& tape,
                                const ChannelBatch& grad_output,
                                const SpectralAttention* attention) const override;

 private:
  std::vector<Matrix> weight_;
  std::vector<Matrix> bias_;
};

std::unique_ptr<Forecaster> make_forecaster(ModelKind kind, ForecastShape shape,
                                            int ma_window = 25);

}  // namespace bsa
