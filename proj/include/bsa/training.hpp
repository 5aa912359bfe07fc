#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bsa/data.hpp"
#include "bsa/forecasters.hpp"
#include "bsa/spectral_attention.hpp"

namespace bsa {

// A base forecaster with an optional spectral attention module at its input.
struct Pipeline {
  std::unique_ptr<Forecaster> model;
  std::optional<SpectralAttention> attention;

  Pipeline() = default;
  Pipeline(std::unique_ptr<Forecaster> m, std::optional<SpectralAttention> a = {})
      : model(std::move(m)), attention(std::move(a)) {}
  Pipeline(const Pipeline& other);
  Pipeline& operator=(const Pipeline& other);
  Pipeline(Pipeline&&) noexcept = default;
  Pipeline& operator=(Pipeline&&) noexcept = default;

  SpectralAttention* attention_ptr() { return attention ? &*attention : nullptr; }
  const SpectralAttention* attention_ptr() const {
    return attention ? &*attention : nullptr;
  }

  ForecastForward forward(const ChannelBatch& inputs, bool training) {
    return model->forward(inputs, attention_ptr(), training);
  }
  ForecastGradients backward(const ForecastTape& tape, const ChannelBatch& grad) const {
    return model->backward(tape, grad, attention_ptr());
  }

  // Momentum seed for the stream starting at this window: the attention
  // input at the window's last position, sample 0 of `inputs`.
  Vector momentum_seed(const ChannelBatch& inputs) const;
};

// Attaches an identity-initialised attention module (D = channel count).
void attach_attention(Pipeline& pipeline, const Vector& alphas,
                      SpectralAttentionOptions options = {});

// ------------------------------------------------------------------ Adam

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  long step = 0;
};

// One bias-corrected Adam update of every tensor in `params`. Throws
// NumericError, naming the tensor and element, on a non-finite gradient.
void adam_step(const std::vector<std::span<double>>& params,
               const std::vector<std::span<const double>>& grads, AdamState& state,
               double lr, const AdamConfig& config = {},
               const std::vector<std::string>& names = {});

// ------------------------------------------------------------------ schedule

// ceil(1 / (1 - max alpha)) data timesteps.
long warmup_timesteps(const Vector& alphas);
// Timesteps converted to optimizer steps of `batch` samples (rounded up).
long warmup_steps(const Vector& alphas, int batch);
// base_lr * min(1, (step + 1) / warmup_steps); step counts batches since the
// start of the epoch.
double warmup_schedule(const Vector& alphas, double base_lr, long step, int batch);

// 0.5 + 0.5 * sin(pi/2 * idx / len)
double validation_weight(long idx, long len);
// sum(w_i * loss_i) / sum(w_i) with w_i = validation_weight(i, val_len).
double weighted_validation(std::span<const double> losses, long val_len);

// ------------------------------------------------------------------ training

struct TrainConfig {
  double lr_model = 3e-4;
  double lr_sa_matrix = 0.03;
  double lr_smoothing = 3e-3;  // 0 freezes the smoothing factors
  int epochs = 20;
  int batch = 256;
  bool warmup = true;
  bool shuffle_pretrain = false;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double weighted_val_loss = 0.0;
  double val_loss = 0.0;
  long train_samples = 0;  // samples that entered the training loss
  long val_samples = 0;    // samples that entered the validation loss
  long momentum_only_samples = 0;
  Vector alphas;  // smoothing factors after the epoch (empty without attention)
};

struct ParamGroup {
  std::string name;
  double lr = 0.0;
  AdamState state;
};

struct TrainRun {
  std::vector<EpochRecord> epochs;
  std::vector<ParamGroup> groups;
  std::optional<Pipeline> best;
  int best_epoch = -1;
  double best_weighted_val = 0.0;
  long optimizer_steps = 0;
};

double mse_loss(const ChannelBatch& prediction, const ChannelBatch& target);
ChannelBatch mse_gradient(const ChannelBatch& prediction, const ChannelBatch& target);
// Mean squared error of each sample over its S x N targets.
std::vector<double> per_sample_mse(const ChannelBatch& prediction,
                                   const ChannelBatch& target);

// Seeds the momentum from the first training window.
void init_epoch_momentum(Pipeline& pipeline, const Matrix& values,
                         const ConsecutiveSplit& split, const WindowSpec& spec);

// Runs every sample in `range` through the pipeline without scoring it;
// only the attention momentum changes.
void forward_momentum_only(Pipeline& pipeline, const Matrix& values,
                           const IndexRange& range, const WindowSpec& spec);

// One epoch: momentum reset, sequential training batches with per-group Adam
// steps, the momentum-only gap, then the weighted validation pass. Updates
// run.best when the weighted validation loss improves.
EpochRecord train_epoch(Pipeline& pipeline, const Matrix& values,
                        const ConsecutiveSplit& split, const WindowSpec& spec,
                        const TrainConfig& config, TrainRun& run,
                        std::mt19937_64& rng);

// config.epochs epochs; the pipeline is left at the best epoch's parameters.
TrainRun fit(Pipeline& pipeline, const Matrix& values, const ConsecutiveSplit& split,
             const WindowSpec& spec, const TrainConfig& config,
             const std::function<void(const EpochRecord&)>& on_epoch = {});

// Base-model learning rates tried when saturating a forecaster before
// fine-tuning.
inline const std::vector<double> kPretrainLrGrid{0.03, 0.01, 0.003, 0.001, 0.0003};

struct LrTrial {
  double lr = 0.0;
  double best_weighted_val = 0.0;
  int best_epoch = -1;
};

struct LrSearch {
  double lr = 0.0;
  std::vector<LrTrial> trials;
  TrainRun run;  // run of the selected learning rate
};

// fit() from the same starting pipeline at every learning rate in `grid`
// (config.lr_model is ignored); keeps the run with the lowest best-epoch
// weighted validation loss and leaves `pipeline` at its best parameters.
LrSearch search_learning_rate(Pipeline& pipeline, const Matrix& values,
                              const ConsecutiveSplit& split, const WindowSpec& spec,
                              const TrainConfig& config, const std::vector<double>& grid);

enum class SplitPart { val, test };

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
  Vector mse_per_step;  // S
  Vector mae_per_step;  // S
  long samples = 0;
  std::vector<double> sample_mse;
};

// Scores the val or test samples. With attention the momentum stream is
// replayed from the first training sample through every earlier sample
// (train, gaps, validation) first; those samples are never scored.
Metrics evaluate(Pipeline& pipeline, const Matrix& values, const ConsecutiveSplit& split,
                 const WindowSpec& spec, SplitPart part);

// ------------------------------------------------------------------ gradcheck

struct GradCoordinate {
  std::string name;
  std::span<double> values;
  std::span<const double> analytic;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_name;
  long worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  long coordinates = 0;
  bool pass = true;
};

// Relative error |a - n| / max(|a|, |n|, floor).
inline constexpr double kGradCheckFloor = 1e-4;

// Central differences of `loss` over every coordinate.
GradCheckReport check_gradients(const std::function<double()>& loss,
                                const std::vector<GradCoordinate>& coords, double h,
                                double tol);

// Applied to the analytic gradients before comparison (fault injection).
using GradientHook = std::function<void(ForecastGradients&)>;

// MSE of `batch` through the full pipeline, differentiated w.r.t. model
// weights, SA-matrix, raw smoothing parameters and inputs. `initial_momentum`
// is restored before every evaluation (required when attention is attached).
GradCheckReport gradcheck(Pipeline& pipeline, const ForecastBatch& batch,
                          const Matrix* initial_momentum, double h, double tol,
                          const GradientHook& hook = {});

}  // namespace bsa
