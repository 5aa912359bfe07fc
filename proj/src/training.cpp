#include "bsa/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "bsa/errors.hpp"

namespace bsa {

Pipeline::Pipeline(const Pipeline& other)
    : model(other.model ? other.model->clone() : nullptr), attention(other.attention) {}

Pipeline& Pipeline::operator=(const Pipeline& other) {
  if (this != &other) {
    model = other.model ? other.model->clone() : nullptr;
    attention = other.attention;
  }
  return *this;
}

Vector Pipeline::momentum_seed(const ChannelBatch& inputs) const {
  const auto feat = model->attention_input(inputs);
  Vector seed(static_cast<Eigen::Index>(feat.size()));
  for (std::size_t n = 0; n < feat.size(); ++n) {
    seed[static_cast<Eigen::Index>(n)] = feat[n](0, feat[n].cols() - 1);
  }
  return seed;
}

void attach_attention(Pipeline& pipeline, const Vector& alphas,
                      SpectralAttentionOptions options) {
  pipeline.attention.emplace(static_cast<int>(alphas.size()),
                             pipeline.model->shape().channels, alphas, options);
}

// ------------------------------------------------------------------ Adam

void adam_step(const std::vector<std::span<double>>& params,
               const std::vector<std::span<const double>>& grads, AdamState& state,
               double lr, const AdamConfig& config,
               const std::vector<std::string>& names) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step: parameter and gradient lists differ in length");
  }
  const bool fresh = state.first_moment.size() != params.size();
  if (fresh) {
    state.first_moment.clear();
    state.second_moment.clear();
    state.step = 0;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) {
      throw DimensionError("adam_step: parameter and gradient shapes differ");
    }
    if (fresh) {
      state.first_moment.emplace_back(params[i].size(), 0.0);
      state.second_moment.emplace_back(params[i].size(), 0.0);
    } else if (state.first_moment[i].size() != params[i].size()) {
      throw DimensionError("adam_step: optimizer state does not match parameters");
    }
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      if (!std::isfinite(grads[i][j])) {
        std::ostringstream msg;
        msg << "adam_step: non-finite gradient " << grads[i][j] << " in "
            << (i < names.size() ? names[i] : "tensor " + std::to_string(i))
            << " at element " << j << " (step " << state.step + 1 << ")";
        throw NumericError(msg.str());
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const double g = grads[i][j];
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      params[i][j] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

// ------------------------------------------------------------------ schedule

long warmup_timesteps(const Vector& alphas) {
  if (alphas.size() == 0) return 0;
  const double amax = alphas.maxCoeff();
  if (!(amax > 0.0 && amax < 1.0)) {
    throw DomainError("warmup_timesteps: smoothing factors must lie in (0, 1)");
  }
  // 1 / (1 - 0.999) evaluates to 1000.0000000000009; absorb that rounding.
  return static_cast<long>(std::ceil(1.0 / (1.0 - amax) - 1e-9));
}

long warmup_steps(const Vector& alphas, int batch) {
  if (batch < 1) throw DomainError("warmup_steps: batch must be >= 1");
  const long w = warmup_timesteps(alphas);
  return (w + batch - 1) / batch;
}

double warmup_schedule(const Vector& alphas, double base_lr, long step, int batch) {
  const long w = warmup_steps(alphas, batch);
  if (w <= 0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(w));
}

double validation_weight(long idx, long len) {
  if (len <= 0) return 1.0;
  return 0.5 + 0.5 * std::sin(std::numbers::pi / 2.0 * static_cast<double>(idx) /
                              static_cast<double>(len));
}

double weighted_validation(std::span<const double> losses, long val_len) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const double w = validation_weight(static_cast<long>(i), val_len);
    num += w * losses[i];
    den += w;
  }
  return den > 0.0 ? num / den : 0.0;
}

// ------------------------------------------------------------------ losses

double mse_loss(const ChannelBatch& prediction, const ChannelBatch& target) {
  double acc = 0.0;
  double count = 0.0;
  for (std::size_t n = 0; n < prediction.size(); ++n) {
    acc += (prediction[n] - target[n]).squaredNorm();
    count += static_cast<double>(prediction[n].size());
  }
  return acc / count;
}

ChannelBatch mse_gradient(const ChannelBatch& prediction, const ChannelBatch& target) {
  double count = 0.0;
  for (const auto& p : prediction) count += static_cast<double>(p.size());
  ChannelBatch g;
  g.reserve(prediction.size());
  for (std::size_t n = 0; n < prediction.size(); ++n) {
    g.push_back((2.0 / count) * (prediction[n] - target[n]));
  }
  return g;
}

std::vector<double> per_sample_mse(const ChannelBatch& prediction,
                                   const ChannelBatch& target) {
  const auto b = prediction.front().rows();
  std::vector<double> out(static_cast<std::size_t>(b), 0.0);
  double per = 0.0;
  for (std::size_t n = 0; n < prediction.size(); ++n) {
    const Vector rows = (prediction[n] - target[n]).rowwise().squaredNorm();
    for (Eigen::Index i = 0; i < b; ++i) out[static_cast<std::size_t>(i)] += rows[i];
    per += static_cast<double>(prediction[n].cols());
  }
  for (auto& v : out) v /= per;
  return out;
}

// ------------------------------------------------------------------ loops

void init_epoch_momentum(Pipeline& pipeline, const Matrix& values,
                         const ConsecutiveSplit& split, const WindowSpec& spec) {
  if (!pipeline.attention) return;
  const auto first = make_batch(values, IndexRange{split.train.first, split.train.first}, spec);
  pipeline.attention->init_momentum(pipeline.momentum_seed(first.inputs));
}

void forward_momentum_only(Pipeline& pipeline, const Matrix& values,
                           const IndexRange& range, const WindowSpec& spec) {
  if (!pipeline.attention || range.empty()) return;
  for (const auto& block : sequential_batches(range, spec.batch)) {
    const auto batch = make_batch(values, block, spec);
    pipeline.attention->forward(pipeline.model->attention_input(batch.inputs), false);
  }
}

namespace {

std::vector<std::span<double>> views(std::vector<Matrix*> params) {
  std::vector<std::span<double>> out;
  for (auto* p : params) out.emplace_back(p->data(), static_cast<std::size_t>(p->size()));
  return out;
}

std::vector<std::span<const double>> const_views(const std::vector<Matrix>& grads) {
  std::vector<std::span<const double>> out;
  for (const auto& g : grads) out.emplace_back(g.data(), static_cast<std::size_t>(g.size()));
  return out;
}

ParamGroup& group(TrainRun& run, const std::string& name, double lr) {
  for (auto& g : run.groups) {
    if (g.name == name) {
      g.lr = lr;
      return g;
    }
  }
  run.groups.push_back(ParamGroup{name, lr, {}});
  return run.groups.back();
}

void apply_update(Pipeline& pipeline, const ForecastGradients& grads,
                  const TrainConfig& config, double lr_scale, TrainRun& run) {
  auto& model_group = group(run, "model", config.lr_model);
  if (config.lr_model > 0.0) {
    adam_step(views(pipeline.model->parameters()), const_views(grads.parameters),
              model_group.state, config.lr_model * lr_scale, {},
              pipeline.model->parameter_names());
  }
  if (!pipeline.attention || !grads.attention) return;
  auto& att = *pipeline.attention;
  auto& sa_group = group(run, "sa_matrix", config.lr_sa_matrix);
  if (config.lr_sa_matrix > 0.0) {
    adam_step({std::span<double>(att.sa_matrix().data(),
                                 static_cast<std::size_t>(att.sa_matrix().size()))},
              {std::span<const double>(grads.attention->sa_matrix.data(),
                                       static_cast<std::size_t>(grads.attention->sa_matrix.size()))},
              sa_group.state, config.lr_sa_matrix * lr_scale, {}, {"sa_matrix"});
  }
  auto& sf_group = group(run, "smoothing", config.lr_smoothing);
  if (config.lr_smoothing > 0.0 && att.options().learn_smoothing) {
    adam_step({std::span<double>(att.raw_smoothing().data(),
                                 static_cast<std::size_t>(att.raw_smoothing().size()))},
              {std::span<const double>(grads.attention->raw_smoothing.data(),
                                       static_cast<std::size_t>(grads.attention->raw_smoothing.size()))},
              sf_group.state, config.lr_smoothing * lr_scale, {}, {"raw_smoothing"});
  }
}

}  // namespace

EpochRecord train_epoch(Pipeline& pipeline, const Matrix& values,
                        const ConsecutiveSplit& split, const WindowSpec& spec,
                        const TrainConfig& config, TrainRun& run,
                        std::mt19937_64& rng) {
  EpochRecord rec;
  rec.epoch = static_cast<int>(run.epochs.size());
  const bool with_attention = pipeline.attention.has_value();
  init_epoch_momentum(pipeline, values, split, spec);

  long warm = 0;
  if (with_attention && config.warmup) {
    warm = warmup_steps(pipeline.attention->smoothing_factors(), spec.batch);
  }

  std::vector<std::vector<long>> blocks;
  if (!with_attention && config.shuffle_pretrain) {
    std::vector<long> order(static_cast<std::size_t>(split.train.size()));
    std::iota(order.begin(), order.end(), split.train.first);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t st = 0; st < order.size(); st += static_cast<std::size_t>(spec.batch)) {
      const auto ed = std::min(order.size(), st + static_cast<std::size_t>(spec.batch));
      blocks.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(st),
                          order.begin() + static_cast<std::ptrdiff_t>(ed));
    }
  } else {
    for (const auto& r : sequential_batches(split.train, spec.batch)) {
      std::vector<long> idx;
      for (long t = r.first; t <= r.last; ++t) idx.push_back(t);
      blocks.push_back(std::move(idx));
    }
  }

  double loss_acc = 0.0;
  long step = 0;
  for (const auto& idx : blocks) {
    const auto batch = make_batch(values, idx, spec);
    auto fwd = pipeline.forward(batch.inputs, true);
    const double loss = mse_loss(fwd.prediction, batch.targets);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "non-finite training loss in epoch " << rec.epoch << " at sample "
          << batch.timestamps.front();
      throw NumericError(msg.str());
    }
    const auto grads = pipeline.backward(*fwd.tape, mse_gradient(fwd.prediction, batch.targets));
    double scale = 1.0;
    if (warm > 0) scale = std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warm));
    apply_update(pipeline, grads, config, scale, run);
    ++run.optimizer_steps;
    ++step;
    loss_acc += loss * batch.size();
    rec.train_samples += batch.size();
  }
  rec.train_loss = loss_acc / static_cast<double>(rec.train_samples);

  forward_momentum_only(pipeline, values, split.gap_train_val, spec);
  rec.momentum_only_samples += with_attention ? split.gap_train_val.size() : 0;

  std::vector<double> val_losses;
  for (const auto& r : sequential_batches(split.val, spec.batch)) {
    const auto batch = make_batch(values, r, spec);
    const auto fwd = pipeline.forward(batch.inputs, false);
    const auto per = per_sample_mse(fwd.prediction, batch.targets);
    val_losses.insert(val_losses.end(), per.begin(), per.end());
  }
  rec.val_samples = static_cast<long>(val_losses.size());
  rec.val_loss = std::accumulate(val_losses.begin(), val_losses.end(), 0.0) /
                 static_cast<double>(val_losses.size());
  rec.weighted_val_loss = weighted_validation(
      val_losses, std::max<long>(1, static_cast<long>(val_losses.size()) - 1));
  if (!std::isfinite(rec.weighted_val_loss)) {
    throw NumericError("non-finite validation loss in epoch " + std::to_string(rec.epoch));
  }
  if (with_attention) rec.alphas = pipeline.attention->smoothing_factors();

  if (run.best_epoch < 0 || rec.weighted_val_loss < run.best_weighted_val) {
    run.best_epoch = rec.epoch;
    run.best_weighted_val = rec.weighted_val_loss;
    run.best = pipeline;
  }
  run.epochs.push_back(rec);
  return rec;
}

TrainRun fit(Pipeline& pipeline, const Matrix& values, const ConsecutiveSplit& split,
             const WindowSpec& spec, const TrainConfig& config,
             const std::function<void(const EpochRecord&)>& on_epoch) {
  if (config.epochs < 1) throw DomainError("fit: epochs must be >= 1");
  TrainRun run;
  std::mt19937_64 rng(config.seed);
  for (int e = 0; e < config.epochs; ++e) {
    const auto rec = train_epoch(pipeline, values, split, spec, config, run, rng);
    if (on_epoch) on_epoch(rec);
  }
  if (run.best) pipeline = *run.best;
  return run;
}

LrSearch search_learning_rate(Pipeline& pipeline, const Matrix& values,
                              const ConsecutiveSplit& split, const WindowSpec& spec,
                              const TrainConfig& config, const std::vector<double>& grid) {
  if (grid.empty()) throw DomainError("search_learning_rate: empty grid");
  const Pipeline start = pipeline;
  LrSearch out;
  std::optional<Pipeline> best;
  for (const double lr : grid) {
    Pipeline p = start;
    TrainConfig c = config;
    c.lr_model = lr;
    auto run = fit(p, values, split, spec, c);
    out.trials.push_back({lr, run.best_weighted_val, run.best_epoch});
    if (!best || run.best_weighted_val < out.run.best_weighted_val) {
      out.lr = lr;
      out.run = std::move(run);
      best = std::move(p);
    }
  }
  pipeline = std::move(*best);
  return out;
}

Metrics evaluate(Pipeline& pipeline, const Matrix& values, const ConsecutiveSplit& split,
                 const WindowSpec& spec, SplitPart part) {
  const IndexRange target = part == SplitPart::val ? split.val : split.test;
  if (pipeline.attention) {
    init_epoch_momentum(pipeline, values, split, spec);
    forward_momentum_only(pipeline, values, {split.train.first, target.first - 1}, spec);
  }
  const int horizon = spec.horizon;
  Metrics m;
  m.mse_per_step = Vector::Zero(horizon);
  m.mae_per_step = Vector::Zero(horizon);
  double channels = 0.0;
  for (const auto& r : sequential_batches(target, spec.batch)) {
    const auto batch = make_batch(values, r, spec);
    const auto fwd = pipeline.forward(batch.inputs, false);
    channels = static_cast<double>(fwd.prediction.size());
    for (std::size_t n = 0; n < fwd.prediction.size(); ++n) {
      const Matrix err = fwd.prediction[n] - batch.targets[n];
      m.mse_per_step += err.array().square().colwise().sum().matrix().transpose();
      m.mae_per_step += err.array().abs().colwise().sum().matrix().transpose();
    }
    const auto per = per_sample_mse(fwd.prediction, batch.targets);
    m.sample_mse.insert(m.sample_mse.end(), per.begin(), per.end());
    m.samples += batch.size();
  }
  const double denom = static_cast<double>(m.samples) * channels;
  m.mse_per_step /= denom;
  m.mae_per_step /= denom;
  m.mse = m.mse_per_step.mean();
  m.mae = m.mae_per_step.mean();
  return m;
}

// ------------------------------------------------------------------ gradcheck

GradCheckReport check_gradients(const std::function<double()>& loss,
                                const std::vector<GradCoordinate>& coords, double h,
                                double tol) {
  GradCheckReport rep;
  for (const auto& c : coords) {
    if (c.values.size() != c.analytic.size()) {
      throw DimensionError("check_gradients: '" + c.name + "' has mismatched sizes");
    }
    for (std::size_t j = 0; j < c.values.size(); ++j) {
      const double orig = c.values[j];
      c.values[j] = orig + h;
      const double fp = loss();
      c.values[j] = orig - h;
      const double fm = loss();
      c.values[j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = c.analytic[j];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      ++rep.coordinates;
      if (rel > rep.max_rel_error || rep.worst_index < 0) {
        rep.max_rel_error = rel;
        rep.worst_name = c.name;
        rep.worst_index = static_cast<long>(j);
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.pass = rep.max_rel_error <= tol;
  return rep;
}

GradCheckReport gradcheck(Pipeline& pipeline, const ForecastBatch& batch,
                          const Matrix* initial_momentum, double h, double tol,
                          const GradientHook& hook) {
  if (pipeline.attention && !initial_momentum) {
    throw StateError("gradcheck: attention needs an initial momentum");
  }
  auto reset = [&] {
    if (pipeline.attention) pipeline.attention->set_momentum(*initial_momentum);
  };

  ChannelBatch inputs = batch.inputs;
  reset();
  auto fwd = pipeline.forward(inputs, true);
  auto grads = pipeline.backward(*fwd.tape, mse_gradient(fwd.prediction, batch.targets));
  if (hook) hook(grads);

  std::vector<GradCoordinate> coords;
  auto params = pipeline.model->parameters();
  const auto names = pipeline.model->parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    coords.push_back({names[i],
                      {params[i]->data(), static_cast<std::size_t>(params[i]->size())},
                      {grads.parameters[i].data(), static_cast<std::size_t>(grads.parameters[i].size())}});
  }
  if (pipeline.attention) {
    auto& att = *pipeline.attention;
    coords.push_back({"sa_matrix",
                      {att.sa_matrix().data(), static_cast<std::size_t>(att.sa_matrix().size())},
                      {grads.attention->sa_matrix.data(),
                       static_cast<std::size_t>(grads.attention->sa_matrix.size())}});
    coords.push_back({"raw_smoothing",
                      {att.raw_smoothing().data(), static_cast<std::size_t>(att.raw_smoothing().size())},
                      {grads.attention->raw_smoothing.data(),
                       static_cast<std::size_t>(grads.attention->raw_smoothing.size())}});
  }
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    coords.push_back({"input[" + std::to_string(n) + "]",
                      {inputs[n].data(), static_cast<std::size_t>(inputs[n].size())},
                      {grads.inputs[n].data(), static_cast<std::size_t>(grads.inputs[n].size())}});
  }

  auto loss = [&] {
    reset();
    const auto out = pipeline.forward(inputs, false);
    return mse_loss(out.prediction, batch.targets);
  };
  auto rep = check_gradients(loss, coords, h, tol);
  reset();
  return rep;
}

}  // namespace bsa
