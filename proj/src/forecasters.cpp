#include "bsa/forecasters.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bsa/errors.hpp"

namespace bsa {

Decomposition series_decompose(const Vector& x, int window) {
  if (x.size() < 1) throw DomainError("series_decompose: empty series");
  if (window < 1 || window % 2 == 0) {
    throw DomainError("series_decompose: window must be odd and >= 1");
  }
  const auto n = x.size();
  const int pad = (window - 1) / 2;
  Decomposition d;
  d.trend.resize(n);
  for (Eigen::Index l = 0; l < n; ++l) {
    double acc = 0.0;
    for (Eigen::Index i = l - pad; i <= l + pad; ++i) {
      acc += x[std::clamp<Eigen::Index>(i, 0, n - 1)];
    }
    d.trend[l] = acc / window;
  }
  d.seasonal = x - d.trend;
  return d;
}

Matrix moving_average_operator(int length, int window) {
  if (length < 1) throw DomainError("moving_average_operator: empty series");
  if (window < 1 || window % 2 == 0) {
    throw DomainError("moving_average_operator: window must be odd and >= 1");
  }
  const int pad = (window - 1) / 2;
  Matrix t = Matrix::Zero(length, length);
  for (int l = 0; l < length; ++l) {
    for (int i = l - pad; i <= l + pad; ++i) {
      t(l, std::clamp(i, 0, length - 1)) += 1.0 / window;
    }
  }
  return t;
}

RevinResult revin_normalize(const Matrix& x) {
  if (x.rows() < 2) throw DomainError("revin_normalize: window needs >= 2 steps");
  RevinResult r;
  r.stats.mean = x.colwise().mean().transpose();
  Matrix centered = x.rowwise() - r.stats.mean.transpose();
  r.stats.stdev = (centered.array().square().colwise().mean().sqrt()).transpose();
  r.normalized = centered.array().rowwise() /
                 (r.stats.stdev.array() + kRevinEps).transpose();
  return r;
}

Matrix revin_denormalize(const RevinStats& stats, const Matrix& y) {
  if (y.cols() != stats.mean.size()) {
    throw DimensionError("revin_denormalize: channel count mismatch");
  }
  Matrix out = y.array().rowwise() * (stats.stdev.array() + kRevinEps).transpose();
  out.rowwise() += stats.mean.transpose();
  return out;
}

std::string to_string(ModelKind kind) {
  return kind == ModelKind::dlinear ? "dlinear" : "rlinear";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "dlinear" || name == "DLinear") return ModelKind::dlinear;
  if (name == "rlinear" || name == "RLinear") return ModelKind::rlinear;
  throw ParseError("unknown model kind '" + name + "' (expected dlinear or rlinear)");
}

std::vector<const Matrix*> Forecaster::parameters() const {
  auto* self = const_cast<Forecaster*>(this);
  auto p = self->parameters();
  return {p.begin(), p.end()};
}

void Forecaster::check_inputs(const ChannelBatch& inputs) const {
  if (static_cast<int>(inputs.size()) != shape_.channels) {
    std::ostringstream msg;
    msg << "forecaster expects " << shape_.channels << " channels, got "
        << inputs.size();
    throw DimensionError(msg.str());
  }
  const auto rows = inputs.front().rows();
  if (rows < 1) throw DimensionError("forecaster: empty batch");
  for (const auto& x : inputs) {
    if (x.rows() != rows || x.cols() != shape_.lookback) {
      std::ostringstream msg;
      msg << "forecaster expects B x " << shape_.lookback
          << " windows per channel, got " << x.rows() << "x" << x.cols();
      throw DimensionError(msg.str());
    }
  }
}

ForecastForward Forecaster::forward(const ChannelBatch& inputs,
                                    SpectralAttention* attention,
                                    bool training) {
  check_inputs(inputs);
  if (attention && attention->features() != shape_.channels) {
    throw DimensionError("forecaster: attention module D must equal the channel count");
  }
  auto out = do_forward(inputs, attention, training);
  ++generation_;
  if (out.tape) out.tape->generation = generation_;
  return out;
}

ForecastGradients Forecaster::backward(const ForecastTape& tape,
                                       const ChannelBatch& grad_output,
                                       const SpectralAttention* attention) const {
  if (tape.generation == 0 || tape.generation != generation_) {
    throw StateError("forecaster backward: tape is stale");
  }
  if (tape.attention.has_value() != (attention != nullptr)) {
    throw StateError("forecaster backward: attention module does not match the forward");
  }
  if (static_cast<int>(grad_output.size()) != shape_.channels) {
    throw DimensionError("forecaster backward: wrong channel count");
  }
  for (const auto& g : grad_output) {
    if (g.cols() != shape_.horizon) {
      throw DimensionError("forecaster backward: gradient must be B x S per channel");
    }
  }
  return do_backward(tape, grad_output, attention);
}

namespace {

Matrix uniform_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols,
                      double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  // Column-major fill order keeps the stream stable for a given shape.
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = u(rng);
  }
  return m;
}

}  // namespace

// ---------------------------------------------------------------- DLinear

DLinearModel::DLinearModel(ForecastShape shape, int ma_window)
    : Forecaster(shape), ma_window_(ma_window) {
  if (shape.lookback < 1 || shape.horizon < 1 || shape.channels < 1) {
    throw DomainError("DLinearModel: lookback, horizon and channels must be >= 1");
  }
  trend_op_ = moving_average_operator(shape.lookback, ma_window);
  for (int n = 0; n < shape.channels; ++n) {
    seasonal_.push_back(Matrix::Zero(shape.lookback, shape.horizon));
    trend_.push_back(Matrix::Zero(shape.lookback, shape.horizon));
    bias_.push_back(Matrix::Zero(1, shape.horizon));
  }
}

std::unique_ptr<Forecaster> DLinearModel::clone() const {
  return std::make_unique<DLinearModel>(*this);
}

void DLinearModel::init_parameters(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape_.lookback));
  for (int n = 0; n < shape_.channels; ++n) {
    seasonal_[n] = uniform_matrix(rng, shape_.lookback, shape_.horizon, bound);
    trend_[n] = uniform_matrix(rng, shape_.lookback, shape_.horizon, bound);
    bias_[n].setZero();
  }
}

std::vector<Matrix*> DLinearModel::parameters() {
  std::vector<Matrix*> p;
  for (int n = 0; n < shape_.channels; ++n) {
    p.push_back(&seasonal_[n]);
    p.push_back(&trend_[n]);
    p.push_back(&bias_[n]);
  }
  return p;
}

std::vector<std::string> DLinearModel::parameter_names() const {
  std::vector<std::string> names;
  for (int n = 0; n < shape_.channels; ++n) {
    const auto idx = "[" + std::to_string(n) + "]";
    names.push_back("seasonal_weight" + idx);
    names.push_back("trend_weight" + idx);
    names.push_back("bias" + idx);
  }
  return names;
}

ChannelBatch DLinearModel::attention_input(const ChannelBatch& inputs) const {
  return inputs;
}

ForecastForward DLinearModel::do_forward(const ChannelBatch& inputs,
                                         SpectralAttention* attention,
                                         bool training) {
  ForecastForward out;
  std::optional<SAForward> att;
  if (attention) att = attention->forward(inputs, training);
  const ChannelBatch& z = att ? att->output : inputs;

  DLinearCache cache;
  for (int n = 0; n < shape_.channels; ++n) {
    Matrix trend = z[n] * trend_op_.transpose();
    Matrix seasonal = z[n] - trend;
    Matrix pred = seasonal * seasonal_[n] + trend * trend_[n];
    pred.rowwise() += bias_[n].row(0);
    out.prediction.push_back(std::move(pred));
    if (training) {
      cache.seasonal.push_back(std::move(seasonal));
      cache.trend.push_back(std::move(trend));
    }
  }
  if (training) {
    ForecastTape tape;
    tape.cache = std::move(cache);
    if (att) tape.attention = std::move(att->tape);
    out.tape = std::move(tape);
  }
  return out;
}

ForecastGradients DLinearModel::do_backward(const ForecastTape& tape,
                                            const ChannelBatch& grad_output,
                                            const SpectralAttention* attention) const {
  const auto& cache = std::get<DLinearCache>(tape.cache);
  ForecastGradients g;
  ChannelBatch dz;
  for (int n = 0; n < shape_.channels; ++n) {
    const Matrix& go = grad_output[n];
    if (go.rows() != cache.seasonal[n].rows()) {
      throw DimensionError("DLinear backward: batch size mismatch");
    }
    g.parameters.push_back(cache.seasonal[n].transpose() * go);
    g.parameters.push_back(cache.trend[n].transpose() * go);
    g.parameters.push_back(go.colwise().sum());
    const Matrix d_seasonal = go * seasonal_[n].transpose();
    const Matrix d_trend = go * trend_[n].transpose();
    dz.push_back(d_seasonal + (d_trend - d_seasonal) * trend_op_);
  }
  if (attention) {
    auto ag = attention->backward(*tape.attention, dz);
    g.inputs = std::move(ag.inputs);
    ag.inputs.clear();
    g.attention = std::move(ag);
  } else {
    g.inputs = std::move(dz);
  }
  return g;
}

// ---------------------------------------------------------------- RLinear

RLinearModel::RLinearModel(ForecastShape shape) : Forecaster(shape) {
  if (shape.lookback < 2 || shape.horizon < 1 || shape.channels < 1) {
    throw DomainError("RLinearModel: need lookback >= 2, horizon >= 1, channels >= 1");
  }
  for (int n = 0; n < shape.channels; ++n) {
    weight_.push_back(Matrix::Zero(shape.lookback, shape.horizon));
    bias_.push_back(Matrix::Zero(1, shape.horizon));
  }
}

std::unique_ptr<Forecaster> RLinearModel::clone() const {
  return std::make_unique<RLinearModel>(*this);
}

void RLinearModel::init_parameters(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape_.lookback));
  for (int n = 0; n < shape_.channels; ++n) {
    weight_[n] = uniform_matrix(rng, shape_.lookback, shape_.horizon, bound);
    bias_[n].setZero();
  }
}

std::vector<Matrix*> RLinearModel::parameters() {
  std::vector<Matrix*> p;
  for (int n = 0; n < shape_.channels; ++n) {
    p.push_back(&weight_[n]);
    p.push_back(&bias_[n]);
  }
  return p;
}

std::vector<std::string> RLinearModel::parameter_names() const {
  std::vector<std::string> names;
  for (int n = 0; n < shape_.channels; ++n) {
    const auto idx = "[" + std::to_string(n) + "]";
    names.push_back("weight" + idx);
    names.push_back("bias" + idx);
  }
  return names;
}

namespace {

struct InstanceNorm {
  Vector mean;
  Vector stdev;
  Matrix centered;
  Matrix normalized;
};

InstanceNorm instance_norm(const Matrix& x) {
  InstanceNorm r;
  r.mean = x.rowwise().mean();
  r.centered = x.colwise() - r.mean;
  r.stdev = r.centered.array().square().rowwise().mean().sqrt();
  r.normalized = r.centered.array().colwise() / (r.stdev.array() + kRevinEps);
  return r;
}

}  // namespace

ChannelBatch RLinearModel::attention_input(const ChannelBatch& inputs) const {
  ChannelBatch out;
  for (const auto& x : inputs) out.push_back(instance_norm(x).normalized);
  return out;
}

ForecastForward RLinearModel::do_forward(const ChannelBatch& inputs,
                                         SpectralAttention* attention,
                                         bool training) {
  RLinearCache cache;
  ChannelBatch normalized;
  for (const auto& x : inputs) {
    auto in = instance_norm(x);
    normalized.push_back(std::move(in.normalized));
    cache.mean.push_back(std::move(in.mean));
    cache.stdev.push_back(std::move(in.stdev));
    cache.centered.push_back(std::move(in.centered));
  }
  std::optional<SAForward> att;
  if (attention) att = attention->forward(normalized, training);
  ChannelBatch mixed = att ? std::move(att->output) : std::move(normalized);

  ForecastForward out;
  for (int n = 0; n < shape_.channels; ++n) {
    Matrix lin = mixed[n] * weight_[n];
    lin.rowwise() += bias_[n].row(0);
    Matrix pred = lin.array().colwise() * (cache.stdev[n].array() + kRevinEps);
    pred.colwise() += cache.mean[n];
    out.prediction.push_back(std::move(pred));
    if (training) cache.linear_out.push_back(std::move(lin));
  }
  if (training) {
    cache.mixed = std::move(mixed);
    ForecastTape tape;
    tape.cache = std::move(cache);
    if (att) tape.attention = std::move(att->tape);
    out.tape = std::move(tape);
  }
  return out;
}

ForecastGradients RLinearModel::do_backward(const ForecastTape& tape,
                                            const ChannelBatch& grad_output,
                                            const SpectralAttention* attention) const {
  const auto& cache = std::get<RLinearCache>(tape.cache);
  const double len = static_cast<double>(shape_.lookback);
  ForecastGradients g;
  ChannelBatch d_mixed;
  std::vector<Vector> d_scale(static_cast<std::size_t>(shape_.channels));
  std::vector<Vector> d_mean(static_cast<std::size_t>(shape_.channels));
  for (int n = 0; n < shape_.channels; ++n) {
    const Matrix& go = grad_output[n];
    if (go.rows() != cache.mixed[n].rows()) {
      throw DimensionError("RLinear backward: batch size mismatch");
    }
    const Vector scale = cache.stdev[n].array() + kRevinEps;
    const Matrix d_lin = go.array().colwise() * scale.array();
    d_scale[n] = (go.array() * cache.linear_out[n].array()).rowwise().sum();
    d_mean[n] = go.rowwise().sum();
    g.parameters.push_back(cache.mixed[n].transpose() * d_lin);
    g.parameters.push_back(d_lin.colwise().sum());
    d_mixed.push_back(d_lin * weight_[n].transpose());
  }

  ChannelBatch d_norm;
  if (attention) {
    auto ag = attention->backward(*tape.attention, d_mixed);
    d_norm = std::move(ag.inputs);
    ag.inputs.clear();
    g.attention = std::move(ag);
  } else {
    d_norm = std::move(d_mixed);
  }

  for (int n = 0; n < shape_.channels; ++n) {
    const Vector scale = cache.stdev[n].array() + kRevinEps;
    const Matrix& c = cache.centered[n];
    // normalized = centered / scale
    Matrix d_centered = d_norm[n].array().colwise() / scale.array();
    Vector d_s = d_scale[n] -
                 ((d_norm[n].array() * c.array()).rowwise().sum() /
                  scale.array().square())
                     .matrix();
    // stdev = sqrt(mean(centered^2)); flat windows contribute nothing.
    for (Eigen::Index b = 0; b < c.rows(); ++b) {
      const double sd = cache.stdev[n][b];
      if (sd > 0.0) d_centered.row(b) += (d_s[b] / (len * sd)) * c.row(b);
    }
    // centered = x - mean(x)
    const Vector d_mean_total = d_mean[n] - d_centered.rowwise().sum();
    Matrix dx = d_centered;
    dx.colwise() += d_mean_total / len;
    g.inputs.push_back(std::move(dx));
  }
  return g;
}

std::unique_ptr<Forecaster> make_forecaster(ModelKind kind, ForecastShape shape,
                                            int ma_window) {
  if (kind == ModelKind::dlinear) return std::make_unique<DLinearModel>(shape, ma_window);
  return std::make_unique<RLinearModel>(shape);
}

}  // namespace bsa
