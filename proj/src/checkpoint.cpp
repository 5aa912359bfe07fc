#include "bsa/checkpoint.hpp"

#include <fstream>

#include "bsa/errors.hpp"

namespace bsa {

using nlohmann::json;

namespace {

json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols,
                        const std::string& what) {
  const auto r = j.at("rows").get<Eigen::Index>();
  const auto c = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (r != rows || c != cols || static_cast<Eigen::Index>(data.size()) != r * c) {
    throw ParseError("checkpoint: " + what + " is " + std::to_string(r) + "x" +
                     std::to_string(c) + ", expected " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  return Eigen::Map<const Matrix>(data.data(), r, c);
}

}  // namespace

json pipeline_to_json(const Pipeline& pipeline, const json& meta) {
  const auto& model = *pipeline.model;
  json params = json::array();
  const auto names = model.parameter_names();
  const auto values = model.parameters();
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto p = matrix_to_json(*values[i]);
    p["name"] = names[i];
    params.push_back(std::move(p));
  }
  json j;
  j["format"] = "bsa-checkpoint";
  j["version"] = kCheckpointVersion;
  int ma = 0;
  if (const auto* d = dynamic_cast<const DLinearModel*>(&model)) ma = d->ma_window();
  j["model"] = {{"kind", to_string(model.kind())},
                {"lookback", model.shape().lookback},
                {"horizon", model.shape().horizon},
                {"channels", model.shape().channels},
                {"ma_window", ma},
                {"parameters", std::move(params)}};
  if (pipeline.attention) {
    const auto& a = *pipeline.attention;
    j["attention"] = {
        {"factors", a.factors()},
        {"features", a.features()},
        {"sa_matrix", matrix_to_json(a.sa_matrix())},
        {"raw_smoothing",
         std::vector<double>(a.raw_smoothing().data(),
                             a.raw_smoothing().data() + a.raw_smoothing().size())},
        {"momentum", a.has_momentum() ? matrix_to_json(a.momentum()) : json(nullptr)},
        {"learn_smoothing", a.options().learn_smoothing},
        {"batched_bptt", a.options().batched_bptt},
        {"sigma_idx", a.options().sigma_idx}};
  } else {
    j["attention"] = nullptr;
  }
  j["meta"] = meta.is_null() ? json::object() : meta;
  return j;
}

Pipeline pipeline_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != "bsa-checkpoint") {
      throw ParseError("checkpoint: not a bsa checkpoint");
    }
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto& jm = j.at("model");
    ForecastShape shape{jm.at("lookback").get<int>(), jm.at("horizon").get<int>(),
                        jm.at("channels").get<int>()};
    const auto kind = parse_model_kind(jm.at("kind").get<std::string>());
    Pipeline p(make_forecaster(kind, shape, kind == ModelKind::dlinear ? jm.at("ma_window").get<int>() : 25));
    auto params = p.model->parameters();
    const auto names = p.model->parameter_names();
    const auto& jp = jm.at("parameters");
    if (jp.size() != params.size()) {
      throw ParseError("checkpoint: expected " + std::to_string(params.size()) +
                       " parameter tensors, found " + std::to_string(jp.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (jp[i].at("name").get<std::string>() != names[i]) {
        throw ParseError("checkpoint: parameter " + std::to_string(i) + " is '" +
                         jp[i].at("name").get<std::string>() + "', expected '" + names[i] + "'");
      }
      *params[i] = matrix_from_json(jp[i], params[i]->rows(), params[i]->cols(), names[i]);
    }
    const auto& ja = j.at("attention");
    if (!ja.is_null()) {
      const int k = ja.at("factors").get<int>();
      const int d = ja.at("features").get<int>();
      if (d != shape.channels) {
        throw ParseError("checkpoint: attention D = " + std::to_string(d) +
                         " does not match " + std::to_string(shape.channels) + " channels");
      }
      const auto raw = ja.at("raw_smoothing").get<std::vector<double>>();
      if (static_cast<int>(raw.size()) != k) {
        throw ParseError("checkpoint: raw_smoothing has the wrong length");
      }
      SpectralAttentionOptions opt;
      opt.learn_smoothing = ja.at("learn_smoothing").get<bool>();
      opt.batched_bptt = ja.at("batched_bptt").get<bool>();
      opt.sigma_idx = ja.value("sigma_idx", 0.0);
      // Construct with any valid factors, then restore the stored raw values
      // (trained factors are not required to stay sorted).
      Vector placeholder = Vector::LinSpaced(k, 0.5, 0.9);
      if (k == 1) placeholder[0] = 0.5;
      SpectralAttention att(k, d, placeholder, opt);
      att.sa_matrix() = matrix_from_json(ja.at("sa_matrix"), 2 * k + 1, d, "sa_matrix");
      att.raw_smoothing() = Eigen::Map<const Vector>(raw.data(), k);
      if (!ja.at("momentum").is_null()) {
        att.set_momentum(matrix_from_json(ja.at("momentum"), k, d, "momentum"));
      }
      p.attention = std::move(att);
    }
    return p;
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: malformed JSON content: ") + e.what());
  } catch (const DomainError& e) {
    throw ParseError(std::string("checkpoint: invalid content: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Pipeline& pipeline,
                     const json& meta) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << pipeline_to_json(pipeline, meta).dump(1) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError("checkpoint " + path.string() + ": " + e.what());
  }
  LoadedCheckpoint c{pipeline_from_json(j), {}};
  c.meta = j.value("meta", json::object());
  return c;
}

}  // namespace bsa
