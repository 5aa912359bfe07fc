#include "bsa/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include <Eigen/Core>

#include "CLI11.hpp"

#include "bsa/analysis.hpp"
#include "bsa/checkpoint.hpp"
#include "bsa/ema_filter.hpp"
#include "bsa/errors.hpp"
#include "bsa/spectral_attention.hpp"
#include "bsa/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bsa::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw UsageError("bad value for " + key + ": '" + v + "' (expected a number)");
  }
}

long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long x = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw UsageError("bad value for " + key + ": '" + v + "' (expected an integer)");
  }
}

int parse_positive(const std::string& key, const std::string& v) {
  const long x = parse_long(key, v);
  if (x < 1 || x > 1000000000) {
    throw UsageError("bad value for " + key + ": '" + v + "' (expected a positive integer)");
  }
  return static_cast<int>(x);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("bad value for " + key + ": '" + v + "' (expected true/false)");
}

std::string join(const std::vector<std::string>& xs, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? sep : "") + xs[i];
  return out;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "model",         "lookback",     "horizon",      "batch",
      "epochs",        "lr_model",     "lr_grid",     "lr_sa_matrix", "lr_smoothing",
      "alphas",        "k",            "bptt",         "learn_smoothing",
      "warmup",        "shuffle_pretrain", "seed",     "split",
      "ma_window",     "period",       "out"};
  return keys;
}

void apply_setting(Settings& s, const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "model") {
    try {
      s.model = to_string(parse_model_kind(v));
    } catch (const std::exception&) {
      throw UsageError("bad value for model: '" + v + "' (expected dlinear or rlinear)");
    }
  } else if (key == "lookback") {
    s.lookback = parse_positive(key, v);
  } else if (key == "horizon") {
    s.horizon = parse_positive(key, v);
  } else if (key == "batch") {
    s.batch = parse_positive(key, v);
  } else if (key == "epochs") {
    s.epochs = parse_positive(key, v);
  } else if (key == "lr_model" || key == "lr_sa_matrix" || key == "lr_smoothing") {
    const double x = parse_double(key, v);
    if (x < 0) throw UsageError("bad value for " + key + ": must be >= 0");
    if (key == "lr_model") s.lr_model = x;
    else if (key == "lr_sa_matrix") s.lr_sa_matrix = x;
    else s.lr_smoothing = x;
  } else if (key == "lr_grid") {
    std::vector<double> g;
    for (const auto& item : split_list(v)) {
      g.push_back(parse_double(key, item));
      if (g.back() <= 0) throw UsageError("bad value for lr_grid: rates must be > 0");
    }
    if (g.empty()) throw UsageError("bad value for lr_grid: empty list");
    s.lr_grid = g;
  } else if (key == "alphas") {
    std::vector<double> a;
    for (const auto& item : split_list(v)) a.push_back(parse_double(key, item));
    if (a.empty()) throw UsageError("bad value for alphas: empty list");
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!(a[i] > 0.0 && a[i] < 1.0)) {
        throw UsageError("bad value for alphas: every factor must lie in (0, 1)");
      }
      if (i && a[i] <= a[i - 1]) {
        throw UsageError("bad value for alphas: factors must be strictly increasing");
      }
    }
    s.alphas = a;
  } else if (key == "k") {
    s.k = parse_positive(key, v);
  } else if (key == "bptt") {
    s.bptt = parse_bool(key, v);
  } else if (key == "learn_smoothing") {
    s.learn_smoothing = parse_bool(key, v);
  } else if (key == "warmup") {
    s.warmup = parse_bool(key, v);
  } else if (key == "shuffle_pretrain") {
    s.shuffle_pretrain = parse_bool(key, v);
  } else if (key == "seed") {
    const long x = parse_long(key, v);
    if (x < 0) throw UsageError("bad value for seed: must be >= 0");
    s.seed = static_cast<std::uint64_t>(x);
  } else if (key == "split") {
    const auto items = split_list(v);
    if (items.size() != 3) throw UsageError("bad value for split: expected train,val,test");
    SplitRatios r{parse_double(key, items[0]), parse_double(key, items[1]),
                  parse_double(key, items[2])};
    if (r.train <= 0 || r.val <= 0 || r.test <= 0 ||
        std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
      throw UsageError("bad value for split: ratios must be positive and sum to 1");
    }
    s.split = r;
  } else if (key == "ma_window") {
    s.ma_window = parse_positive(key, v);
    if (s.ma_window % 2 == 0) throw UsageError("bad value for ma_window: must be odd");
  } else if (key == "period") {
    s.period = parse_double(key, v);
    if (s.period <= 0) throw UsageError("bad value for period: must be > 0");
  } else if (key == "out") {
    s.out = v;
  } else {
    throw UsageError("unknown config key '" + key + "'; valid keys: " +
                     join(config_keys(), ", "));
  }
}

void apply_config_file(Settings& s, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(lineno) +
                       ": expected key = value");
    }
    apply_setting(s, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

json settings_to_json(const Settings& s) {
  json j;
  j["model"] = s.model;
  j["lookback"] = s.lookback;
  j["horizon"] = s.horizon;
  j["batch"] = s.batch ? json(*s.batch) : json(nullptr);
  j["epochs"] = s.epochs ? json(*s.epochs) : json(nullptr);
  j["lr_model"] = s.lr_model ? json(*s.lr_model) : json(nullptr);
  j["lr_grid"] = s.lr_grid;
  j["lr_sa_matrix"] = s.lr_sa_matrix;
  j["lr_smoothing"] = s.lr_smoothing;
  j["alphas"] = s.alphas;
  j["k"] = s.k ? json(*s.k) : json(nullptr);
  j["bptt"] = s.bptt;
  j["learn_smoothing"] = s.learn_smoothing;
  j["warmup"] = s.warmup;
  j["shuffle_pretrain"] = s.shuffle_pretrain;
  j["seed"] = s.seed;
  j["split"] = {s.split.train, s.split.val, s.split.test};
  j["ma_window"] = s.ma_window;
  j["period"] = s.period;
  j["out"] = s.out;
  return j;
}

std::vector<double> select_alphas(const std::vector<double>& alphas, int k) {
  const int n = static_cast<int>(alphas.size());
  if (k < 1 || k > n) {
    throw UsageError("k = " + std::to_string(k) + " but only " + std::to_string(n) +
                     " smoothing factors are listed");
  }
  if (k == n) return alphas;
  std::vector<double> out;
  for (int i = 0; i < k; ++i) {
    const double pos = (i + 0.5) * n / k - 0.5;
    out.push_back(alphas[static_cast<std::size_t>(std::lround(pos))]);
  }
  return out;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::uint64_t h = 14695981039346656037ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ------------------------------------------------------------------ commands

namespace {

struct Context {
  std::string command;
  std::vector<std::string> args;
  Settings settings;
  std::ostream& out;
  std::ostream& err;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, digest
  std::vector<fs::path> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void input(const fs::path& p) { inputs.emplace_back(p.string(), file_digest(p)); }
};

fs::path out_dir(const Context& ctx, const std::string& fallback) {
  fs::path dir = ctx.settings.out.empty() ? fs::path(fallback) : fs::path(ctx.settings.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create output directory " + dir.string());
  }
  return dir;
}

void write_manifest(Context& ctx, const fs::path& path) {
  for (const auto& p : ctx.outputs) {
    if (!fs::exists(p)) throw IoError("declared output missing: " + p.string());
  }
  json j;
  j["format"] = "bsa-run-manifest";
  j["version"] = 1;
  j["command"] = ctx.command;
  j["argv"] = ctx.args;
  j["config"] = settings_to_json(ctx.settings);
  j["seed"] = ctx.settings.seed;
  j["inputs"] = json::array();
  for (const auto& [p, d] : ctx.inputs) j["inputs"].push_back({{"path", p}, {"fnv1a64", d}});
  j["outputs"] = json::array();
  for (const auto& p : ctx.outputs) j["outputs"].push_back(p.string());
  j["outputs"].push_back(path.string());
  j["duration_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw IoError("failed writing " + path.string());
}

struct PreparedData {
  TimeSeriesDataset raw;
  NormalizationStats stats;
  TimeSeriesDataset scaled;
  ConsecutiveSplit split;
  WindowSpec spec;
};

PreparedData prepare(const fs::path& csv, const SplitRatios& ratios, const WindowSpec& spec) {
  PreparedData d;
  d.raw = load_csv(csv);
  d.spec = spec;
  const long T = d.raw.length();
  if (spec.lookback + spec.horizon > T) {
    throw UsageError("lookback + horizon = " +
                     std::to_string(spec.lookback + spec.horizon) + " exceeds the " +
                     std::to_string(T) + " rows of " + csv.string());
  }
  const auto bounds = boundaries_from_ratios(T, ratios);
  d.split = consecutive_split(bounds, spec);
  d.stats = train_statistics(d.raw.values, bounds.train_end);
  d.scaled = standardize(d.raw, d.stats);
  return d;
}

json data_meta(const PreparedData& d, const fs::path& csv) {
  json j;
  j["data"] = csv.string();
  j["channel_names"] = d.raw.channel_names;
  j["lookback"] = d.spec.lookback;
  j["horizon"] = d.spec.horizon;
  j["batch"] = d.spec.batch;
  j["mean"] = std::vector<double>(d.stats.mean.data(), d.stats.mean.data() + d.stats.mean.size());
  j["stdev"] =
      std::vector<double>(d.stats.stdev.data(), d.stats.stdev.data() + d.stats.stdev.size());
  return j;
}

SplitRatios meta_split(const json& meta, const SplitRatios& fallback) {
  if (!meta.contains("split")) return fallback;
  const auto& s = meta["split"];
  return {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
}

void check_channels(const Pipeline& p, const TimeSeriesDataset& data) {
  const auto& shape = p.model->shape();
  if (shape.channels != data.channels()) {
    throw ParseError("checkpoint/model shape mismatch: checkpoint has " +
                     std::to_string(shape.channels) + " channels, data has " +
                     std::to_string(data.channels()));
  }
}

void write_metrics_csv(const fs::path& path, const std::vector<EpochRecord>& records,
                       bool with_alphas) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << std::setprecision(17);
  f << "epoch,train_loss,weighted_val_loss,val_loss";
  const long K = records.empty() ? 0 : records.front().alphas.size();
  if (with_alphas) {
    for (long k = 0; k < K; ++k) f << ",alpha_" << k;
  }
  f << '\n';
  for (const auto& r : records) {
    f << r.epoch << ',' << r.train_loss << ',' << r.weighted_val_loss << ',' << r.val_loss;
    if (with_alphas) {
      for (long k = 0; k < r.alphas.size(); ++k) f << ',' << r.alphas[k];
    }
    f << '\n';
  }
  if (!f) throw IoError("failed writing " + path.string());
}

int cmd_pretrain(Context& ctx, const fs::path& csv) {
  auto& s = ctx.settings;
  ctx.input(csv);
  const WindowSpec spec{s.lookback, s.horizon, s.batch.value_or(64)};
  auto d = prepare(csv, s.split, spec);

  std::mt19937_64 rng(s.seed);
  const ForecastShape shape{s.lookback, s.horizon, static_cast<int>(d.raw.channels())};
  Pipeline p(make_forecaster(parse_model_kind(s.model), shape, s.ma_window));
  p.model->init_parameters(rng);

  TrainConfig cfg;
  cfg.epochs = s.epochs.value_or(30);
  cfg.batch = spec.batch;
  cfg.shuffle_pretrain = s.shuffle_pretrain;
  cfg.seed = rng();
  s.batch = cfg.batch;
  s.epochs = cfg.epochs;

  TrainRun run;
  std::vector<LrTrial> trials;
  if (s.lr_model) {
    cfg.lr_model = *s.lr_model;
    run = fit(p, d.scaled.values, d.split, spec, cfg);
    trials.push_back({cfg.lr_model, run.best_weighted_val, run.best_epoch});
  } else {
    auto search = search_learning_rate(p, d.scaled.values, d.split, spec, cfg, s.lr_grid);
    run = std::move(search.run);
    trials = search.trials;
    cfg.lr_model = search.lr;
  }
  for (const auto& t : trials) {
    ctx.out << "lr " << t.lr << " best epoch " << t.best_epoch << " weighted val "
            << t.best_weighted_val << '\n';
  }
  for (const auto& r : run.epochs) {
    ctx.out << "epoch " << r.epoch << " train " << r.train_loss << " val "
            << r.weighted_val_loss << '\n';
  }

  const auto dir = out_dir(ctx, "pretrain_out");
  json meta = data_meta(d, csv);
  meta["split"] = {s.split.train, s.split.val, s.split.test};
  meta["stage"] = "pretrain";
  meta["lr_model"] = cfg.lr_model;
  meta["best_epoch"] = run.best_epoch;
  meta["seed"] = s.seed;
  const auto ckpt = dir / "base.ckpt.json";
  save_checkpoint(ckpt, p, meta);
  ctx.outputs.push_back(ckpt);
  const auto metrics = dir / "metrics.csv";
  write_metrics_csv(metrics, run.epochs, false);
  ctx.outputs.push_back(metrics);
  const auto search_csv = dir / "lr_search.csv";
  {
    std::ofstream f(search_csv);
    if (!f) throw IoError("cannot write " + search_csv.string());
    f << std::setprecision(17) << "lr,best_epoch,best_weighted_val_loss,selected\n";
    for (const auto& t : trials) {
      f << t.lr << ',' << t.best_epoch << ',' << t.best_weighted_val << ','
        << (t.lr == cfg.lr_model ? 1 : 0) << '\n';
    }
  }
  ctx.outputs.push_back(search_csv);
  write_manifest(ctx, dir / "manifest.json");
  ctx.out << "best epoch " << run.best_epoch << " weighted val " << run.best_weighted_val
          << "\nwrote " << ckpt.string() << '\n';
  return 0;
}

int cmd_finetune(Context& ctx, const fs::path& ckpt_path, const fs::path& csv,
                 bool lookback_given, bool horizon_given, bool split_given) {
  auto& s = ctx.settings;
  ctx.input(ckpt_path);
  ctx.input(csv);
  auto loaded = load_checkpoint(ckpt_path);
  auto& p = loaded.pipeline;
  const auto shape = p.model->shape();
  if ((lookback_given && s.lookback != shape.lookback) ||
      (horizon_given && s.horizon != shape.horizon)) {
    throw ParseError("checkpoint/model shape mismatch: checkpoint is L=" +
                     std::to_string(shape.lookback) + " S=" + std::to_string(shape.horizon));
  }
  s.lookback = shape.lookback;
  s.horizon = shape.horizon;
  s.model = to_string(p.model->kind());
  if (!split_given) s.split = meta_split(loaded.meta, s.split);
  const WindowSpec spec{s.lookback, s.horizon, s.batch.value_or(256)};
  auto d = prepare(csv, s.split, spec);
  check_channels(p, d.raw);

  const auto chosen = s.k ? select_alphas(s.alphas, *s.k) : s.alphas;
  const Vector alphas = Eigen::Map<const Vector>(chosen.data(), chosen.size());
  SpectralAttentionOptions opt;
  opt.learn_smoothing = s.learn_smoothing;
  opt.batched_bptt = s.bptt;
  p.attention.reset();
  attach_attention(p, alphas, opt);

  TrainConfig cfg;
  cfg.lr_model = s.lr_model.value_or(3e-4);
  cfg.lr_sa_matrix = s.lr_sa_matrix;
  cfg.lr_smoothing = s.learn_smoothing ? s.lr_smoothing : 0.0;
  cfg.epochs = s.epochs.value_or(20);
  cfg.batch = spec.batch;
  cfg.warmup = s.warmup;
  std::mt19937_64 rng(s.seed);
  cfg.seed = rng();
  s.batch = cfg.batch;
  s.epochs = cfg.epochs;
  s.lr_model = cfg.lr_model;

  const auto run = fit(p, d.scaled.values, d.split, spec, cfg, [&](const EpochRecord& r) {
    ctx.out << "epoch " << r.epoch << " train " << r.train_loss << " val "
            << r.weighted_val_loss << " alphas";
    for (long k = 0; k < r.alphas.size(); ++k) ctx.out << ' ' << r.alphas[k];
    ctx.out << '\n';
  });

  const auto dir = out_dir(ctx, "finetune_out");
  json meta = data_meta(d, csv);
  meta["split"] = {s.split.train, s.split.val, s.split.test};
  meta["stage"] = "finetune";
  meta["base_checkpoint"] = ckpt_path.string();
  meta["best_epoch"] = run.best_epoch;
  meta["seed"] = s.seed;
  meta["alphas_init"] = chosen;
  const auto ckpt = dir / "bsa.ckpt.json";
  save_checkpoint(ckpt, p, meta);
  ctx.outputs.push_back(ckpt);
  const auto metrics = dir / "metrics.csv";
  write_metrics_csv(metrics, run.epochs, true);
  ctx.outputs.push_back(metrics);
  write_manifest(ctx, dir / "manifest.json");
  ctx.out << "best epoch " << run.best_epoch << " weighted val " << run.best_weighted_val
          << "\nwrote " << ckpt.string() << '\n';
  return 0;
}

int cmd_eval(Context& ctx, const fs::path& ckpt_path, const fs::path& csv,
             bool split_given) {
  auto& s = ctx.settings;
  ctx.input(ckpt_path);
  ctx.input(csv);
  auto loaded = load_checkpoint(ckpt_path);
  auto& p = loaded.pipeline;
  const auto shape = p.model->shape();
  s.lookback = shape.lookback;
  s.horizon = shape.horizon;
  s.model = to_string(p.model->kind());
  if (!split_given) s.split = meta_split(loaded.meta, s.split);
  const int batch = s.batch.value_or(
      loaded.meta.contains("batch") ? loaded.meta["batch"].get<int>() : 256);
  s.batch = batch;
  const WindowSpec spec{s.lookback, s.horizon, batch};
  auto d = prepare(csv, s.split, spec);
  check_channels(p, d.raw);

  const auto m = evaluate(p, d.scaled.values, d.split, spec, SplitPart::test);
  json j;
  j["split"] = "test";
  j["test_range"] = {d.split.test.first, d.split.test.last};
  j["sample_count"] = m.samples;
  j["mse"] = m.mse;
  j["mae"] = m.mae;
  j["mse_per_step"] = std::vector<double>(m.mse_per_step.data(),
                                          m.mse_per_step.data() + m.mse_per_step.size());
  j["mae_per_step"] = std::vector<double>(m.mae_per_step.data(),
                                          m.mae_per_step.data() + m.mae_per_step.size());
  j["attention"] = p.attention.has_value();

  const auto dir = out_dir(ctx, "eval_out");
  const auto path = dir / "metrics.json";
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
  f.close();
  ctx.outputs.push_back(path);
  write_manifest(ctx, dir / "manifest.json");
  ctx.out << "test samples " << m.samples << " mse " << m.mse << " mae " << m.mae << '\n';
  return 0;
}

int cmd_synth(Context& ctx, const fs::path& csv) {
  auto& s = ctx.settings;
  ctx.input(csv);
  const auto data = load_csv(csv);
  const auto synth = synthesize_sine(data, s.period, s.seed);
  fs::path target;
  fs::path dir;
  if (!s.out.empty() && fs::path(s.out).extension() == ".csv") {
    target = s.out;
    dir = target.parent_path().empty() ? fs::path(".") : target.parent_path();
    std::error_code ec;
    fs::create_directories(dir, ec);
  } else {
    dir = out_dir(ctx, "synth_out");
    std::ostringstream name;
    name << csv.stem().string() << "_sine" << s.period << "_seed" << s.seed << ".csv";
    target = dir / name.str();
  }
  write_csv(synth, target);
  ctx.outputs.push_back(target);
  write_manifest(ctx, dir / (target.stem().string() + ".manifest.json"));
  ctx.out << "wrote " << target.string() << '\n';
  return 0;
}

int cmd_analyze(Context& ctx, const fs::path& ckpt_path, const fs::path& csv,
                bool split_given) {
  auto& s = ctx.settings;
  ctx.input(ckpt_path);
  ctx.input(csv);
  auto loaded = load_checkpoint(ckpt_path);
  auto& p = loaded.pipeline;
  if (!p.attention) throw UsageError("analyze needs a checkpoint with an attention module");
  const auto shape = p.model->shape();
  s.lookback = shape.lookback;
  s.horizon = shape.horizon;
  if (!split_given) s.split = meta_split(loaded.meta, s.split);
  const WindowSpec spec{s.lookback, s.horizon, 1};
  auto d = prepare(csv, s.split, spec);
  check_channels(p, d.raw);

  const auto report = analysis::build_report(*p.attention, d.scaled);
  const auto dir = out_dir(ctx, "analyze_out");
  const auto files = analysis::export_report(report, dir);
  for (const auto& f : files) ctx.outputs.push_back(f);
  write_manifest(ctx, dir / "run_manifest.json");
  ctx.out << "KDE first moment " << report.mean_first_moment << "\nwrote " << files.size()
          << " files to " << dir.string() << '\n';
  return 0;
}

}  // namespace

// ------------------------------------------------------------------ selftest

namespace {

struct CheckRow {
  std::string name;
  bool pass;
  std::string detail;
};

std::string fmt(double x) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << x;
  return os.str();
}

Vector random_alphas(std::mt19937_64& rng, int K) {
  std::uniform_real_distribution<double> u(0.2, 3.0);
  std::vector<double> v(K);
  for (auto& x : v) x = 1.0 - std::pow(10.0, -u(rng));
  std::sort(v.begin(), v.end());
  for (int k = 1; k < K; ++k) {
    if (v[k] <= v[k - 1]) v[k] = v[k - 1] + 1e-6;
  }
  return Eigen::Map<Vector>(v.data(), K);
}

Matrix random_matrix(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

CheckRow check_row_sums(std::mt19937_64& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 1 + static_cast<int>(rng() % 4);
    const int B = 1 + static_cast<int>(rng() % 64);
    const auto A = ema::build_unfolding_matrix(random_alphas(rng, K), B);
    for (const auto& slice : A.slices) {
      worst = std::max(worst, (slice.rowwise().sum().array() - 1.0).abs().maxCoeff());
    }
  }
  return {"unfolding row sums", worst <= 1e-12, "max |sum-1| " + fmt(worst)};
}

CheckRow check_batched_sequential(std::mt19937_64& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int K = 1 + static_cast<int>(rng() % 4);
    const int D = 1 + static_cast<int>(rng() % 5);
    const int B = 1 + static_cast<int>(rng() % 32);
    const Vector a = random_alphas(rng, K);
    const Matrix M0 = random_matrix(rng, K, D);
    const Matrix F = random_matrix(rng, B, D);
    const auto batched = ema::batched_momentum(M0, F, a);
    Matrix M = M0;
    for (int b = 0; b < B; ++b) {
      M = ema::ema_update(M, F.row(b).transpose(), a);
      worst = std::max(worst, (batched[b + 1] - M).cwiseAbs().maxCoeff());
    }
  }
  return {"batched/sequential equivalence", worst <= 1e-10, "max abs diff " + fmt(worst)};
}

CheckRow check_identity(std::mt19937_64& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 1 + static_cast<int>(rng() % 4);
    const int D = 1 + static_cast<int>(rng() % 5);
    const int B = 1 + static_cast<int>(rng() % 16);
    SpectralAttention sa(K, D, random_alphas(rng, K));
    const Matrix F = random_matrix(rng, B, D);
    sa.set_momentum(random_matrix(rng, K, D));
    const auto out = sa.forward_batched(F, false);
    worst = std::max(worst, (out.output - F).cwiseAbs().maxCoeff());
  }
  return {"identity init", worst <= 1e-12, "max abs diff " + fmt(worst)};
}

CheckRow check_causality(std::mt19937_64& rng) {
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 1 + static_cast<int>(rng() % 3);
    const int D = 1 + static_cast<int>(rng() % 4);
    const int B = 2 + static_cast<int>(rng() % 16);
    SpectralAttention sa(K, D, random_alphas(rng, K));
    sa.sa_matrix() = random_matrix(rng, 2 * K + 1, D);
    const Matrix M0 = random_matrix(rng, K, D);
    Matrix F = random_matrix(rng, B, D);
    sa.set_momentum(M0);
    const Matrix base = sa.forward_batched(F, false).output;
    const int t = static_cast<int>(rng() % B);
    F.row(t).array() += 3.0;
    sa.set_momentum(M0);
    const Matrix moved = sa.forward_batched(F, false).output;
    if (t > 0) {
      worst = std::max(worst, (moved.topRows(t) - base.topRows(t)).cwiseAbs().maxCoeff());
    }
  }
  return {"causality", worst == 0.0, "max change before edit " + fmt(worst)};
}

CheckRow check_pipeline_gradients(std::mt19937_64& rng, ModelKind kind, bool inject) {
  const ForecastShape shape{12, 4, 2};
  Pipeline p(make_forecaster(kind, shape, 5));
  p.model->init_parameters(rng);
  attach_attention(p, random_alphas(rng, 2));
  p.attention->sa_matrix() = random_matrix(rng, 5, 2, 0.5);
  ForecastBatch batch;
  for (int n = 0; n < shape.channels; ++n) {
    batch.inputs.push_back(random_matrix(rng, 5, shape.lookback));
    batch.targets.push_back(random_matrix(rng, 5, shape.horizon));
  }
  batch.timestamps = {0, 1, 2, 3, 4};
  const Matrix M0 = random_matrix(rng, 2, shape.channels);
  GradientHook hook;
  if (inject) {
    hook = [](ForecastGradients& g) {
      if (g.attention) g.attention->sa_matrix(0, 0) *= 1.5;
    };
  }
  const auto rep = gradcheck(p, batch, &M0, 1e-6, 1e-5, hook);
  std::string detail = "max rel err " + fmt(rep.max_rel_error);
  if (!rep.pass) {
    detail += " at " + rep.worst_name + "[" + std::to_string(rep.worst_index) + "]";
  }
  return {"gradcheck " + to_string(kind) + "+bsa", rep.pass, detail};
}

}  // namespace

bool selftest(const SelftestOptions& options, std::ostream& out) {
  std::mt19937_64 rng(options.seed);
  std::vector<CheckRow> rows;
  rows.push_back(check_row_sums(rng));
  rows.push_back(check_batched_sequential(rng));
  rows.push_back(check_identity(rng));
  rows.push_back(check_causality(rng));
  rows.push_back(check_pipeline_gradients(rng, ModelKind::dlinear, options.inject_gradient_bug));
  rows.push_back(check_pipeline_gradients(rng, ModelKind::rlinear, options.inject_gradient_bug));

  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  out << std::left << std::setw(static_cast<int>(width)) << "check" << "  result  detail\n";
  bool ok = true;
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.name << "  "
        << (r.pass ? "PASS  " : "FAIL  ") << "  " << r.detail << '\n';
    ok = ok && r.pass;
  }
  out << (ok ? "all checks passed" : "selftest FAILED") << '\n';
  return ok;
}

// ------------------------------------------------------------------ entry

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (const char* threads = std::getenv("BSA_THREADS")) {
    const int n = std::atoi(threads);
    if (n > 0) Eigen::setNbThreads(n);
  }

  CLI::App app{"Batched spectral attention forecasting"};
  app.require_subcommand(1);

  std::string config_path;
  std::map<std::string, std::string> flag_values;
  bool no_bptt = false;
  bool freeze_alpha = false;
  bool inject_fault = false;
  std::string ckpt_arg;
  std::string data_arg;

  auto add_common = [&](CLI::App* sub, const std::vector<std::string>& keys) {
    sub->add_option("--config", config_path, "key = value config file");
    for (const auto& key : keys) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      sub->add_option_function<std::string>(
          flag, [&flag_values, key](const std::string& v) { flag_values[key] = v; },
          "overrides config key " + key);
    }
  };

  auto* pretrain = app.add_subcommand("pretrain", "train the base forecaster");
  pretrain->add_option("data", data_arg, "CSV file")->required();
  add_common(pretrain, {"seed", "lookback", "horizon", "batch", "epochs", "model",
                        "lr_model", "lr_grid", "split", "ma_window", "shuffle_pretrain", "out"});

  auto* finetune = app.add_subcommand("finetune", "attach BSA to a base checkpoint and train");
  finetune->add_option("checkpoint", ckpt_arg, "base checkpoint")->required();
  finetune->add_option("data", data_arg, "CSV file")->required();
  add_common(finetune, {"seed", "lookback", "horizon", "batch", "epochs", "k", "alphas",
                        "lr_model", "lr_sa_matrix", "lr_smoothing", "split", "warmup", "out"});
  finetune->add_flag("--no-bptt", no_bptt, "detach momentum across samples");
  finetune->add_flag("--freeze-alpha", freeze_alpha, "keep smoothing factors fixed");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on the test split");
  eval->add_option("checkpoint", ckpt_arg, "checkpoint")->required();
  eval->add_option("data", data_arg, "CSV file")->required();
  add_common(eval, {"seed", "batch", "split", "out"});

  auto* synth = app.add_subcommand("synth", "add a sine wave to every channel");
  synth->add_option("data", data_arg, "CSV file")->required();
  add_common(synth, {"seed", "period", "out"});

  auto* analyze = app.add_subcommand("analyze", "SA-matrix KDE and spectrum report");
  analyze->add_option("checkpoint", ckpt_arg, "checkpoint with attention")->required();
  analyze->add_option("data", data_arg, "CSV file")->required();
  add_common(analyze, {"seed", "split", "out"});

  auto* self = app.add_subcommand("selftest", "run the invariant battery");
  add_common(self, {"seed"});
  self->add_flag("--inject-gradient-bug", inject_fault)->group("");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  auto* active = app.get_subcommands().front();
  Context ctx{active->get_name(), args, {}, out, err, {}, {}};
  try {
    if (!config_path.empty()) {
      ctx.input(config_path);
      apply_config_file(ctx.settings, config_path);
    }
    for (const auto& [k, v] : flag_values) apply_setting(ctx.settings, k, v);
    if (no_bptt) ctx.settings.bptt = false;
    if (freeze_alpha) ctx.settings.learn_smoothing = false;

    const std::string name = active->get_name();
    if (name == "pretrain") return cmd_pretrain(ctx, data_arg);
    if (name == "finetune") {
      return cmd_finetune(ctx, ckpt_arg, data_arg, flag_values.count("lookback") > 0,
                          flag_values.count("horizon") > 0,
                          flag_values.count("split") > 0);
    }
    if (name == "eval") return cmd_eval(ctx, ckpt_arg, data_arg, flag_values.count("split") > 0);
    if (name == "synth") return cmd_synth(ctx, data_arg);
    if (name == "analyze") {
      return cmd_analyze(ctx, ckpt_arg, data_arg, flag_values.count("split") > 0);
    }
    return selftest({inject_fault, ctx.settings.seed}, out) ? 0 : 1;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace bsa::cli
