#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"

#include "bsa/checkpoint.hpp"
#include "bsa/cli.hpp"
#include "bsa/training.hpp"

using namespace bsa;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "bsa_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

fs::path fixture(const std::string& name, long rows, int channels, std::uint64_t seed) {
  const auto path = workdir() / name;
  if (!fs::exists(path)) {
    ArNoiseSpec spec;
    spec.length = rows;
    spec.channels = channels;
    spec.ar_coefficient = 0.9;
    write_csv(generate_ar_noise(spec, seed), path);
  }
  return path;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small pretrained base shared by several cases.
fs::path base_checkpoint() {
  static const fs::path ckpt = [] {
    const auto csv = fixture("tiny.csv", 200, 2, 1);
    const auto dir = workdir() / "base";
    const auto r = run_cli({"pretrain", csv.string(), "--lookback", "16", "--horizon", "8",
                            "--batch", "16", "--epochs", "3", "--lr-model", "0.01",
                            "--seed", "5", "--out", dir.string()});
    REQUIRE(r.code == 0);
    return dir / "base.ckpt.json";
  }();
  return ckpt;
}

}  // namespace

TEST_CASE("pretrain on a tiny file") {
  const auto csv = fixture("tiny.csv", 200, 2, 1);
  const auto dir = workdir() / "pretrain";
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = run_cli({"pretrain", csv.string(), "--lookback", "16", "--horizon", "8",
                          "--epochs", "4", "--lr-grid", "0.01,0.001", "--out", dir.string()});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(secs <= 10.0);
  for (const char* f : {"base.ckpt.json", "metrics.csv", "lr_search.csv", "manifest.json"}) {
    CHECK(fs::exists(dir / f));
  }
  const auto manifest = read_json(dir / "manifest.json");
  CHECK(manifest["format"] == "bsa-run-manifest");
  CHECK(manifest["command"] == "pretrain");
  CHECK(manifest["config"]["epochs"] == 4);
  CHECK(manifest["config"]["batch"] == 64);
  CHECK(manifest["inputs"].size() == 1);
  const auto meta = load_checkpoint(dir / "base.ckpt.json").meta;
  CHECK(meta["stage"] == "pretrain");
  const double lr = meta["lr_model"].get<double>();
  CHECK((lr == 0.01 || lr == 0.001));
  const auto search = slurp(dir / "lr_search.csv");
  CHECK(search.rfind("lr,best_epoch,best_weighted_val_loss,selected\n", 0) == 0);
  CHECK(std::count(search.begin(), search.end(), '\n') == 3);
}

TEST_CASE("seeded runs are reproducible") {
  const auto csv = fixture("tiny.csv", 200, 2, 1);
  auto once = [&](const std::string& tag) {
    const auto dir = workdir() / ("repeat_" + tag);
    const auto r = run_cli({"pretrain", csv.string(), "--lookback", "16", "--horizon", "8",
                            "--epochs", "2", "--lr-model", "0.01", "--seed", "3",
                            "--shuffle-pretrain", "true", "--out", dir.string()});
    REQUIRE(r.code == 0);
    return slurp(dir / "base.ckpt.json");
  };
  CHECK(once("a") == once("b"));
}

TEST_CASE("usage errors") {
  const auto csv = fixture("tiny.csv", 200, 2, 1);
  auto r = run_cli({"pretrain", csv.string(), "--lookback", "150", "--horizon", "60"});
  CHECK(r.code == 2);
  CHECK(r.err.find("exceeds") != std::string::npos);

  const auto cfg = workdir() / "bad.cfg";
  std::ofstream(cfg) << "# comment\nlookback = 16\nlearning_rate = 3\n";
  r = run_cli({"pretrain", csv.string(), "--config", cfg.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("valid keys") != std::string::npos);
  CHECK(r.err.find("lr_model") != std::string::npos);

  r = run_cli({"pretrain"});
  CHECK(r.code == 2);
  r = run_cli({"frobnicate"});
  CHECK(r.code == 2);
  r = run_cli({"finetune", base_checkpoint().string(), csv.string(), "--k", "0"});
  CHECK(r.code == 2);
  r = run_cli({"eval", (workdir() / "nope.json").string(), csv.string()});
  CHECK(r.code == 1);
}

TEST_CASE("config file and flags") {
  cli::Settings s;
  const auto cfg = workdir() / "good.cfg";
  std::ofstream(cfg) << "lookback = 48  # trailing comment\nalphas = 0.5, 0.9\nbptt = false\n";
  cli::apply_config_file(s, cfg);
  CHECK(s.lookback == 48);
  CHECK(s.alphas == std::vector<double>{0.5, 0.9});
  CHECK_FALSE(s.bptt);
  cli::apply_setting(s, "split", "0.6,0.2,0.2");
  CHECK(s.split.val == 0.2);
  CHECK_THROWS_AS(cli::apply_setting(s, "split", "0.9,0.2,0.2"), cli::UsageError);
  CHECK_THROWS_AS(cli::apply_setting(s, "alphas", "0.5,1.0"), cli::UsageError);
  CHECK_THROWS_AS(cli::apply_setting(s, "lookback", "abc"), cli::UsageError);
  CHECK(cli::select_alphas({0.9, 0.99, 0.999}, 1) == std::vector<double>{0.99});
  CHECK(cli::select_alphas({0.9, 0.99, 0.999}, 3) == std::vector<double>{0.9, 0.99, 0.999});
  CHECK(cli::select_alphas({0.1, 0.2, 0.3, 0.4, 0.5}, 2).size() == 2);
}

TEST_CASE("fine-tune starts where the base left off") {
  const auto csv = fixture("tiny.csv", 200, 2, 1);
  const auto base = base_checkpoint();
  const auto dir = workdir() / "frozen";
  auto r = run_cli({"finetune", base.string(), csv.string(), "--epochs", "2", "--batch", "16",
                    "--lr-model", "0", "--lr-sa-matrix", "0", "--freeze-alpha",
                    "--out", dir.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("alphas 0.9 0.99 0.999") != std::string::npos);

  const auto e1 = workdir() / "eval_base";
  const auto e2 = workdir() / "eval_frozen";
  REQUIRE(run_cli({"eval", base.string(), csv.string(), "--out", e1.string()}).code == 0);
  REQUIRE(run_cli({"eval", (dir / "bsa.ckpt.json").string(), csv.string(), "--out", e2.string()}).code == 0);
  const auto a = read_json(e1 / "metrics.json");
  const auto b = read_json(e2 / "metrics.json");
  CHECK(std::abs(a["mse"].get<double>() - b["mse"].get<double>()) <= 1e-12);
  CHECK_FALSE(a["attention"].get<bool>());
  CHECK(b["attention"].get<bool>());
}

TEST_CASE("fine-tune logs the smoothing factors") {
  const auto csv = fixture("tiny.csv", 200, 2, 1);
  const auto dir = workdir() / "learn";
  const auto r = run_cli({"finetune", base_checkpoint().string(), csv.string(), "--epochs", "3",
                          "--batch", "16", "--k", "2", "--lr-smoothing", "0.05",
                          "--out", dir.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto metrics = slurp(dir / "metrics.csv");
  CHECK(metrics.find("alpha_0,alpha_1") != std::string::npos);
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 4);
  const auto ck = load_checkpoint(dir / "bsa.ckpt.json");
  REQUIRE(ck.pipeline.attention);
  CHECK(ck.pipeline.attention->factors() == 2);
  CHECK(ck.meta["stage"] == "finetune");

  const auto wrong = fixture("three.csv", 200, 3, 2);
  const auto bad = run_cli({"finetune", base_checkpoint().string(), wrong.string(), "--epochs", "1"});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("checkpoint/model shape mismatch") != std::string::npos);
  const auto shape = run_cli({"finetune", base_checkpoint().string(), csv.string(), "--lookback", "32"});
  CHECK(shape.code == 1);
  CHECK(shape.err.find("checkpoint/model shape mismatch") != std::string::npos);
}

TEST_CASE("eval agrees with the library") {
  const auto csv = fixture("tiny.csv", 200, 2, 1);
  const auto base = base_checkpoint();
  const auto dir = workdir() / "eval_check";
  const auto r = run_cli({"eval", base.string(), csv.string(), "--out", dir.string()});
  REQUIRE(r.code == 0);
  const auto j = read_json(dir / "metrics.json");

  auto ck = load_checkpoint(base);
  const auto data = load_csv(csv);
  const WindowSpec spec{16, 8, 16};
  const auto bounds = boundaries_from_ratios(200, SplitRatios{});
  const auto split = consecutive_split(bounds, spec);
  const auto scaled = standardize(data, train_statistics(data.values, bounds.train_end));
  const auto m = evaluate(ck.pipeline, scaled.values, split, spec, SplitPart::test);
  CHECK(j["mse"].get<double>() == doctest::Approx(m.mse).epsilon(1e-12));
  CHECK(j["mae"].get<double>() == doctest::Approx(m.mae).epsilon(1e-12));
  CHECK(j["sample_count"] == split.test.size());
  CHECK(j["test_range"][0] == split.test.first);
  CHECK(j["mse_per_step"].size() == 8);

  // A zero model predicts 0 in standardised units, so the score is the mean
  // square of the standardised targets.
  Pipeline zero(make_forecaster(ModelKind::dlinear, {16, 8, 2}, 25));
  const auto zpath = workdir() / "zero.ckpt.json";
  save_checkpoint(zpath, zero);
  const auto zdir = workdir() / "eval_zero";
  REQUIRE(run_cli({"eval", zpath.string(), csv.string(), "--out", zdir.string()}).code == 0);
  double acc = 0.0;
  for (long t = split.test.first; t <= split.test.last; ++t) {
    acc += scaled.values.middleRows(t, 8).squaredNorm();
  }
  CHECK(read_json(zdir / "metrics.json")["mse"].get<double>() ==
        doctest::Approx(acc / (split.test.size() * 16.0)).epsilon(1e-12));
}

TEST_CASE("synth output") {
  const auto csv = fixture("tiny.csv", 200, 2, 1);
  const auto target = workdir() / "synth" / "s.csv";
  const auto r1 = run_cli({"synth", csv.string(), "--period", "50", "--seed", "4", "--out", target.string()});
  REQUIRE(r1.code == 0);
  const auto first = slurp(target);
  const auto r2 = run_cli({"synth", csv.string(), "--period", "50", "--seed", "4", "--out", target.string()});
  REQUIRE(r2.code == 0);
  CHECK(first == slurp(target));
  const auto original = load_csv(csv);
  const auto synth = load_csv(target);
  CHECK(synth.channel_names == original.channel_names);
  CHECK(synth.timestamps == original.timestamps);
  CHECK(synth.length() == original.length());
  CHECK(fs::exists(workdir() / "synth" / "s.manifest.json"));

  const auto dir = workdir() / "synth_dir";
  REQUIRE(run_cli({"synth", csv.string(), "--period", "50", "--out", dir.string()}).code == 0);
  CHECK(fs::exists(dir / "tiny_sine50_seed0.csv"));
}

TEST_CASE("analyze writes what the manifest lists") {
  const auto csv = fixture("tiny.csv", 200, 2, 1);
  const auto ft = workdir() / "for_analyze";
  REQUIRE(run_cli({"finetune", base_checkpoint().string(), csv.string(), "--epochs", "1",
                   "--batch", "16", "--out", ft.string()}).code == 0);
  const auto dir = workdir() / "analyze";
  const auto r = run_cli({"analyze", (ft / "bsa.ckpt.json").string(), csv.string(), "--out", dir.string()});
  INFO(r.err);
  REQUIRE(r.code == 0);
  const auto m = read_json(dir / "manifest.json");
  for (const auto& f : m["files"]) CHECK(fs::exists(dir / f.get<std::string>()));
  const auto run_manifest = read_json(dir / "run_manifest.json");
  for (const auto& f : run_manifest["outputs"]) CHECK(fs::exists(f.get<std::string>()));

  const auto no_attention = run_cli({"analyze", base_checkpoint().string(), csv.string()});
  CHECK(no_attention.code == 2);
}

TEST_CASE("selftest") {
  std::ostringstream out;
  CHECK(cli::selftest({}, out));
  CHECK(out.str().find("all checks passed") != std::string::npos);
  std::ostringstream bad;
  CHECK_FALSE(cli::selftest({.inject_gradient_bug = true}, bad));
  CHECK(bad.str().find("FAIL") != std::string::npos);
  CHECK(bad.str().find("sa_matrix") != std::string::npos);
  CHECK(run_cli({"selftest", "--inject-gradient-bug"}).code == 1);
}
