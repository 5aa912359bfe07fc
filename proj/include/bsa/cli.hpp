#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "bsa/data.hpp"

namespace bsa::cli {

// Bad flag, bad config key or inconsistent settings; exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Resolved settings: built-in defaults, then the --config file, then flags.
// Unset optionals take the per-command defaults (pretrain: batch 64,
// 30 epochs, learning rate searched over lr_grid; finetune: batch 256,
// 20 epochs, lr_model 3e-4).
struct Settings {
  std::string model = "dlinear";
  int lookback = 96;
  int horizon = 96;
  std::optional<int> batch;
  std::optional<int> epochs;
  std::optional<double> lr_model;
  std::vector<double> lr_grid{0.03, 0.01, 0.003, 0.001, 0.0003};
  double lr_sa_matrix = 0.03;
  double lr_smoothing = 0.003;
  std::vector<double> alphas{0.9, 0.99, 0.999};
  std::optional<int> k;
  bool bptt = true;
  bool learn_smoothing = true;
  bool warmup = true;
  bool shuffle_pretrain = false;
  std::uint64_t seed = 0;
  SplitRatios split{0.7, 0.1, 0.2};
  int ma_window = 25;
  double period = 300.0;
  std::string out;
};

const std::vector<std::string>& config_keys();
// Throws UsageError for unknown keys (listing the valid ones) or bad values.
void apply_setting(Settings& s, const std::string& key, const std::string& value);
// key = value lines; '#' starts a comment.
void apply_config_file(Settings& s, const std::filesystem::path& path);
nlohmann::json settings_to_json(const Settings& s);

// K factors picked from `alphas` at evenly spread indices (K = 1 takes the
// middle one). K equal to the list length returns the list unchanged.
std::vector<double> select_alphas(const std::vector<double>& alphas, int k);

// 64-bit FNV-1a of a file's bytes, hex encoded.
std::string file_digest(const std::filesystem::path& path);

// Entry point shared by the executable and the tests. Returns the exit code:
// 0 success, 1 runtime failure (I/O, parse, numeric), 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct SelftestOptions {
  bool inject_gradient_bug = false;
  std::uint64_t seed = 0;
};
// Invariant battery; prints one row per check. True iff every check passes.
bool selftest(const SelftestOptions& options, std::ostream& out);

}  // namespace bsa::cli
