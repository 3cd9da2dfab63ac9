#pragma once

// Run configuration: one flat record covering the model, the meta-learner,
// the data source and the run itself. Files use `key=value` lines with `#`
// comments; keys are the command-line flag names without the leading dashes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mtlab/meta.hpp"
#include "mtlab/nn.hpp"

namespace mtlab {

struct RunConfig {
  // data: "synthetic", "sinusoid", or a directory holding train/val/test .mtds files
  std::string dataset = "synthetic";
  bool rotate = true;  // rotation augmentation for image containers
  std::size_t synthetic_train_classes = 240;
  std::size_t synthetic_val_classes = 60;
  std::size_t synthetic_test_classes = 120;
  std::size_t synthetic_per_class = 20;
  std::size_t synthetic_dim = 784;
  std::size_t synthetic_informative = 64;  // 0 = every dimension carries signal
  double synthetic_margin = 3.0;
  double synthetic_background_noise = 1.0;
  double synthetic_smoothness = 0.0;
  std::uint64_t data_seed = 7;

  // model
  nn::Architecture arch = nn::Architecture::omniglot_mlp5;
  int width = 1;
  bool batchnorm = true;
  bool constant_init = false;
  std::vector<std::size_t> hidden;  // custom architecture only

  // episodes
  int ways = 5;
  int shots = 5;
  int queries = 0;  // 0 = same as shots

  // meta-learner
  meta::Method method = meta::Method::metaticket;
  int inner_steps = 1;
  int meta_batch = 4;
  std::optional<double> inner_lr;   // 0.4, or 0.01 for sinusoid
  std::vector<double> alphas;       // explicit per-layer inner learning rates
  std::optional<double> outer_lr;   // 10.0 for score training, 0.001 for Adam
  double param_lr = 0.001;
  std::int64_t iterations = 30000;
  double p_init = 0.0;
  double momentum = 0.9;
  std::optional<int> iterand_k;     // 1000 for metaticket-iterand
  bool second_order = true;
  std::vector<nn::MetaMode> layer_modes;

  // run
  std::uint64_t seed = 0;
  int workers = 1;
  int eval_steps = 0;  // 0 = same as inner-steps
  int eval_episodes = 600;
  int eval_seeds = 3;
  int val_episodes = 100;
  std::int64_t eval_interval = 500;
  std::int64_t log_interval = 100;
  std::filesystem::path out_dir = "run";

  // Value-level checks and method-dependent defaults.
  void validate() const;
  int query_count() const { return queries > 0 ? queries : shots; }
  int eval_step_count() const { return eval_steps > 0 ? eval_steps : inner_steps; }
  bool regression() const { return arch == nn::Architecture::sinusoid_mlp3; }

  nn::ModelConfig model() const;
  meta::MetaConfig meta() const;

  // Sets one key from its textual value; throws ConfigError for unknown
  // keys or unparsable values.
  void set(std::string_view key, std::string_view value);
  // Every key with its current textual value, in a fixed order.
  std::vector<std::pair<std::string, std::string>> entries() const;
  static const std::vector<std::string>& keys();
};

// Applies `key=value` lines to `config`. Blank lines and text after `#` are ignored.
void apply_config_text(RunConfig& config, std::string_view text);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
RunConfig config_from_entries(const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace mtlab
