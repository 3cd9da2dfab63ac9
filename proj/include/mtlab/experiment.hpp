#pragma once

// Experiment orchestration: data loading, the outer meta-training loop with
// meta-validation and model selection, checkpoint conversion, evaluation and
// hyperparameter sweeps.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mtlab/checkpoint.hpp"
#include "mtlab/config.hpp"
#include "mtlab/meta.hpp"
#include "mtlab/nn.hpp"
#include "mtlab/rng.hpp"
#include "mtlab/tasks.hpp"

namespace mtlab::exp {

struct DataSplits {
  bool regression = false;
  std::optional<tasks::ClassDataset> train;
  std::optional<tasks::ClassDataset> val;
  std::optional<tasks::ClassDataset> test;

  const tasks::ClassDataset& get(tasks::Split s) const;
};

// The synthetic family (train, val, test) for a configuration. The three
// splits share one set of informative coordinates and use disjoint classes.
DataSplits synthetic_splits(const RunConfig& config);
DataSplits load_data(const RunConfig& config);

// `count` episodes of the configured shape from one split (sinusoid tasks for
// regression).
std::vector<tasks::Episode> sample_episodes(const DataSplits& data, tasks::Split split, const RunConfig& config,
                                            RngState& rng, std::size_t count);

struct TrainState {
  RunConfig config;
  nn::ParamSet params;
  std::vector<meta::BlockPlan> plan;
  meta::ScoreThresholds thresholds;
  meta::OuterOptState opt;
  RngState rng;
  std::int64_t iteration = 0;
  // Best meta-validation score so far: accuracy, or -MSE for regression.
  double best_val = -std::numeric_limits<double>::infinity();
};

TrainState init_state(const RunConfig& config);
ckpt::Checkpoint to_checkpoint(const TrainState& state);
TrainState from_checkpoint(const ckpt::Checkpoint& ck);

// Query accuracy (classification) or MSE (regression) per episode after
// `steps` inner steps. The parameter set is never modified.
std::vector<double> evaluate_episodes(const nn::ParamSet& params, std::span<const meta::BlockPlan> plan,
                                      const meta::MetaConfig& config, std::span<const tasks::Episode> episodes,
                                      int steps, int workers = 1);

struct TrainOptions {
  std::optional<std::filesystem::path> resume{};
  // Stop (and write final.mtkt) once this many iterations are done, without
  // changing the schedule horizon.
  std::optional<std::int64_t> stop_after{};
  std::ostream* progress = nullptr;
};

struct TrainResult {
  TrainState state;
  std::filesystem::path final_checkpoint;
  std::optional<std::filesystem::path> best_checkpoint;
};

// Writes out_dir/{final,best}.mtkt and out_dir/metrics.csv.
TrainResult meta_train(const RunConfig& config, const DataSplits& data, const TrainOptions& options = {});

struct EvalOptions {
  tasks::Split split = tasks::Split::test;
  int episodes = 600;
  int seeds = 3;
  int steps = 0;  // 0 = training S
  std::uint64_t seed = 0;
  int workers = 1;
  bool random_mask = false;  // replace every mask by a random one of equal sparsity
  std::optional<nn::ModelConfig> expect_model;
};

struct EvalSummary {
  bool regression = false;
  double mean = 0.0;    // mean over seeds of the per-seed mean
  double stddev = 0.0;  // across seeds (population)
  std::vector<double> per_seed;
};

EvalSummary meta_eval(const ckpt::Checkpoint& ck, const DataSplits& data, const EvalOptions& options);

enum class SweepAxis { outer_lr, p_init, width };
SweepAxis parse_sweep_axis(std::string_view s);
std::string_view to_string(SweepAxis a);

struct SweepRow {
  std::string value;
  double best_val = 0.0;
  EvalSummary eval;
};

// One train + eval per value; writes out_dir/sweep.csv.
std::vector<SweepRow> sweep(const RunConfig& config, const DataSplits& data, SweepAxis axis,
                            const std::vector<std::string>& values, const EvalOptions& eval,
                            std::ostream* progress = nullptr);

}  // namespace mtlab::exp
