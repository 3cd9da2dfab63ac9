// Command-line front end: meta-train, meta-eval, sweep, export-mask, make-synthetic.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtlab/analysis.hpp"
#include "mtlab/checkpoint.hpp"
#include "mtlab/config.hpp"
#include "mtlab/error.hpp"
#include "mtlab/experiment.hpp"
#include "mtlab/tasks.hpp"

namespace {

using mtlab::RunConfig;

struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value configuration file (flags override it)");
    for (const auto& key : RunConfig::keys()) options[key] = app->add_option("--" + key, values[key]);
  }

  bool given(const std::string& key) const { return options.at(key)->count() > 0; }

  // File first, then explicit flags.
  void apply(RunConfig& cfg) const {
    if (!config_file.empty()) mtlab::apply_config_file(cfg, config_file);
    for (const auto& key : RunConfig::keys())
      if (given(key)) cfg.set(key, values.at(key));
  }

  bool file_or_flag_sets_model() const {
    if (!config_file.empty()) return true;
    for (const char* k : {"arch", "width", "ways", "batchnorm", "hidden"})
      if (given(k)) return true;
    return false;
  }
};

mtlab::tasks::Split parse_split(const std::string& s) {
  if (s == "train") return mtlab::tasks::Split::train;
  if (s == "val") return mtlab::tasks::Split::val;
  if (s == "test") return mtlab::tasks::Split::test;
  throw mtlab::ConfigError("unknown split '" + s + "'");
}

void print_summary(const mtlab::exp::EvalSummary& s, int episodes) {
  std::printf("%s %.6f +- %.6f (%zu seeds x %d episodes)\n", s.regression ? "mse" : "accuracy", s.mean, s.stddev,
              s.per_seed.size(), episodes);
  for (std::size_t i = 0; i < s.per_seed.size(); ++i) std::printf("  seed %zu: %.6f\n", i, s.per_seed[i]);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learning lab: Meta-ticket, MAML, ANIL and BOIL on MLPs"};
  app.require_subcommand(1);

  ConfigFlags train_flags;
  std::string resume;
  std::int64_t stop_after = -1;
  bool quiet = false;
  auto* train = app.add_subcommand("meta-train", "run the outer meta-training loop");
  train_flags.attach(train);
  train->add_option("--resume", resume, "continue from a checkpoint");
  train->add_option("--stop-after", stop_after, "stop after this many iterations (schedule horizon unchanged)");
  train->add_flag("--quiet", quiet, "no progress output");

  ConfigFlags eval_flags;
  std::string eval_ckpt;
  std::string split = "test";
  bool random_mask = false;
  auto* eval = app.add_subcommand("meta-eval", "evaluate a checkpoint on fresh episodes");
  eval_flags.attach(eval);
  eval->add_option("--checkpoint", eval_ckpt, "MTKT checkpoint")->required();
  eval->add_option("--split", split, "train, val or test");
  eval->add_flag("--random-mask", random_mask, "replace masks by random ones of equal per-layer sparsity");

  ConfigFlags sweep_flags;
  std::string axis;
  std::vector<std::string> sweep_values;
  auto* sw = app.add_subcommand("sweep", "train and evaluate once per value of one hyperparameter");
  sweep_flags.attach(sw);
  sw->add_option("--axis", axis, "outer-lr, p-init or width")->required();
  sw->add_option("--values", sweep_values, "comma-separated values")->required()->delimiter(',');

  std::string mask_ckpt;
  std::string layer = "fc1";
  std::string mask_out = "masks";
  auto* em = app.add_subcommand("export-mask", "write a layer's masks as binary PGM images");
  em->add_option("--checkpoint", mask_ckpt, "MTKT checkpoint")->required();
  em->add_option("--layer", layer, "layer name (fc1, fc2, ...)");
  em->add_option("--out", mask_out, "output directory");

  ConfigFlags synth_flags;
  std::string synth_out = "synthetic";
  auto* ms = app.add_subcommand("make-synthetic", "write the synthetic family as train/val/test MTDS files");
  synth_flags.attach(ms);
  ms->add_option("--out", synth_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      RunConfig cfg;
      train_flags.apply(cfg);
      mtlab::exp::TrainOptions opts;
      if (!resume.empty()) {
        // Resume with the stored configuration; only output and worker flags apply.
        const auto stored = mtlab::config_from_entries(mtlab::ckpt::load(resume).config);
        RunConfig merged = stored;
        merged.out_dir = cfg.out_dir;
        merged.workers = cfg.workers;
        cfg = merged;
        opts.resume = resume;
      }
      if (stop_after >= 0) opts.stop_after = stop_after;
      if (!quiet) opts.progress = &std::cerr;
      const auto data = mtlab::exp::load_data(cfg);
      const auto res = mtlab::exp::meta_train(cfg, data, opts);
      std::printf("final checkpoint: %s\n", res.final_checkpoint.string().c_str());
      if (res.best_checkpoint) std::printf("best checkpoint: %s\n", res.best_checkpoint->string().c_str());
      std::printf("best validation %s: %.6f\n", cfg.regression() ? "mse" : "accuracy",
                  cfg.regression() ? -res.state.best_val : res.state.best_val);
    } else if (*eval) {
      const auto ck = mtlab::ckpt::load(eval_ckpt);
      RunConfig stored = mtlab::config_from_entries(ck.config);
      RunConfig cfg = stored;
      eval_flags.apply(cfg);
      mtlab::exp::EvalOptions opts;
      opts.split = parse_split(split);
      opts.episodes = cfg.eval_episodes;
      opts.seeds = cfg.eval_seeds;
      opts.steps = cfg.eval_step_count();
      opts.seed = cfg.seed;
      opts.workers = cfg.workers;
      opts.random_mask = random_mask;
      if (eval_flags.file_or_flag_sets_model()) opts.expect_model = cfg.model();
      RunConfig data_cfg = stored;
      data_cfg.dataset = cfg.dataset;
      data_cfg.rotate = cfg.rotate;
      const auto data = mtlab::exp::load_data(data_cfg);
      print_summary(mtlab::exp::meta_eval(ck, data, opts), opts.episodes);
    } else if (*sw) {
      RunConfig cfg;
      sweep_flags.apply(cfg);
      const auto data = mtlab::exp::load_data(cfg);
      mtlab::exp::EvalOptions opts;
      opts.split = mtlab::tasks::Split::test;
      opts.episodes = cfg.eval_episodes;
      opts.seeds = cfg.eval_seeds;
      opts.seed = cfg.seed;
      opts.workers = cfg.workers;
      const auto rows = mtlab::exp::sweep(cfg, data, mtlab::exp::parse_sweep_axis(axis), sweep_values, opts, &std::cerr);
      std::printf("%s,best_val,eval_mean,eval_std\n", axis.c_str());
      for (const auto& r : rows)
        std::printf("%s,%.6f,%.6f,%.6f\n", r.value.c_str(), r.best_val, r.eval.mean, r.eval.stddev);
    } else if (*em) {
      const auto ck = mtlab::ckpt::load(mask_ckpt);
      const auto st = mtlab::exp::from_checkpoint(ck);
      const auto files =
          mtlab::analysis::export_mask_pgm(st.params, layer, mask_out, static_cast<std::int64_t>(ck.iteration));
      std::printf("wrote %zu images to %s\n", files.size(), mask_out.c_str());
    } else if (*ms) {
      RunConfig cfg;
      synth_flags.apply(cfg);
      const auto data = mtlab::exp::synthetic_splits(cfg);
      const std::filesystem::path dir(synth_out);
      mtlab::tasks::save_mtds(*data.train, dir / "train.mtds");
      mtlab::tasks::save_mtds(*data.val, dir / "val.mtds");
      mtlab::tasks::save_mtds(*data.test, dir / "test.mtds");
      std::printf("wrote %zu/%zu/%zu classes to %s\n", data.train->classes.size(), data.val->classes.size(),
                  data.test->classes.size(), synth_out.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
