#include "mtlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <ostream>
#include <thread>

#include "mtlab/analysis.hpp"
#include "mtlab/error.hpp"

namespace mtlab::exp {

namespace {

// Salts that give validation and evaluation their own streams, independent
// of the training stream drawn from `seed`.
constexpr std::uint64_t kValidationSalt = 0x76616c6964617465ULL;
constexpr std::uint64_t kRandomMaskSalt = 0x72616e646d61736bULL;

std::vector<std::uint64_t> extents_of(const ad::Shape& s) { return {s.begin(), s.end()}; }

void expect_extents(const ckpt::TensorSection& s, const ad::Shape& shape) {
  if (s.extents != extents_of(shape)) {
    throw FormatError("extents do not match the model (" + ad::to_string(shape) + " expected)", s.name, 0);
  }
}

bool same_model(const nn::ModelConfig& a, const nn::ModelConfig& b) {
  return a.arch == b.arch && a.ways == b.ways && a.use_batchnorm == b.use_batchnorm && a.dims() == b.dims();
}

template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  const auto w = static_cast<std::size_t>(std::clamp<int>(workers, 1, static_cast<int>(std::max<std::size_t>(n, 1))));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < w; ++k) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double mean_of(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace

const tasks::ClassDataset& DataSplits::get(tasks::Split s) const {
  const auto& d = s == tasks::Split::train ? train : s == tasks::Split::val ? val : test;
  if (!d) throw DatasetError("no " + std::string(tasks::to_string(s)) + " split loaded");
  return *d;
}

DataSplits synthetic_splits(const RunConfig& config) {
  RngState rng(config.data_seed);
  tasks::SyntheticOptions opts;
  opts.background_noise = config.synthetic_background_noise;
  opts.smoothness = config.synthetic_smoothness;
  if (config.synthetic_informative > 0)
    opts.informative = tasks::choose_coordinates(rng, config.synthetic_dim, config.synthetic_informative);
  DataSplits d;
  auto make = [&](std::size_t classes, tasks::Split split) {
    auto ds = tasks::synthetic_classification(rng, classes, config.synthetic_per_class, config.synthetic_dim,
                                              config.synthetic_margin, opts);
    ds.split = split;
    return ds;
  };
  d.train = make(config.synthetic_train_classes, tasks::Split::train);
  d.val = make(config.synthetic_val_classes, tasks::Split::val);
  d.test = make(config.synthetic_test_classes, tasks::Split::test);
  return d;
}

DataSplits load_data(const RunConfig& config) {
  if (config.dataset == "sinusoid") {
    DataSplits d;
    d.regression = true;
    return d;
  }
  if (config.dataset == "synthetic") return synthetic_splits(config);
  const std::filesystem::path dir(config.dataset);
  if (!std::filesystem::is_directory(dir)) throw DatasetError("dataset directory not found: " + dir.string());
  DataSplits d;
  auto load = [&](const char* file, tasks::Split split) -> std::optional<tasks::ClassDataset> {
    const auto p = dir / file;
    if (!std::filesystem::exists(p)) return std::nullopt;
    auto ds = tasks::load_mtds(p, split);
    if (config.rotate) ds = tasks::rotate_augment(ds);
    return ds;
  };
  d.train = load("train.mtds", tasks::Split::train);
  d.val = load("val.mtds", tasks::Split::val);
  d.test = load("test.mtds", tasks::Split::test);
  if (!d.train && !d.val && !d.test) throw DatasetError("no .mtds containers in " + dir.string());
  return d;
}

std::vector<tasks::Episode> sample_episodes(const DataSplits& data, tasks::Split split, const RunConfig& config,
                                            RngState& rng, std::size_t count) {
  std::vector<tasks::Episode> out;
  out.reserve(count);
  const auto shots = static_cast<std::size_t>(config.shots);
  const auto queries = static_cast<std::size_t>(config.query_count());
  if (data.regression) {
    for (std::size_t i = 0; i < count; ++i) out.push_back(tasks::sinusoid_task(rng, shots, queries));
    return out;
  }
  const auto& ds = data.get(split);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(tasks::sample_episode(ds, static_cast<std::size_t>(config.ways), shots, queries, rng));
  return out;
}

TrainState init_state(const RunConfig& config) {
  config.validate();
  TrainState st;
  st.config = config;
  st.rng = RngState(config.seed);
  st.params = nn::build_mlp(config.model(), st.rng);
  if (config.constant_init) nn::set_constant_init(st.params);
  const auto mcfg = config.meta();
  st.plan = meta::resolve_layer_modes(mcfg, st.params.num_blocks());
  meta::apply_layer_modes(st.params, st.plan);
  st.thresholds = meta::compute_thresholds(st.params, config.p_init);
  meta::calculate_masks(st.params, st.thresholds);
  st.opt = meta::OuterOptState::create(st.params, st.plan);
  return st;
}

ckpt::Checkpoint to_checkpoint(const TrainState& st) {
  ckpt::Checkpoint ck;
  ck.iteration = static_cast<std::uint64_t>(st.iteration);
  const auto& ps = st.params;
  for (std::size_t i = 0; i < ps.tensors.size(); ++i) {
    const auto& t = ps.tensors[i];
    ck.add("phi/" + t.name, extents_of(t.shape), t.value);
    if (t.prunable()) {
      ck.add("score/" + t.name, extents_of(t.shape), t.score);
      ck.add("mask/" + t.name, extents_of(t.shape), t.mask);
      ck.add_scalar("thresholds/" + t.name, *st.thresholds.sigma.at(i));
    }
  }
  for (std::size_t i = 0; i < ps.tensors.size(); ++i) {
    const auto& t = ps.tensors[i];
    if (!st.opt.adam_m[i].empty()) {
      ck.add("opt/adam_m/" + t.name, extents_of(t.shape), st.opt.adam_m[i]);
      ck.add("opt/adam_v/" + t.name, extents_of(t.shape), st.opt.adam_v[i]);
    }
    if (!st.opt.velocity[i].empty()) ck.add("opt/score_mom/" + t.name, extents_of(t.shape), st.opt.velocity[i]);
  }
  ck.add_scalar("opt/adam_step", static_cast<double>(st.opt.adam_step));
  ck.add_scalar("opt/score_step", static_cast<double>(st.opt.score_step));
  ck.add_scalar("train/best_val", st.best_val);
  ck.rng_words = st.rng.words();
  ck.rng_draws = st.rng.draws();
  ck.config = st.config.entries();
  return ck;
}

TrainState from_checkpoint(const ckpt::Checkpoint& ck) {
  TrainState st = init_state(config_from_entries(ck.config));
  auto& ps = st.params;
  auto copy = [&](const std::string& name, const ad::Shape& shape, std::vector<double>& dst) {
    const auto& s = ck.at(name);
    expect_extents(s, shape);
    dst = s.data;
  };
  for (std::size_t i = 0; i < ps.tensors.size(); ++i) {
    auto& t = ps.tensors[i];
    copy("phi/" + t.name, t.shape, t.value);
    if (t.prunable()) {
      copy("score/" + t.name, t.shape, t.score);
      copy("mask/" + t.name, t.shape, t.mask);
      for (double m : t.mask)
        if (m != 0.0 && m != 1.0) throw FormatError("mask entries must be 0 or 1", "mask/" + t.name, 0);
      const auto& th = ck.at("thresholds/" + t.name);
      expect_extents(th, {});
      st.thresholds.sigma[i] = th.data[0];
    }
    if (!st.opt.adam_m[i].empty()) {
      copy("opt/adam_m/" + t.name, t.shape, st.opt.adam_m[i]);
      copy("opt/adam_v/" + t.name, t.shape, st.opt.adam_v[i]);
    }
    if (!st.opt.velocity[i].empty()) copy("opt/score_mom/" + t.name, t.shape, st.opt.velocity[i]);
  }
  auto scalar = [&](const std::string& name) {
    const auto& s = ck.at(name);
    expect_extents(s, {});
    return s.data[0];
  };
  st.opt.adam_step = static_cast<std::int64_t>(scalar("opt/adam_step"));
  st.opt.score_step = static_cast<std::int64_t>(scalar("opt/score_step"));
  st.best_val = scalar("train/best_val");
  st.rng = RngState(ck.rng_words, ck.rng_draws);
  st.iteration = static_cast<std::int64_t>(ck.iteration);
  return st;
}

namespace {

double episode_metric(const nn::ParamSet& params, std::span<const meta::BlockPlan> plan,
                      const meta::MetaConfig& config, const tasks::Episode& ep) {
  ad::Graph g;
  const bool masked = meta::plan_uses_masks(plan);
  const auto bound = nn::bind(params, g, masked);
  const auto adapted = meta::inner_adapt(params, bound, ep.support, config, plan, false);
  const auto out = nn::forward(params, adapted, bound.masks, masked, meta::batch_input(g, ep.query));
  const auto vals = out.values();
  const std::size_t rows = ep.query.rows;
  if (ep.query.regression()) {
    double se = 0.0;
    for (std::size_t r = 0; r < rows; ++r) se += (vals[r] - ep.query.targets[r]) * (vals[r] - ep.query.targets[r]);
    return se / static_cast<double>(rows);
  }
  const std::size_t cols = out.shape()[1];
  std::size_t correct = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = vals.subspan(r * cols, cols);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (static_cast<int>(best) == ep.query.labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(rows);
}

}  // namespace

std::vector<double> evaluate_episodes(const nn::ParamSet& params, std::span<const meta::BlockPlan> plan,
                                      const meta::MetaConfig& config, std::span<const tasks::Episode> episodes,
                                      int steps, int workers) {
  if (steps < 1) throw ConfigError("evaluation needs at least one inner step");
  meta::MetaConfig cfg = config;
  cfg.inner_steps = steps;
  std::vector<double> out(episodes.size());
  parallel_for(episodes.size(), workers, [&](std::size_t i) { out[i] = episode_metric(params, plan, cfg, episodes[i]); });
  return out;
}

TrainResult meta_train(const RunConfig& config, const DataSplits& data, const TrainOptions& options) {
  TrainState st;
  if (options.resume) {
    st = from_checkpoint(ckpt::load(*options.resume));
    st.config.out_dir = config.out_dir;
    st.config.workers = config.workers;
  } else {
    st = init_state(config);
  }
  const RunConfig& cfg = st.config;
  const auto mcfg = cfg.meta();
  const std::int64_t horizon = cfg.iterations;
  const std::int64_t stop = std::min(horizon, options.stop_after.value_or(horizon));
  if (st.iteration > horizon) throw ConfigError("checkpoint is past the configured number of iterations");
  if (data.regression != cfg.regression()) throw ConfigError("dataset kind does not match the architecture");

  std::filesystem::create_directories(cfg.out_dir);
  RngState val_rng(cfg.seed ^ kValidationSalt);
  const auto val_eps = sample_episodes(data, tasks::Split::val, cfg, val_rng, static_cast<std::size_t>(cfg.val_episodes));
  analysis::CsvLog log(cfg.out_dir / "metrics.csv",
                       options.resume ? std::optional<std::int64_t>(st.iteration - 1) : std::nullopt);

  TrainResult result;
  const auto best_path = cfg.out_dir / "best.mtkt";
  if (options.resume && std::filesystem::exists(best_path)) result.best_checkpoint = best_path;

  auto validate = [&](std::int64_t i) {
    const auto metrics = evaluate_episodes(st.params, st.plan, mcfg, val_eps, cfg.eval_step_count(), cfg.workers);
    const double m = mean_of(metrics);
    const double score = data.regression ? -m : m;
    log.write(i, "all", data.regression ? "val_mse" : "val_accuracy", m);
    if (score > st.best_val) {
      st.best_val = score;
      ckpt::save(to_checkpoint(st), best_path);
      result.best_checkpoint = best_path;
    }
    return m;
  };

  for (std::int64_t i = st.iteration; i < stop; ++i) {
    const bool log_now = i % cfg.log_interval == 0;
    if (log_now) log.write(analysis::sparsity_report(st.params, i));
    if (i % cfg.eval_interval == 0) {
      const double v = validate(i);
      if (options.progress) *options.progress << "iter " << i << "/" << horizon << " val " << v << std::endl;
    }
    const auto eps = sample_episodes(data, tasks::Split::train, cfg, st.rng, static_cast<std::size_t>(cfg.meta_batch));
    const auto report = meta::meta_step(st.params, st.thresholds, eps, mcfg, st.plan, st.opt, i,
                                        {.record_task_grads = log_now, .workers = cfg.workers});
    if (log_now) {
      log.write(analysis::record_task_grads(st.params, report.task_grad_mean_abs, i));
      log.write(i, "all", "meta_loss", report.meta_loss);
      log.flush();
    }
    if (mcfg.iterand_k && (i + 1) % *mcfg.iterand_k == 0) meta::iterand_randomize(st.params, st.rng, i + 1, *mcfg.iterand_k);
    st.iteration = i + 1;
  }
  if (st.iteration == horizon) {
    log.write(analysis::sparsity_report(st.params, horizon));
    const double v = validate(horizon);
    if (options.progress) *options.progress << "iter " << horizon << "/" << horizon << " val " << v << std::endl;
  }
  log.flush();
  result.final_checkpoint = cfg.out_dir / "final.mtkt";
  ckpt::save(to_checkpoint(st), result.final_checkpoint);
  result.state = std::move(st);
  return result;
}

EvalSummary meta_eval(const ckpt::Checkpoint& ck, const DataSplits& data, const EvalOptions& options) {
  TrainState st = from_checkpoint(ck);
  if (options.expect_model && !same_model(*options.expect_model, st.params.config)) {
    throw ConfigError("architecture mismatch: checkpoint holds " + std::string(nn::to_string(st.params.config.arch)) +
                      " with dims " + ad::to_string(st.params.config.dims()) + ", configuration asks for " +
                      std::string(nn::to_string(options.expect_model->arch)) + " with dims " +
                      ad::to_string(options.expect_model->dims()));
  }
  if (data.regression != st.config.regression()) throw ConfigError("dataset kind does not match the checkpoint");
  if (options.episodes < 1 || options.seeds < 1) throw ConfigError("evaluation needs episodes and seeds");
  const int steps = options.steps > 0 ? options.steps : st.config.eval_step_count();
  const auto mcfg = st.config.meta();

  nn::ParamSet params = st.params;
  if (options.random_mask) {
    RngState mask_rng(options.seed ^ kRandomMaskSalt);
    meta::randomize_masks_like(params, mask_rng);
  }

  EvalSummary sum;
  sum.regression = data.regression;
  RngState base(options.seed);
  constexpr std::size_t kChunk = 64;
  for (int s = 0; s < options.seeds; ++s) {
    RngState rng = base.split();
    double total = 0.0;
    for (std::size_t done = 0; done < static_cast<std::size_t>(options.episodes); done += kChunk) {
      const auto n = std::min(kChunk, static_cast<std::size_t>(options.episodes) - done);
      const auto eps = sample_episodes(data, options.split, st.config, rng, n);
      for (double m : evaluate_episodes(params, st.plan, mcfg, eps, steps, options.workers)) total += m;
    }
    sum.per_seed.push_back(total / static_cast<double>(options.episodes));
  }
  sum.mean = mean_of(sum.per_seed);
  double var = 0.0;
  for (double x : sum.per_seed) var += (x - sum.mean) * (x - sum.mean);
  sum.stddev = std::sqrt(var / static_cast<double>(sum.per_seed.size()));
  return sum;
}

SweepAxis parse_sweep_axis(std::string_view s) {
  if (s == "outer-lr") return SweepAxis::outer_lr;
  if (s == "p-init") return SweepAxis::p_init;
  if (s == "width") return SweepAxis::width;
  throw ConfigError("unknown sweep axis '" + std::string(s) + "' (outer-lr, p-init, width)");
}

std::string_view to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::outer_lr:
      return "outer-lr";
    case SweepAxis::p_init:
      return "p-init";
    case SweepAxis::width:
      return "width";
  }
  return "?";
}

std::vector<SweepRow> sweep(const RunConfig& config, const DataSplits& data, SweepAxis axis,
                            const std::vector<std::string>& values, const EvalOptions& eval, std::ostream* progress) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const std::string key(to_string(axis));
  std::vector<SweepRow> rows;
  for (const auto& v : values) {
    RunConfig c = config;
    c.set(key, v);
    c.out_dir = config.out_dir / (key + "=" + v);
    if (progress) *progress << "sweep " << key << "=" << v << std::endl;
    const auto res = meta_train(c, data, {.progress = progress});
    const auto ck = ckpt::load(res.best_checkpoint.value_or(res.final_checkpoint));
    SweepRow row;
    row.value = v;
    row.best_val = data.regression ? -res.state.best_val : res.state.best_val;
    row.eval = meta_eval(ck, data, eval);
    rows.push_back(std::move(row));
  }
  std::filesystem::create_directories(config.out_dir);
  std::ofstream out(config.out_dir / "sweep.csv");
  if (!out) throw std::runtime_error("cannot write " + (config.out_dir / "sweep.csv").string());
  out << "axis,value,best_val,eval_mean,eval_std\n";
  out.precision(17);
  for (const auto& r : rows) out << key << ',' << r.value << ',' << r.best_val << ',' << r.eval.mean << ',' << r.eval.stddev << '\n';
  return rows;
}

}  // namespace mtlab::exp
