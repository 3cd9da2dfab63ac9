#include "mtlab/meta.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <numbers>
#include <thread>

#include "mtlab/error.hpp"

namespace mtlab::meta {

std::string_view to_string(Method m) {
  switch (m) {
    case Method::maml:
      return "maml";
    case Method::anil:
      return "anil";
    case Method::boil:
      return "boil";
    case Method::metaticket:
      return "metaticket";
    case Method::metaticket_boil:
      return "metaticket-boil";
    case Method::metaticket_iterand:
      return "metaticket-iterand";
    case Method::hybrid:
      return "hybrid";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  for (auto m : {Method::maml, Method::anil, Method::boil, Method::metaticket, Method::metaticket_boil,
                 Method::metaticket_iterand, Method::hybrid}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

bool is_metaticket(Method m) {
  return m == Method::metaticket || m == Method::metaticket_boil || m == Method::metaticket_iterand;
}

bool is_maml_family(Method m) { return m == Method::maml || m == Method::anil || m == Method::boil; }

std::vector<BlockPlan> resolve_layer_modes(const MetaConfig& config, std::size_t num_blocks) {
  if (num_blocks == 0) throw ConfigError("network has no linear layers");
  if (config.inner_steps < 1) throw ConfigError("inner steps S must be at least 1");
  if (config.meta_batch < 1) throw ConfigError("meta-batch B must be at least 1");
  std::vector<BlockPlan> plan(num_blocks);
  if (!config.alphas.empty()) {
    if (config.alphas.size() != num_blocks) {
      throw ConfigError("expected " + std::to_string(num_blocks) + " inner learning rates, got " +
                        std::to_string(config.alphas.size()));
    }
    for (std::size_t l = 0; l < num_blocks; ++l) plan[l].alpha = config.alphas[l];
  } else {
    for (auto& b : plan) b.alpha = config.inner_lr;
  }
  for (const auto& b : plan)
    if (!(b.alpha >= 0.0)) throw ConfigError("inner learning rates must be non-negative");

  const std::size_t last = num_blocks - 1;
  switch (config.method) {
    case Method::anil:
      for (std::size_t l = 0; l < last; ++l) plan[l].alpha = 0.0;
      break;
    case Method::boil:
    case Method::metaticket_boil:
      plan[last].alpha = 0.0;
      break;
    default:
      break;
  }

  if (config.method == Method::hybrid) {
    if (config.layer_modes.size() != num_blocks) {
      throw ConfigError("hybrid method needs one meta-mode per linear layer (" + std::to_string(num_blocks) +
                        "), got " + std::to_string(config.layer_modes.size()));
    }
    if (config.layer_modes[last] == nn::MetaMode::mask) throw ConfigError("the output layer cannot be masked");
    for (std::size_t l = 0; l < num_blocks; ++l) plan[l].mode = config.layer_modes[l];
  } else if (is_metaticket(config.method)) {
    for (std::size_t l = 0; l < last; ++l) plan[l].mode = nn::MetaMode::mask;
    plan[last].mode = nn::MetaMode::frozen;
  } else {
    for (auto& b : plan) b.mode = nn::MetaMode::init_params;
  }
  return plan;
}

void apply_layer_modes(nn::ParamSet& params, std::span<const BlockPlan> plan) {
  if (plan.size() != params.num_blocks()) throw ConfigError("layer plan does not match the network depth");
  for (auto& layer : params.layers) {
    if (layer.kind == nn::LayerKind::flatten) continue;
    layer.inner_lr = plan[layer.block].alpha;
    layer.meta_mode = plan[layer.block].mode;
  }
}

bool plan_uses_masks(std::span<const BlockPlan> plan) {
  return std::any_of(plan.begin(), plan.end(), [](const BlockPlan& b) { return b.mode == nn::MetaMode::mask; });
}

double layer_threshold(std::span<const double> scores, double p_init) {
  if (!(p_init >= 0.0 && p_init <= 1.0)) throw ConfigError("p_init must lie in [0, 1]");
  if (scores.empty()) throw ConfigError("layer has no scores");
  const auto k = static_cast<std::size_t>(std::floor(p_init * static_cast<double>(scores.size())));
  std::vector<double> sorted(scores.begin(), scores.end());
  if (k == 0) {
    const double lo = *std::min_element(sorted.begin(), sorted.end());
    return std::nextafter(lo, -std::numeric_limits<double>::infinity());
  }
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end());
  return sorted[k - 1];
}

ScoreThresholds compute_thresholds(const nn::ParamSet& params, double p_init) {
  ScoreThresholds th;
  th.sigma.resize(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& t = params.tensors[i];
    if (t.prunable()) th.sigma[i] = layer_threshold(t.score, p_init);
  }
  return th;
}

std::vector<double> calculate_mask(std::span<const double> scores, double sigma) {
  std::vector<double> m(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) m[i] = scores[i] <= sigma ? 0.0 : 1.0;
  return m;
}

void calculate_masks(nn::ParamSet& params, const ScoreThresholds& thresholds) {
  if (thresholds.sigma.size() != params.tensors.size()) throw ConfigError("thresholds do not match the parameter set");
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& t = params.tensors[i];
    if (!t.prunable()) continue;
    if (!thresholds.sigma[i]) throw ConfigError("missing threshold for " + t.name);
    t.mask = calculate_mask(t.score, *thresholds.sigma[i]);
  }
}

double cosine_lr(std::int64_t t, std::int64_t horizon, double beta0) {
  if (t < 0 || t > horizon) throw ConfigError("cosine_lr: t outside [0, T]");
  if (horizon == 0) return beta0;
  const double frac = static_cast<double>(t) / static_cast<double>(horizon);
  return beta0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {

bool is_value_meta_param(const nn::ParamTensor& t, std::span<const BlockPlan> plan) {
  return plan[t.block].mode == nn::MetaMode::init_params;
}

bool is_mask_meta_param(const nn::ParamTensor& t, std::span<const BlockPlan> plan) {
  return t.prunable() && plan[t.block].mode == nn::MetaMode::mask;
}

void check_plan(const nn::ParamSet& params, std::span<const BlockPlan> plan) {
  if (plan.size() != params.num_blocks()) {
    throw ConfigError("layer plan has " + std::to_string(plan.size()) + " entries for " +
                      std::to_string(params.num_blocks()) + " linear layers");
  }
}

}  // namespace

OuterOptState OuterOptState::create(const nn::ParamSet& params, std::span<const BlockPlan> plan) {
  check_plan(params, plan);
  OuterOptState s;
  const auto n = params.tensors.size();
  s.adam_m.resize(n);
  s.adam_v.resize(n);
  s.velocity.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = params.tensors[i];
    if (is_value_meta_param(t, plan)) {
      s.adam_m[i].assign(t.value.size(), 0.0);
      s.adam_v[i].assign(t.value.size(), 0.0);
    }
    if (is_mask_meta_param(t, plan)) s.velocity[i].assign(t.value.size(), 0.0);
  }
  return s;
}

ad::Tensor batch_input(ad::Graph& graph, const tasks::Batch& batch) {
  if (batch.rows == 0) throw DatasetError("empty batch");
  if (batch.inputs.size() != batch.rows * batch.cols) throw DimensionError("batch inputs do not match rows x cols");
  return graph.constant({batch.rows, batch.cols}, batch.inputs);
}

ad::Tensor task_loss(ad::Tensor output, const tasks::Batch& batch) {
  if (batch.regression()) {
    if (batch.targets.size() != batch.rows) throw DimensionError("regression batch needs one target per row");
    return ad::mse(output, output.graph().constant(output.shape(), batch.targets));
  }
  return ad::cross_entropy(output, batch.labels);
}

std::vector<ad::Tensor> inner_adapt(const nn::ParamSet& params, const nn::Bound& bound, const tasks::Batch& support,
                                    const MetaConfig& config, std::span<const BlockPlan> plan, bool track_graph,
                                    InnerTrace* trace) {
  check_plan(params, plan);
  if (config.inner_steps < 1) throw ConfigError("inner steps S must be at least 1");
  if (support.rows == 0) throw DatasetError("empty support set");
  if (bound.values.empty()) throw ConfigError("parameter set is not bound");
  ad::Graph& g = bound.values.front().graph();
  const bool masked = plan_uses_masks(plan);
  const ad::Tensor x = batch_input(g, support);

  std::vector<std::size_t> adapted;
  for (std::size_t i = 0; i < params.tensors.size(); ++i)
    if (plan[params.tensors[i].block].alpha != 0.0) adapted.push_back(i);

  std::vector<ad::Tensor> cur = bound.values;
  for (int step = 0; step < config.inner_steps; ++step) {
    const bool tracing = trace != nullptr && step == 0;
    if (adapted.empty() && !tracing) break;

    std::vector<ad::Tensor> wrt;
    for (auto i : adapted) wrt.push_back(cur[i]);
    if (tracing) {
      for (std::size_t b = 0; b < params.num_blocks(); ++b) wrt.push_back(cur[params.weight_of_block(b)]);
    }
    const ad::Tensor loss = task_loss(nn::forward(params, cur, bound.masks, masked, x), support);
    const auto grads = ad::backward(loss, wrt, track_graph && config.second_order);

    if (tracing) {
      trace->first_step_grad_mean_abs.assign(params.num_blocks(), 0.0);
      for (std::size_t b = 0; b < params.num_blocks(); ++b) {
        const auto vals = grads[adapted.size() + b].values();
        double acc = 0.0;
        for (double v : vals) acc += std::abs(v);
        trace->first_step_grad_mean_abs[b] = acc / static_cast<double>(vals.size());
      }
    }
    for (std::size_t j = 0; j < adapted.size(); ++j) {
      const auto i = adapted[j];
      const ad::Tensor gi = track_graph ? grads[j] : ad::detach(grads[j]);
      cur[i] = ad::sub(cur[i], ad::scale(gi, plan[params.tensors[i].block].alpha));
    }
  }
  return cur;
}

ad::Tensor task_objective(const nn::ParamSet& params, const nn::Bound& bound, const tasks::Episode& episode,
                          const MetaConfig& config, std::span<const BlockPlan> plan, bool track_graph,
                          InnerTrace* trace) {
  const auto adapted = inner_adapt(params, bound, episode.support, config, plan, track_graph, trace);
  ad::Graph& g = bound.values.front().graph();
  const ad::Tensor out = nn::forward(params, adapted, bound.masks, plan_uses_masks(plan), batch_input(g, episode.query));
  return task_loss(out, episode.query);
}

ad::Tensor meta_objective(const nn::ParamSet& params, const nn::Bound& bound,
                          std::span<const tasks::Episode> episodes, const MetaConfig& config,
                          std::span<const BlockPlan> plan) {
  if (episodes.empty()) throw ConfigError("meta-batch is empty");
  ad::Tensor total;
  for (const auto& ep : episodes) {
    const ad::Tensor l = task_objective(params, bound, ep, config, plan);
    total = total.valid() ? ad::add(total, l) : l;
  }
  return ad::scale(total, 1.0 / static_cast<double>(episodes.size()));
}

namespace {

struct TaskResult {
  double loss = 0.0;
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> masks;
  std::vector<double> trace;
};

TaskResult run_task(const nn::ParamSet& params, const tasks::Episode& episode, const MetaConfig& config,
                    std::span<const BlockPlan> plan, bool record) {
  ad::Graph g;
  const nn::Bound bound = nn::bind(params, g, plan_uses_masks(plan));
  InnerTrace trace;
  const ad::Tensor loss = task_objective(params, bound, episode, config, plan, true, record ? &trace : nullptr);

  std::vector<ad::Tensor> wrt;
  std::vector<std::pair<std::size_t, bool>> slots;  // (tensor, is_mask)
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& t = params.tensors[i];
    if (is_value_meta_param(t, plan)) {
      wrt.push_back(bound.values[i]);
      slots.emplace_back(i, false);
    }
    if (is_mask_meta_param(t, plan)) {
      wrt.push_back(*bound.masks[i]);
      slots.emplace_back(i, true);
    }
  }
  TaskResult r;
  r.loss = loss.item();
  r.values.resize(params.tensors.size());
  r.masks.resize(params.tensors.size());
  r.trace = std::move(trace.first_step_grad_mean_abs);
  if (wrt.empty()) return r;
  const auto grads = ad::backward(loss, wrt, false);
  for (std::size_t j = 0; j < slots.size(); ++j) {
    const auto vals = grads[j].values();
    auto& dst = slots[j].second ? r.masks[slots[j].first] : r.values[slots[j].first];
    dst.assign(vals.begin(), vals.end());
  }
  return r;
}

}  // namespace

MetaGradient meta_gradient(const nn::ParamSet& params, std::span<const tasks::Episode> episodes,
                           const MetaConfig& config, std::span<const BlockPlan> plan,
                           const GradientOptions& options) {
  check_plan(params, plan);
  if (episodes.empty()) throw ConfigError("meta-batch is empty");
  const std::size_t n = episodes.size();
  std::vector<TaskResult> results(n);
  std::vector<std::exception_ptr> errors(n);

  const auto workers = static_cast<std::size_t>(std::clamp<int>(options.workers, 1, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t b = 0; b < n; ++b)
      results[b] = run_task(params, episodes[b], config, plan, options.record_task_grads);
  } else {
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t b = next++; b < n; b = next++) {
        try {
          results[b] = run_task(params, episodes[b], config, plan, options.record_task_grads);
        } catch (...) {
          errors[b] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  const double inv = 1.0 / static_cast<double>(n);
  MetaGradient mg;
  mg.values.resize(params.tensors.size());
  mg.masks.resize(params.tensors.size());
  auto accumulate = [&](std::vector<double>& dst, const std::vector<double>& src) {
    if (src.empty()) return;
    if (dst.empty()) dst.assign(src.size(), 0.0);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
  };
  for (const auto& r : results) {
    mg.meta_loss += r.loss;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      accumulate(mg.values[i], r.values[i]);
      accumulate(mg.masks[i], r.masks[i]);
    }
    accumulate(mg.task_grad_mean_abs, r.trace);
  }
  mg.meta_loss *= inv;
  for (auto* group : {&mg.values, &mg.masks})
    for (auto& g : *group)
      for (auto& v : g) v *= inv;
  for (auto& v : mg.task_grad_mean_abs) v *= inv;
  return mg;
}

void apply_adam(std::vector<double>& value, std::span<const double> grad, std::vector<double>& m,
                std::vector<double>& v, std::int64_t step, double lr, const AdamParams& p) {
  if (grad.size() != value.size() || m.size() != value.size() || v.size() != value.size()) {
    throw DimensionError("adam: state does not match parameter size");
  }
  if (step < 1) throw ConfigError("adam: step count starts at 1");
  const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < value.size(); ++i) {
    m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * grad[i];
    v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * grad[i] * grad[i];
    value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + p.eps);
  }
}

namespace {

void apply_meta_gradient(nn::ParamSet& params, const ScoreThresholds* thresholds, const MetaGradient& mg,
                         const MetaConfig& config, OuterOptState& opt, std::int64_t t) {
  const double value_lr = config.method == Method::hybrid ? config.param_lr : config.outer_lr;
  bool any_value = false;
  bool any_mask = false;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    any_value = any_value || !mg.values[i].empty();
    any_mask = any_mask || !mg.masks[i].empty();
  }
  if (any_value) {
    ++opt.adam_step;
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      if (mg.values[i].empty()) continue;
      apply_adam(params.tensors[i].value, mg.values[i], opt.adam_m.at(i), opt.adam_v.at(i), opt.adam_step, value_lr,
                 config.adam);
    }
  }
  if (any_mask) {
    if (thresholds == nullptr) throw ConfigError("score update needs thresholds");
    const double beta = cosine_lr(t, config.iterations, config.outer_lr);
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      if (mg.masks[i].empty()) continue;
      auto& tensor = params.tensors[i];
      auto& vel = opt.velocity.at(i);
      if (vel.size() != tensor.score.size()) throw DimensionError("momentum buffer does not match " + tensor.name);
      for (std::size_t j = 0; j < vel.size(); ++j) {
        vel[j] = config.momentum * vel[j] + mg.masks[i][j];
        tensor.score[j] -= beta * vel[j];
      }
      if (!thresholds->sigma.at(i)) throw ConfigError("missing threshold for " + tensor.name);
      tensor.mask = calculate_mask(tensor.score, *thresholds->sigma[i]);
    }
    opt.score_step = t + 1;
  }
}

}  // namespace

StepReport maml_meta_step(nn::ParamSet& params, std::span<const tasks::Episode> episodes, const MetaConfig& config,
                          std::span<const BlockPlan> plan, OuterOptState& opt, const GradientOptions& options) {
  if (!is_maml_family(config.method)) throw ConfigError("maml_meta_step needs maml, anil or boil");
  const auto mg = meta_gradient(params, episodes, config, plan, options);
  apply_meta_gradient(params, nullptr, mg, config, opt, 0);
  return {mg.meta_loss, mg.task_grad_mean_abs};
}

StepReport metaticket_meta_step(nn::ParamSet& params, const ScoreThresholds& thresholds,
                                std::span<const tasks::Episode> episodes, const MetaConfig& config,
                                std::span<const BlockPlan> plan, OuterOptState& opt, std::int64_t t,
                                const GradientOptions& options) {
  if (!is_metaticket(config.method)) throw ConfigError("metaticket_meta_step needs a metaticket method");
  const auto mg = meta_gradient(params, episodes, config, plan, options);
  apply_meta_gradient(params, &thresholds, mg, config, opt, t);
  return {mg.meta_loss, mg.task_grad_mean_abs};
}

StepReport meta_step(nn::ParamSet& params, const ScoreThresholds& thresholds, std::span<const tasks::Episode> episodes,
                     const MetaConfig& config, std::span<const BlockPlan> plan, OuterOptState& opt, std::int64_t t,
                     const GradientOptions& options) {
  const auto mg = meta_gradient(params, episodes, config, plan, options);
  apply_meta_gradient(params, &thresholds, mg, config, opt, t);
  return {mg.meta_loss, mg.task_grad_mean_abs};
}

void iterand_randomize(nn::ParamSet& params, RngState& rng, std::int64_t t, int k) {
  if (k <= 0) throw ConfigError("IteRand period K must be positive");
  if (t % k != 0) throw ConfigError("IteRand event at t=" + std::to_string(t) + " is not a multiple of K");
  for (auto& tensor : params.tensors) {
    if (!tensor.prunable()) continue;
    const double sd = std::sqrt(2.0 / static_cast<double>(tensor.fan_in));
    for (std::size_t i = 0; i < tensor.value.size(); ++i)
      if (tensor.mask[i] == 0.0) tensor.value[i] = rng.normal(0.0, sd);
  }
}

void randomize_masks_like(nn::ParamSet& params, RngState& rng) {
  for (auto& tensor : params.tensors) {
    if (!tensor.prunable()) continue;
    const auto zeros = static_cast<std::size_t>(std::count(tensor.mask.begin(), tensor.mask.end(), 0.0));
    const std::size_t n = tensor.mask.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = 0; i < zeros; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
    std::fill(tensor.mask.begin(), tensor.mask.end(), 1.0);
    for (std::size_t i = 0; i < zeros; ++i) tensor.mask[idx[i]] = 0.0;
  }
}

}  // namespace mtlab::meta
