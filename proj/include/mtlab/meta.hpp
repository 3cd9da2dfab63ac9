#pragma once

// Gradient-based meta-learners: MAML and its ANIL/BOIL variants, which
// meta-learn initial parameter values, and Meta-ticket, which keeps a random
// initialisation fixed and meta-learns a binary mask over it through
// straight-through score updates.

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "mtlab/autodiff.hpp"
#include "mtlab/nn.hpp"
#include "mtlab/rng.hpp"
#include "mtlab/tasks.hpp"

namespace mtlab::meta {

enum class Method { maml, anil, boil, metaticket, metaticket_boil, metaticket_iterand, hybrid };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);
bool is_metaticket(Method m);
bool is_maml_family(Method m);

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct MetaConfig {
  Method method = Method::metaticket;
  int inner_steps = 1;  // S
  int meta_batch = 4;   // B
  double inner_lr = 0.4;
  // Explicit per-layer inner learning rates; overrides inner_lr when non-empty.
  std::vector<double> alphas;
  // Adam step size for MAML-family methods, score SGD step size for Meta-ticket.
  double outer_lr = 10.0;
  // Adam step size of init-params layers in a hybrid model.
  double param_lr = 0.001;
  int iterations = 30000;  // T, also the cosine schedule horizon
  double p_init = 0.0;
  double momentum = 0.9;
  std::optional<int> iterand_k;
  bool second_order = true;
  std::vector<nn::MetaMode> layer_modes;  // hybrid only
  AdamParams adam;
};

struct BlockPlan {
  double alpha = 0.0;
  nn::MetaMode mode = nn::MetaMode::init_params;
};

// Per-layer inner learning rate and meta-mode for a network with
// `num_blocks` linear layers.
std::vector<BlockPlan> resolve_layer_modes(const MetaConfig& config, std::size_t num_blocks);
// Mirrors the plan into the ParamSet's layer specs.
void apply_layer_modes(nn::ParamSet& params, std::span<const BlockPlan> plan);

// Layer-wise thresholds, fixed from the initial score draw. Indexed by
// ParamSet tensor; only prunable tensors carry a value.
struct ScoreThresholds {
  std::vector<std::optional<double>> sigma;
};

// floor(p_init * n)-th smallest score of one layer (1-based). For an empty
// prefix (k = 0) the threshold sits just below the smallest score, so the
// initial mask is all ones while scores can still fall under it later.
double layer_threshold(std::span<const double> scores, double p_init);
ScoreThresholds compute_thresholds(const nn::ParamSet& params, double p_init);

// m_i = 0 iff s_i <= sigma.
std::vector<double> calculate_mask(std::span<const double> scores, double sigma);
void calculate_masks(nn::ParamSet& params, const ScoreThresholds& thresholds);

double cosine_lr(std::int64_t t, std::int64_t horizon, double beta0);

struct OuterOptState {
  std::vector<std::vector<double>> adam_m;
  std::vector<std::vector<double>> adam_v;
  std::int64_t adam_step = 0;
  std::vector<std::vector<double>> velocity;  // score momentum buffer
  std::int64_t score_step = 0;

  static OuterOptState create(const nn::ParamSet& params, std::span<const BlockPlan> plan);
};

// Task-loss of a network output: cross entropy for labelled batches, mean
// squared error for regression batches.
ad::Tensor task_loss(ad::Tensor output, const tasks::Batch& batch);
ad::Tensor batch_input(ad::Graph& graph, const tasks::Batch& batch);

bool plan_uses_masks(std::span<const BlockPlan> plan);

// Mean |dL/dW| over the entries of every linear weight at the first inner step.
struct InnerTrace {
  std::vector<double> first_step_grad_mean_abs;  // per block
};

// S steps of per-layer gradient descent on the support set. Layers with a
// zero learning rate come back unchanged. With track_graph the adapted values
// stay differentiable with respect to the bound leaves (second-order unless
// config.second_order is false, in which case task gradients are detached).
std::vector<ad::Tensor> inner_adapt(const nn::ParamSet& params, const nn::Bound& bound, const tasks::Batch& support,
                                    const MetaConfig& config, std::span<const BlockPlan> plan, bool track_graph,
                                    InnerTrace* trace = nullptr);

// Query loss of one episode after adaptation.
ad::Tensor task_objective(const nn::ParamSet& params, const nn::Bound& bound, const tasks::Episode& episode,
                          const MetaConfig& config, std::span<const BlockPlan> plan, bool track_graph = true,
                          InnerTrace* trace = nullptr);

// Mean query loss over the episodes, all on one graph.
ad::Tensor meta_objective(const nn::ParamSet& params, const nn::Bound& bound,
                          std::span<const tasks::Episode> episodes, const MetaConfig& config,
                          std::span<const BlockPlan> plan);

struct MetaGradient {
  double meta_loss = 0.0;
  // Per tensor; empty where the tensor is not a meta-parameter.
  std::vector<std::vector<double>> values;
  std::vector<std::vector<double>> masks;
  // Per block, averaged over the meta-batch; empty unless requested.
  std::vector<double> task_grad_mean_abs;
};

struct GradientOptions {
  bool record_task_grads = false;
  int workers = 1;
};

// Meta-gradient with respect to the initial values of init-params layers and
// the masks of mask layers. Each task runs on its own graph; per-task results
// are reduced in task order, so the outcome does not depend on `workers`.
MetaGradient meta_gradient(const nn::ParamSet& params, std::span<const tasks::Episode> episodes,
                           const MetaConfig& config, std::span<const BlockPlan> plan,
                           const GradientOptions& options = {});

struct StepReport {
  double meta_loss = 0.0;
  std::vector<double> task_grad_mean_abs;
};

// Adam on the initial values (maml / anil / boil).
StepReport maml_meta_step(nn::ParamSet& params, std::span<const tasks::Episode> episodes, const MetaConfig& config,
                          std::span<const BlockPlan> plan, OuterOptState& opt, const GradientOptions& options = {});

// Straight-through score update with heavy-ball momentum and a cosine step
// size, followed by mask recomputation. Initial values are never touched.
StepReport metaticket_meta_step(nn::ParamSet& params, const ScoreThresholds& thresholds,
                                std::span<const tasks::Episode> episodes, const MetaConfig& config,
                                std::span<const BlockPlan> plan, OuterOptState& opt, std::int64_t t,
                                const GradientOptions& options = {});

// Dispatches on the plan: Adam for init-params layers, scores for mask layers.
StepReport meta_step(nn::ParamSet& params, const ScoreThresholds& thresholds, std::span<const tasks::Episode> episodes,
                     const MetaConfig& config, std::span<const BlockPlan> plan, OuterOptState& opt, std::int64_t t,
                     const GradientOptions& options = {});

void apply_adam(std::vector<double>& value, std::span<const double> grad, std::vector<double>& m,
                std::vector<double>& v, std::int64_t step, double lr, const AdamParams& p);

// Redraws every pruned entry (m = 0) of prunable weights from the layer's
// Kaiming-normal distribution. Requires t % K == 0.
void iterand_randomize(nn::ParamSet& params, RngState& rng, std::int64_t t, int k);

// Random masks with the same number of zeros per prunable tensor.
void randomize_masks_like(nn::ParamSet& params, RngState& rng);

}  // namespace mtlab::meta
