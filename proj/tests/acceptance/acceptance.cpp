// Acceptance checks: one PASS/FAIL line per criterion. Tolerances and run
// lengths are pinned below. Optional arguments select criteria by name.
//
// MTLAB_OMNIGLOT_DIR: directory holding Omniglot train/val/test .mtds files;
//   without it the constant-init criteria run on the synthetic family.
// MTLAB_ACCEPTANCE_DIR: scratch directory (default: system temp).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mtlab/analysis.hpp"
#include "mtlab/autodiff.hpp"
#include "mtlab/checkpoint.hpp"
#include "mtlab/config.hpp"
#include "mtlab/experiment.hpp"
#include "mtlab/meta.hpp"
#include "mtlab/nn.hpp"
#include "test_util.hpp"

using namespace mtlab;
namespace fs = std::filesystem;
using testutil::rel_err;

namespace {

// Pinned tolerances and budgets.
constexpr double kFdStep = 1e-5;
constexpr double kOpRelTol = 1e-5;
constexpr double kSecondOrderRelTol = 1e-4;
constexpr double kZeroGradFloor = 1e-8;  // both analytic and numeric below this count as an exact zero
constexpr double kLeibnizTol = 1e-10;
constexpr int kLeibnizTrials = 1000;
constexpr double kClosedFormTol = 1e-12;
constexpr double kDegeneracyTol = 1e-12;
constexpr int kMaskSuiteSteps = 1000;

constexpr std::int64_t kConstantInitIterations = 10000;
constexpr int kConstantInitEvalSteps = 3;
constexpr int kEvalEpisodes = 600;
constexpr int kEvalSeeds = 3;
constexpr double kSyntheticGap = 0.15;
constexpr double kOmniglotGap = 0.20;
constexpr double kOmniglotFloor = 0.55;

constexpr double kRapidMamlRatio = 0.30;
constexpr double kRapidMetaticketRatio = 0.60;
constexpr double kEarlyFraction = 0.2;  // share of the run that counts as "early"

constexpr std::int64_t kSinusoidIterations = 30000;
constexpr int kSinusoidMetaBatch = 10;
constexpr double kSinusoidMaskLr = 0.01;
constexpr int kSinusoidEvalSteps = 5;
constexpr double kSinusoidMamlMax = 1.0;
constexpr double kSinusoidNaiveMin = 2.5;
constexpr double kSinusoidHybridMax = 1.5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch_root() {
  if (const char* d = std::getenv("MTLAB_ACCEPTANCE_DIR")) return d;
  return fs::temp_directory_path() / "mtlab_acceptance";
}

fs::path scratch(const std::string& name) {
  const auto p = scratch_root() / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

ckpt::Checkpoint without_config(ckpt::Checkpoint ck) {
  ck.config.clear();
  return ck;
}

nn::ModelConfig toy_model(std::vector<std::size_t> hidden, bool bn, std::size_t in, int ways) {
  nn::ModelConfig c;
  c.arch = nn::Architecture::custom;
  c.input_dim = in;
  c.hidden = std::move(hidden);
  c.ways = ways;
  c.use_batchnorm = bn;
  return c;
}

tasks::Batch random_batch(RngState& rng, std::size_t rows, std::size_t cols, int ways) {
  tasks::Batch b;
  b.rows = rows;
  b.cols = cols;
  b.inputs = testutil::uniform_vec(rng, rows * cols);
  for (std::size_t i = 0; i < rows; ++i) b.labels.push_back(static_cast<int>(i % static_cast<std::size_t>(ways)));
  return b;
}

tasks::Episode random_episode(RngState& rng, std::size_t rows, std::size_t cols, int ways) {
  tasks::Episode e;
  e.ways = static_cast<std::size_t>(ways);
  e.support = random_batch(rng, rows, cols, ways);
  e.query = random_batch(rng, rows, cols, ways);
  return e;
}

void randomize_masks(nn::ParamSet& ps, RngState& rng, double keep) {
  for (auto& t : ps.tensors)
    for (auto& m : t.mask) m = rng.uniform() < keep ? 1.0 : 0.0;
}

double objective_value(const nn::ParamSet& ps, std::span<const tasks::Episode> eps, const meta::MetaConfig& c,
                       std::span<const meta::BlockPlan> plan) {
  ad::Graph g;
  const auto b = nn::bind(ps, g, meta::plan_uses_masks(plan));
  return meta::meta_objective(ps, b, eps, c, plan).item();
}

// Relative error with exact zeros (e.g. biases feeding BatchNorm) treated as agreement.
double grad_error(std::span<const double> analytic, std::span<const double> numeric) {
  double na = 0.0, nn_ = 0.0;
  for (double v : analytic) na = std::max(na, std::abs(v));
  for (double v : numeric) nn_ = std::max(nn_, std::abs(v));
  if (na < kZeroGradFloor && nn_ < kZeroGradFloor) return 0.0;
  return rel_err(analytic, numeric);
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  using ad::Graph;
  using ad::Tensor;
  RngState rng(101);
  double worst_op = 0.0;
  std::string worst_op_name;
  int op_checks = 0;

  struct OpCase {
    std::string name;
    ad::Shape shape;
    std::function<Tensor(Graph&, Tensor)> f;
  };
  // Every case reduces to a scalar through a fixed random weighting so all
  // output entries contribute distinct gradients.
  auto weights = [&](std::size_t n) { return testutil::uniform_vec(rng, n); };
  const auto w34 = weights(12), w43 = weights(12), w3 = weights(3), w4 = weights(4), w12 = weights(12);
  const auto c34 = weights(12), c45 = weights(20), w35 = weights(15);
  const auto t41 = weights(4), w33 = weights(9), shift3 = weights(3);
  auto dot = [](Graph& g, Tensor t, const std::vector<double>& w) { return ad::sum(ad::mul(t, g.constant(t.shape(), w))); };
  const std::vector<int> labels{0, 2, 1, 2};

  const std::vector<OpCase> cases{
      {"add", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::add(x, ad::mul(x, x)), w34); }},
      {"sub", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::sub(g.constant({3, 4}, c34), ad::mul(x, x)), w34); }},
      {"mul", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::mul(x, g.constant({3, 4}, c34)), w34); }},
      {"scale", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::scale(ad::mul(x, x), -1.7), w34); }},
      {"add_scalar", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::mul(ad::add_scalar(x, 0.3), x), w34); }},
      {"matmul", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::matmul(x, g.constant({4, 5}, c45)), w35); }},
      {"matmul_rhs", {4, 5}, [&](Graph& g, Tensor x) { return dot(g, ad::matmul(g.constant({3, 4}, c34), x), w35); }},
      {"matmul_ta", {4, 3}, [&](Graph& g, Tensor x) { return dot(g, ad::matmul(x, g.constant({4, 5}, c45), true, false), w35); }},
      {"matmul_tb", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::matmul(x, g.constant({5, 4}, c45), false, true), w35); }},
      {"matmul_tt", {4, 3}, [&](Graph& g, Tensor x) { return dot(g, ad::matmul(x, g.constant({5, 4}, c45), true, true), w35); }},
      {"matmul_self", {3, 3}, [&](Graph& g, Tensor x) { return dot(g, ad::matmul(x, x, false, true), w33); }},
      {"relu", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::relu(x), w34); }},
      {"rsqrt", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::rsqrt(ad::add_scalar(ad::mul(x, x), 0.5)), w34); }},
      {"sum", {3, 4}, [&](Graph&, Tensor x) { return ad::sum(ad::mul(x, x)); }},
      {"mean", {3, 4}, [&](Graph&, Tensor x) { return ad::mean(ad::mul(x, ad::relu(x))); }},
      {"sum_rows", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::sum_rows(ad::mul(x, x)), w4); }},
      {"sum_cols", {3, 4}, [&](Graph& g, Tensor x) { return dot(g, ad::sum_cols(ad::mul(x, x)), w3); }},
      {"broadcast_rows", {4}, [&](Graph& g, Tensor x) { return dot(g, ad::broadcast_rows(ad::mul(x, x), 3), w34); }},
      {"broadcast_cols", {3}, [&](Graph& g, Tensor x) { return dot(g, ad::broadcast_cols(ad::mul(x, x), 4), w34); }},
      {"broadcast_scalar", {}, [&](Graph& g, Tensor x) { return dot(g, ad::broadcast_scalar(ad::mul(x, x), {3, 4}), w34); }},
      {"softmax", {4, 3}, [&](Graph& g, Tensor x) { return dot(g, ad::softmax(x), w43); }},
      {"cross_entropy", {4, 3}, [&](Graph&, Tensor x) { return ad::cross_entropy(x, labels); }},
      {"mse", {4, 1}, [&](Graph& g, Tensor x) { return ad::mse(x, g.constant({4, 1}, t41)); }},
      {"batchnorm", {4, 3}, [&](Graph& g, Tensor x) {
         return dot(g, nn::batchnorm_forward(x, g.constant({3}, w3), g.constant({3}, shift3)), w12);
       }},
  };
  for (const auto& c : cases) {
    const auto x = testutil::uniform_vec(rng, ad::numel(c.shape));
    const auto analytic = testutil::reverse_grad(c.f, c.shape, x);
    const auto numeric = ad::finite_diff_grad(
        [&](std::span<const double> p) { return testutil::eval_scalar(c.f, c.shape, p); }, x, kFdStep);
    const double e = rel_err(analytic, numeric);
    ++op_checks;
    if (e > worst_op) {
      worst_op = e;
      worst_op_name = c.name;
    }
  }

  // Full five-layer MLP with BatchNorm and masks: every tensor value and mask.
  double worst_mlp = 0.0;
  int mlp_tensors = 0;
  for (bool bn : {true, false}) {
    auto ps = nn::build_mlp(toy_model({9, 8, 7, 6}, bn, 10, 5), rng);
    randomize_masks(ps, rng, 0.7);
    // Nonzero biases keep units with fully pruned inputs off the ReLU kink.
    for (auto& t : ps.tensors)
      if (t.role == nn::TensorRole::bias) t.value = testutil::uniform_vec(rng, t.value.size(), -0.5, 0.5);
    const auto batch = random_batch(rng, 10, 10, 5);
    auto loss_of = [&](const nn::ParamSet& p) {
      ad::Graph g;
      const auto b = nn::bind(p, g, true);
      return ad::cross_entropy(nn::forward(p, b, true, meta::batch_input(g, batch)), batch.labels).item();
    };
    ad::Graph g;
    const auto b = nn::bind(ps, g, true);
    const auto loss = ad::cross_entropy(nn::forward(ps, b, true, meta::batch_input(g, batch)), batch.labels);
    std::vector<ad::Tensor> wrt(b.values.begin(), b.values.end());
    std::vector<std::size_t> mask_owner;
    for (std::size_t i = 0; i < b.masks.size(); ++i)
      if (b.masks[i]) {
        wrt.push_back(*b.masks[i]);
        mask_owner.push_back(i);
      }
    const auto grads = ad::backward(loss, wrt);
    for (std::size_t i = 0; i < ps.tensors.size(); ++i) {
      const auto numeric = ad::finite_diff_grad(
          [&](std::span<const double> v) {
            auto local = ps;
            local.tensors[i].value.assign(v.begin(), v.end());
            return loss_of(local);
          },
          ps.tensors[i].value, kFdStep);
      worst_mlp = std::max(worst_mlp, grad_error(grads[i].values(), numeric));
      ++mlp_tensors;
    }
    for (std::size_t k = 0; k < mask_owner.size(); ++k) {
      const auto i = mask_owner[k];
      const auto numeric = ad::finite_diff_grad(
          [&](std::span<const double> v) {
            auto local = ps;
            local.tensors[i].mask.assign(v.begin(), v.end());
            return loss_of(local);
          },
          ps.tensors[i].mask, kFdStep);
      worst_mlp = std::max(worst_mlp, grad_error(grads[ps.tensors.size() + k].values(), numeric));
      ++mlp_tensors;
    }
  }

  // Second-order meta-gradient wrt phi0 on a two-layer net.
  double worst_meta = 0.0;
  for (bool bn : {false, true}) {
    auto ps = nn::build_mlp(toy_model({6}, bn, 4, 3), rng);
    meta::MetaConfig c;
    c.method = meta::Method::maml;
    c.inner_lr = 0.3;
    c.inner_steps = 2;
    const auto plan = meta::resolve_layer_modes(c, ps.num_blocks());
    const std::vector<tasks::Episode> eps{random_episode(rng, 6, 4, 3), random_episode(rng, 6, 4, 3)};
    const auto mg = meta::meta_gradient(ps, eps, c, plan);
    for (std::size_t i = 0; i < ps.tensors.size(); ++i) {
      const auto numeric = ad::finite_diff_grad(
          [&](std::span<const double> v) {
            auto local = ps;
            local.tensors[i].value.assign(v.begin(), v.end());
            return objective_value(local, eps, c, plan);
          },
          ps.tensors[i].value, kFdStep);
      worst_meta = std::max(worst_meta, grad_error(mg.values[i], numeric));
    }
  }

  const bool pass = worst_op < kOpRelTol && worst_mlp < kOpRelTol && worst_meta < kSecondOrderRelTol;
  return {pass, fmt("%d ops worst %.2e (%s); 5-layer MLP %d tensors worst %.2e; second-order meta-gradient worst %.2e",
                    op_checks, worst_op, worst_op_name.c_str(), mlp_tensors, worst_mlp, worst_meta)};
}

Outcome leibniz_identity() {
  RngState rng(202);
  double worst = 0.0;
  std::size_t entries = 0;
  for (int trial = 0; trial < kLeibnizTrials; ++trial) {
    auto ps = nn::build_mlp(toy_model({5, 4}, trial % 2 == 0, 3, 3), rng);
    randomize_masks(ps, rng, rng.uniform());
    const auto batch = random_batch(rng, 6, 3, 3);

    ad::Graph g1;
    const auto b1 = nn::bind(ps, g1, true);
    const auto loss1 = ad::cross_entropy(nn::forward(ps, b1, true, meta::batch_input(g1, batch)), batch.labels);
    std::vector<ad::Tensor> mask_leaves;
    for (const auto& m : b1.masks)
      if (m) mask_leaves.push_back(*m);
    const auto gm = ad::backward(loss1, mask_leaves);

    // psi = m * phi as the free variable.
    ad::Graph g2;
    std::vector<ad::Tensor> psi, psi_prunable;
    std::vector<std::optional<ad::Tensor>> no_masks(ps.tensors.size());
    for (const auto& t : ps.tensors) {
      std::vector<double> v = t.value;
      for (std::size_t j = 0; j < v.size(); ++j) v[j] *= t.mask_at(j);
      psi.push_back(g2.leaf(t.shape, v));
      if (t.prunable()) psi_prunable.push_back(psi.back());
    }
    const auto loss2 = ad::cross_entropy(nn::forward(ps, psi, no_masks, false, meta::batch_input(g2, batch)), batch.labels);
    const auto gpsi = ad::backward(loss2, psi_prunable);

    std::size_t k = 0;
    for (const auto& t : ps.tensors) {
      if (!t.prunable()) continue;
      for (std::size_t j = 0; j < t.value.size(); ++j) {
        worst = std::max(worst, std::abs(gm[k].values()[j] - t.value[j] * gpsi[k].values()[j]));
        ++entries;
      }
      ++k;
    }
  }
  return {worst < kLeibnizTol, fmt("%d trials, %zu entries, max |diff| %.2e", kLeibnizTrials, entries, worst)};
}

Outcome closed_form() {
  auto scalar_model = [](double phi) {
    RngState rng(0);
    nn::ModelConfig c;
    c.arch = nn::Architecture::custom;
    c.input_dim = 1;
    c.output_dim = 1;
    c.use_batchnorm = false;
    auto ps = nn::build_mlp(c, rng);
    ps.at("fc1.weight").value = {phi};
    ps.at("fc1.bias").value = {0.0};
    return ps;
  };
  // x = +-1/sqrt(2), y = 2x: the mean-squared loss is (phi - 2)^2 / 2 with zero bias gradient.
  tasks::Batch b;
  b.rows = 2;
  b.cols = 1;
  const double x = 1.0 / std::sqrt(2.0);
  b.inputs = {x, -x};
  b.targets = {2 * x, -2 * x};
  tasks::Episode ep;
  ep.support = b;
  ep.query = b;
  const std::vector<tasks::Episode> eps{ep};

  double worst = 0.0;
  std::string example;
  for (double phi : {1.0, -0.5, 3.0, 2.0}) {
    for (double alpha : {0.1, 0.25, 0.5}) {
      const auto ps = scalar_model(phi);
      meta::MetaConfig c;
      c.method = meta::Method::maml;
      c.inner_lr = alpha;
      const auto plan = meta::resolve_layer_modes(c, 1);
      const double second = meta::meta_gradient(ps, eps, c, plan).values[0][0];
      c.second_order = false;
      const double first = meta::meta_gradient(ps, eps, c, plan).values[0][0];
      worst = std::max({worst, std::abs(second - (1 - alpha) * (1 - alpha) * (phi - 2)),
                        std::abs(first - (1 - alpha) * (phi - 2))});
      if (phi == 1.0 && alpha == 0.1) example = fmt("phi0=1 alpha=0.1: %.15g / %.15g", second, first);
    }
  }
  return {worst < kClosedFormTol, fmt("%s; max |err| %.2e", example.c_str(), worst)};
}

Outcome mask_threshold_suite() {
  std::vector<std::string> problems;
  RngState rng(303);

  // Initial sparsity on the full Omniglot architecture.
  nn::ModelConfig omni;
  auto ps = nn::build_mlp(omni, rng);
  for (double p : {0.0, 0.1, 0.3, 0.5, 0.7, 0.9}) {
    auto local = ps;
    meta::calculate_masks(local, meta::compute_thresholds(local, p));
    for (const auto& t : local.tensors) {
      if (!t.prunable()) continue;
      std::size_t zeros = 0;
      for (double m : t.mask) zeros += m == 0.0;
      const auto expect = static_cast<std::size_t>(std::floor(p * static_cast<double>(t.mask.size())));
      if (zeros != expect) problems.push_back(fmt("p=%.1f %s: %zu zeros, want %zu", p, t.name.c_str(), zeros, expect));
    }
  }

  // Exempt masks and frozen phi0 across meta-training.
  RunConfig c;
  c.arch = nn::Architecture::custom;
  c.hidden = {12, 10};
  c.synthetic_dim = 16;
  c.synthetic_informative = 0;
  c.synthetic_train_classes = 12;
  c.synthetic_val_classes = 6;
  c.synthetic_test_classes = 6;
  c.synthetic_per_class = 10;
  c.p_init = 0.5;
  c.iterations = kMaskSuiteSteps;
  c.eval_interval = kMaskSuiteSteps;
  c.log_interval = kMaskSuiteSteps;
  c.val_episodes = 5;
  c.out_dir = scratch("mask_suite");
  const auto start = exp::init_state(c);
  const auto res = exp::meta_train(c, exp::load_data(c));
  const auto end = exp::from_checkpoint(ckpt::load(res.final_checkpoint));
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < end.params.tensors.size(); ++i) {
    const auto& a = start.params.tensors[i];
    const auto& t = end.params.tensors[i];
    if (t.value != a.value) problems.push_back(t.name + " phi0 changed");
    if (t.exempt) {
      if (!t.mask.empty()) problems.push_back(t.name + " exempt tensor carries a stored mask");
      for (std::size_t j = 0; j < t.value.size(); ++j)
        if (t.mask_at(j) != 1.0) problems.push_back(t.name + " exempt mask entry is not 1");
    } else {
      for (std::size_t j = 0; j < t.mask.size(); ++j) flipped += t.mask[j] != a.mask[j];
    }
  }
  for (const auto& t : end.params.tensors)
    if (t.role != nn::TensorRole::weight || t.block + 1 == end.params.num_blocks())
      if (!t.exempt) problems.push_back(t.name + " should be exempt");
  if (flipped == 0) problems.push_back("no mask entry changed during training");

  // IteRand event.
  auto it = nn::build_mlp(toy_model({20, 15}, true, 12, 5), rng);
  randomize_masks(it, rng, 0.5);
  const auto before = it;
  meta::iterand_randomize(it, rng, 1000, 1000);
  std::size_t redrawn = 0, kept = 0;
  for (std::size_t i = 0; i < it.tensors.size(); ++i) {
    const auto& a = before.tensors[i];
    const auto& t = it.tensors[i];
    if (t.score != a.score || t.mask != a.mask) problems.push_back(t.name + " scores or masks changed by IteRand");
    for (std::size_t j = 0; j < t.value.size(); ++j) {
      if (t.mask_at(j) == 1.0) {
        if (std::memcmp(&t.value[j], &a.value[j], sizeof(double)) != 0) problems.push_back(t.name + " kept entry changed");
        ++kept;
      } else {
        if (t.value[j] == a.value[j]) problems.push_back(t.name + " pruned entry not redrawn");
        ++redrawn;
      }
    }
  }

  std::string detail = fmt("thresholds on omniglot-mlp5 for 6 p_init values; %d steps, %zu mask flips; IteRand %zu kept, %zu redrawn",
                           kMaskSuiteSteps, flipped, kept, redrawn);
  if (!problems.empty()) detail += "; first problem: " + problems.front() + fmt(" (%zu total)", problems.size());
  return {problems.empty(), detail};
}

Outcome degeneracy() {
  RngState rng(404);
  // alpha = 0 meta-gradient against the plain query-loss gradient.
  auto ps = nn::build_mlp(toy_model({7, 6}, true, 5, 3), rng);
  meta::MetaConfig mc;
  mc.method = meta::Method::maml;
  mc.inner_lr = 0.0;
  mc.inner_steps = 2;
  const auto plan = meta::resolve_layer_modes(mc, ps.num_blocks());
  std::vector<tasks::Episode> eps;
  for (int i = 0; i < 3; ++i) eps.push_back(random_episode(rng, 6, 5, 3));
  const auto mg = meta::meta_gradient(ps, eps, mc, plan);
  std::vector<std::vector<double>> plain(ps.tensors.size());
  for (std::size_t i = 0; i < ps.tensors.size(); ++i) plain[i].assign(ps.tensors[i].value.size(), 0.0);
  for (const auto& ep : eps) {
    ad::Graph g;
    const auto b = nn::bind(ps, g, false);
    const auto loss = meta::task_loss(nn::forward(ps, b, false, meta::batch_input(g, ep.query)), ep.query);
    const auto gr = ad::backward(loss, b.values);
    for (std::size_t i = 0; i < gr.size(); ++i)
      for (std::size_t j = 0; j < plain[i].size(); ++j) plain[i][j] += gr[i].values()[j] / static_cast<double>(eps.size());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < plain.size(); ++i)
    for (std::size_t j = 0; j < plain[i].size(); ++j) worst = std::max(worst, std::abs(mg.values[i][j] - plain[i][j]));

  // ANIL and BOIL against MAML with hand-set per-layer rates.
  RunConfig base;
  base.arch = nn::Architecture::custom;
  base.hidden = {12, 10};
  base.synthetic_dim = 16;
  base.synthetic_informative = 0;
  base.synthetic_train_classes = 12;
  base.synthetic_val_classes = 6;
  base.synthetic_test_classes = 6;
  base.synthetic_per_class = 10;
  base.iterations = 30;
  base.eval_interval = 10;
  base.log_interval = 10;
  base.val_episodes = 5;
  base.inner_steps = 2;
  const auto data = exp::load_data(base);
  auto run = [&](meta::Method m, std::vector<double> alphas, const std::string& name) {
    auto c = base;
    c.method = m;
    c.alphas = std::move(alphas);
    c.out_dir = scratch("degeneracy_" + name);
    return without_config(ckpt::load(exp::meta_train(c, data).final_checkpoint));
  };
  const double a = 0.4;
  const bool anil = run(meta::Method::anil, {}, "anil") == run(meta::Method::maml, {0, 0, a}, "maml_anil");
  const bool boil = run(meta::Method::boil, {}, "boil") == run(meta::Method::maml, {a, a, 0}, "maml_boil");
  const bool pass = worst < kDegeneracyTol && anil && boil;
  return {pass, fmt("alpha=0 max |diff| %.2e; anil==maml(0,0,a): %s; boil==maml(a,a,0): %s", worst,
                    anil ? "identical" : "DIFFERENT", boil ? "identical" : "DIFFERENT")};
}

// ---------------------------------------------------------------------------
// Constant-init runs, shared by two criteria.

struct ConstantRun {
  bool omniglot = false;
  fs::path dir;
  double trained = 0.0;
  double random = 0.0;
};

RunConfig constant_init_config(meta::Method method, const std::string& name) {
  RunConfig c;
  c.arch = nn::Architecture::omniglot_mlp5;
  c.constant_init = true;
  c.method = method;
  c.ways = 5;
  c.shots = 5;
  c.inner_steps = 1;
  c.eval_steps = kConstantInitEvalSteps;
  c.iterations = kConstantInitIterations;
  c.eval_interval = 1000;
  c.log_interval = 100;
  c.val_episodes = 100;
  if (const char* d = std::getenv("MTLAB_OMNIGLOT_DIR")) {
    c.dataset = d;
  } else {
    c.dataset = "synthetic";
    c.synthetic_margin = 3.0;
    c.synthetic_informative = 16;
    c.synthetic_background_noise = 0.0;
  }
  c.out_dir = scratch(name);
  return c;
}

std::map<std::string, ConstantRun> g_constant_runs;

const ConstantRun& constant_run(meta::Method method) {
  const std::string name = std::string("constant_") + std::string(meta::to_string(method));
  if (auto it = g_constant_runs.find(name); it != g_constant_runs.end()) return it->second;
  const auto c = constant_init_config(method, name);
  const auto data = exp::load_data(c);
  const auto res = exp::meta_train(c, data);
  const auto ck = ckpt::load(res.best_checkpoint.value_or(res.final_checkpoint));
  exp::EvalOptions opt;
  opt.episodes = kEvalEpisodes;
  opt.seeds = kEvalSeeds;
  opt.steps = kConstantInitEvalSteps;
  opt.seed = 1;
  ConstantRun r;
  r.omniglot = c.dataset != "synthetic";
  r.dir = c.out_dir;
  r.trained = exp::meta_eval(ck, data, opt).mean;
  opt.random_mask = true;
  r.random = exp::meta_eval(ck, data, opt).mean;
  return g_constant_runs[name] = r;
}

Outcome constant_init() {
  const auto& r = constant_run(meta::Method::metaticket);
  const double gap = r.trained - r.random;
  const bool pass = r.omniglot ? gap >= kOmniglotGap && r.trained > kOmniglotFloor : gap >= kSyntheticGap;
  return {pass, fmt("%s, %lld iterations, %d-step eval: Meta-ticket %.2f%%, random mask %.2f%%, gap %.2f points (need %s)",
                    r.omniglot ? "Omniglot" : "synthetic fallback", static_cast<long long>(kConstantInitIterations),
                    kConstantInitEvalSteps, 100 * r.trained, 100 * r.random, 100 * gap,
                    r.omniglot ? ">= 20 and > 55%" : ">= 15")};
}

// Ratio of the last logged task gradient of the last feature-extractor layer to its early-run peak.
struct GradTrend {
  double peak = 0.0;
  double last = 0.0;
  double ratio = std::numeric_limits<double>::quiet_NaN();
};

GradTrend grad_trend(const fs::path& dir, std::size_t last_feature_block) {
  const std::string layer = "fc" + std::to_string(last_feature_block + 1);
  GradTrend t;
  std::int64_t last_iter = -1;
  for (const auto& row : analysis::read_csv(dir / "metrics.csv")) {
    if (row.metric != "task_grad_mean_abs" || row.layer != layer) continue;
    if (row.iteration <= static_cast<std::int64_t>(kEarlyFraction * kConstantInitIterations)) t.peak = std::max(t.peak, row.value);
    if (row.iteration > last_iter) {
      last_iter = row.iteration;
      t.last = row.value;
    }
  }
  if (t.peak > 0.0) t.ratio = t.last / t.peak;
  return t;
}

Outcome rapid_learning() {
  const auto& mt = constant_run(meta::Method::metaticket);
  const auto& maml = constant_run(meta::Method::maml);
  const std::size_t last_feature = 3;  // fc4 in the five-layer MLP
  const auto a = grad_trend(maml.dir, last_feature);
  const auto b = grad_trend(mt.dir, last_feature);
  const bool pass = a.ratio < kRapidMamlRatio && b.ratio > kRapidMetaticketRatio;
  return {pass, fmt("fc4 task gradient last/peak: MAML %.3g/%.3g = %.3g (need < %.2f); Meta-ticket %.3g/%.3g = %.3g (need > %.2f)",
                    a.last, a.peak, a.ratio, kRapidMamlRatio, b.last, b.peak, b.ratio, kRapidMetaticketRatio)};
}

// ---------------------------------------------------------------------------

Outcome sinusoid() {
  struct Variant {
    std::string name;
    meta::Method method;
    std::vector<nn::MetaMode> modes;
    std::optional<double> outer_lr;
  };
  const std::vector<Variant> variants{
      {"maml", meta::Method::maml, {}, std::nullopt},
      {"hybrid", meta::Method::hybrid, {nn::MetaMode::init_params, nn::MetaMode::mask, nn::MetaMode::init_params}, kSinusoidMaskLr},
      {"naive", meta::Method::metaticket, {}, std::nullopt},
  };
  std::map<std::string, std::vector<double>> mse;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (const auto& v : variants) {
      RunConfig c;
      c.dataset = "sinusoid";
      c.arch = nn::Architecture::sinusoid_mlp3;
      c.method = v.method;
      c.layer_modes = v.modes;
      c.outer_lr = v.outer_lr;
      c.shots = 5;
      c.inner_steps = 1;
      c.eval_steps = kSinusoidEvalSteps;
      c.meta_batch = kSinusoidMetaBatch;
      c.iterations = kSinusoidIterations;
      c.eval_interval = 2000;
      c.log_interval = 1000;
      c.val_episodes = 200;
      c.seed = seed;
      c.out_dir = scratch("sinusoid_" + v.name + "_" + std::to_string(seed));
      const auto data = exp::load_data(c);
      const auto res = exp::meta_train(c, data);
      exp::EvalOptions opt;
      opt.episodes = kEvalEpisodes;
      opt.seeds = 1;
      opt.steps = kSinusoidEvalSteps;
      opt.seed = 100 + seed;
      mse[v.name].push_back(exp::meta_eval(ckpt::load(res.best_checkpoint.value_or(res.final_checkpoint)), data, opt).mean);
    }
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  bool ordered = true;
  for (std::size_t s = 0; s < 3; ++s) ordered = ordered && mse["maml"][s] < mse["hybrid"][s] && mse["hybrid"][s] < mse["naive"][s];
  const double m = mean(mse["maml"]), h = mean(mse["hybrid"]), n = mean(mse["naive"]);
  const bool pass = m < kSinusoidMamlMax && n > kSinusoidNaiveMin && h < kSinusoidHybridMax && ordered;
  auto list = [&](const std::string& k) { return fmt("%.3f/%.3f/%.3f", mse[k][0], mse[k][1], mse[k][2]); };
  return {pass, fmt("%lld iterations, mean MSE maml %.3f (< %.1f) hybrid %.3f (< %.1f) naive %.3f (> %.1f); per seed maml %s hybrid %s naive %s; ordering %s",
                    static_cast<long long>(kSinusoidIterations), m, kSinusoidMamlMax, h, kSinusoidHybridMax, n,
                    kSinusoidNaiveMin, list("maml").c_str(), list("hybrid").c_str(), list("naive").c_str(),
                    ordered ? "holds on every seed" : "BROKEN")};
}

Outcome determinism_persistence() {
  std::vector<std::string> problems;
  RunConfig c;
  c.arch = nn::Architecture::custom;
  c.hidden = {12, 10};
  c.synthetic_dim = 16;
  c.synthetic_informative = 0;
  c.synthetic_train_classes = 12;
  c.synthetic_val_classes = 6;
  c.synthetic_test_classes = 6;
  c.synthetic_per_class = 10;
  c.iterations = 40;
  c.eval_interval = 10;
  c.log_interval = 5;
  c.val_episodes = 5;
  c.p_init = 0.4;
  const auto data = exp::load_data(c);
  for (auto method : {meta::Method::metaticket, meta::Method::maml, meta::Method::metaticket_iterand}) {
    auto a = c;
    a.method = method;
    a.iterand_k = 15;
    a.out_dir = scratch("det");
    exp::meta_train(a, data);
    const auto bytes = slurp(a.out_dir / "final.mtkt");
    const auto csv = slurp(a.out_dir / "metrics.csv");
    fs::remove_all(a.out_dir);
    exp::meta_train(a, data);
    if (slurp(a.out_dir / "final.mtkt") != bytes || slurp(a.out_dir / "metrics.csv") != csv)
      problems.push_back(std::string(meta::to_string(method)) + " runs differ");

    // Resume from the midpoint.
    auto part = a;
    part.out_dir = scratch("det_resume");
    exp::meta_train(part, data, {.stop_after = a.iterations / 2});
    exp::meta_train(part, data, {.resume = part.out_dir / "final.mtkt"});
    if (without_config(ckpt::load(part.out_dir / "final.mtkt")) != without_config(ckpt::parse(
            std::vector<std::uint8_t>(bytes.begin(), bytes.end()))))
      problems.push_back(std::string(meta::to_string(method)) + " resume differs");
    if (slurp(part.out_dir / "metrics.csv") != csv) problems.push_back(std::string(meta::to_string(method)) + " resumed CSV differs");

    // Checkpoint bytes round-trip.
    const auto ck = ckpt::load(a.out_dir / "final.mtkt");
    if (ckpt::serialize(ck) != std::vector<std::uint8_t>(bytes.begin(), bytes.end()))
      problems.push_back("checkpoint re-serialization differs");
    if (exp::to_checkpoint(exp::from_checkpoint(ck)) != ck) problems.push_back("checkpoint conversion differs");
  }

  // CSV values round-trip exactly.
  const auto csv_path = scratch("csv") / "m.csv";
  fs::create_directories(csv_path.parent_path());
  RngState rng(909);
  std::vector<double> written;
  {
    analysis::CsvLog log(csv_path);
    for (int i = 0; i < 200; ++i) {
      const double v = (rng.uniform() - 0.5) * std::pow(10.0, static_cast<int>(rng.uniform() * 40) - 20);
      written.push_back(v);
      log.write(i, "fc1", "x", v);
    }
  }
  const auto rows = analysis::read_csv(csv_path);
  bool csv_ok = rows.size() == written.size();
  for (std::size_t i = 0; csv_ok && i < rows.size(); ++i) csv_ok = rows[i].value == written[i] && rows[i].iteration == static_cast<std::int64_t>(i);
  if (!csv_ok) problems.push_back("CSV round-trip differs");

  // PGM round-trip.
  std::vector<std::uint8_t> bits(28 * 28);
  for (auto& b : bits) b = rng.uniform() < 0.5 ? 1 : 0;
  const auto pgm = scratch("pgm") / "m.pgm";
  fs::create_directories(pgm.parent_path());
  analysis::write_pgm(pgm, 28, 28, bits);
  const auto img = analysis::read_pgm(pgm);
  if (img.width != 28 || img.height != 28 || img.pixels != bits) problems.push_back("PGM round-trip differs");

  std::string detail = "3 methods: repeat runs, midpoint resume, checkpoint/CSV/PGM round-trips";
  if (problems.empty()) detail += " all bitwise identical";
  else detail += "; first problem: " + problems.front() + fmt(" (%zu total)", problems.size());
  return {problems.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-correctness", gradient_correctness},
      {"leibniz-identity", leibniz_identity},
      {"closed-form-meta-gradient", closed_form},
      {"mask-threshold-suite", mask_threshold_suite},
      {"degeneracy-equivalences", degeneracy},
      {"determinism-persistence", determinism_persistence},
      {"sinusoid-regression", sinusoid},
      {"constant-init", constant_init},
      {"rapid-learning", rapid_learning},
  };
  std::vector<std::string> wanted(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("%s %s: %s [%.0fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
