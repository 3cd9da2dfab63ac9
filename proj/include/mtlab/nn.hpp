#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtlab/autodiff.hpp"
#include "mtlab/rng.hpp"

namespace mtlab::nn {

enum class LayerKind { flatten, linear, batchnorm, relu };

// What the outer loop learns for a Linear(->BatchNorm) block.
//   mask        : scores over a fixed random weight (supermask)
//   init_params : the initial values themselves (MAML)
//   frozen      : nothing; values stay at their initial draw
enum class MetaMode { mask, init_params, frozen };

enum class Architecture { omniglot_mlp5, cifarfs_mlp5, sinusoid_mlp3, custom };

enum class TensorRole { weight, bias, bn_scale, bn_shift };

std::string_view to_string(MetaMode m);
std::string_view to_string(Architecture a);
MetaMode parse_meta_mode(std::string_view s);
Architecture parse_architecture(std::string_view s);

struct ModelConfig {
  Architecture arch = Architecture::omniglot_mlp5;
  int width = 1;  // width factor for omniglot-mlp5
  int ways = 5;
  bool use_batchnorm = true;
  // custom architectures only
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 0;  // 0 = number of ways

  bool regression() const { return arch == Architecture::sinusoid_mlp3; }
  // Widths of every linear boundary: {input, hidden..., output}.
  std::vector<std::size_t> dims() const;
};

struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  bool prunable = false;
  MetaMode meta_mode = MetaMode::init_params;
  double inner_lr = 0.0;
  std::size_t block = 0;
  // Indices into ParamSet::tensors (weight/bias for linear, scale/shift for batchnorm).
  std::optional<std::size_t> first{};
  std::optional<std::size_t> second{};
};

struct ParamTensor {
  std::string name;
  TensorRole role = TensorRole::weight;
  ad::Shape shape;
  std::size_t block = 0;
  std::size_t fan_in = 0;
  bool exempt = true;
  std::vector<double> value;
  std::vector<double> score;  // prunable only
  std::vector<double> mask;   // prunable only, entries exactly 0.0 or 1.0

  bool prunable() const { return !exempt; }
  double mask_at(std::size_t i) const { return exempt ? 1.0 : mask[i]; }
};

class ParamSet {
 public:
  ModelConfig config;
  std::vector<LayerSpec> layers;
  std::vector<ParamTensor> tensors;

  std::size_t num_blocks() const { return num_blocks_; }
  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return output_dim_; }

  std::size_t index_of(std::string_view name) const;
  ParamTensor& at(std::string_view name) { return tensors[index_of(name)]; }
  const ParamTensor& at(std::string_view name) const { return tensors[index_of(name)]; }
  // Index of the linear weight tensor of a block.
  std::size_t weight_of_block(std::size_t block) const;

  friend ParamSet build_mlp(const ModelConfig& config, RngState& rng);

 private:
  std::size_t num_blocks_ = 0;
  std::size_t input_dim_ = 0;
  std::size_t output_dim_ = 0;
};

// Kaiming-normal weights (std sqrt(2/fan_in)), zero biases, unit/zero
// BatchNorm affine, Kaiming-uniform scores (bound sqrt(6/fan_in)) on every
// hidden linear weight, all-ones masks. Biases, BatchNorm affine parameters
// and the output layer are exempt from pruning.
ParamSet build_mlp(const ModelConfig& config, RngState& rng);

// Replaces every linear weight with one constant per layer,
// sqrt(2/fan_in) (the Kaiming standard deviation). Scores and masks are kept.
void set_constant_init(ParamSet& params);

inline constexpr double kBatchNormEps = 1e-5;

// Per-feature standardisation with current-batch statistics (biased variance).
ad::Tensor batchnorm_standardize(ad::Tensor x);
ad::Tensor batchnorm_forward(ad::Tensor x, ad::Tensor scale, ad::Tensor shift);

// A ParamSet materialised as leaves of one graph.
struct Bound {
  std::vector<ad::Tensor> values;
  std::vector<std::optional<ad::Tensor>> masks;  // set for prunable tensors when bound
};

Bound bind(const ParamSet& params, ad::Graph& graph, bool with_masks);

// Runs the network on `input` ([B, input_dim]). `values` holds one tensor per
// ParamSet entry (adapted values during inner steps). When apply_mask is set
// every prunable weight enters as mask ⊙ value.
ad::Tensor forward(const ParamSet& params, std::span<const ad::Tensor> values,
                   std::span<const std::optional<ad::Tensor>> masks, bool apply_mask, ad::Tensor input);

inline ad::Tensor forward(const ParamSet& params, const Bound& bound, bool apply_mask, ad::Tensor input) {
  return forward(params, bound.values, bound.masks, apply_mask, input);
}

}  // namespace mtlab::nn
