#include "mtlab/nn.hpp"

#include <cmath>

#include "mtlab/error.hpp"

namespace mtlab::nn {

std::string_view to_string(MetaMode m) {
  switch (m) {
    case MetaMode::mask:
      return "mask";
    case MetaMode::init_params:
      return "init-params";
    case MetaMode::frozen:
      return "frozen";
  }
  return "?";
}

std::string_view to_string(Architecture a) {
  switch (a) {
    case Architecture::omniglot_mlp5:
      return "omniglot-mlp5";
    case Architecture::cifarfs_mlp5:
      return "cifarfs-mlp5";
    case Architecture::sinusoid_mlp3:
      return "sinusoid-mlp3";
    case Architecture::custom:
      return "custom";
  }
  return "?";
}

MetaMode parse_meta_mode(std::string_view s) {
  if (s == "mask") return MetaMode::mask;
  if (s == "init-params") return MetaMode::init_params;
  if (s == "frozen") return MetaMode::frozen;
  throw ConfigError("unknown meta-mode '" + std::string(s) + "'");
}

Architecture parse_architecture(std::string_view s) {
  if (s == "omniglot-mlp5") return Architecture::omniglot_mlp5;
  if (s == "cifarfs-mlp5") return Architecture::cifarfs_mlp5;
  if (s == "sinusoid-mlp3") return Architecture::sinusoid_mlp3;
  if (s == "custom") return Architecture::custom;
  throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

std::vector<std::size_t> ModelConfig::dims() const {
  if (ways <= 0) throw ConfigError("ways must be positive");
  const auto w = static_cast<std::size_t>(ways);
  switch (arch) {
    case Architecture::omniglot_mlp5: {
      if (width <= 0) throw ConfigError("width factor must be positive");
      const auto r = static_cast<std::size_t>(width);
      return {784, 256 * r, 128 * r, 64 * r, 64 * r, w};
    }
    case Architecture::cifarfs_mlp5:
      return {3072, 1024, 512, 256, 128, w};
    case Architecture::sinusoid_mlp3:
      return {1, 40, 40, 1};
    case Architecture::custom: {
      std::vector<std::size_t> d{input_dim};
      d.insert(d.end(), hidden.begin(), hidden.end());
      d.push_back(output_dim ? output_dim : w);
      return d;
    }
  }
  throw ConfigError("unknown architecture");
}

std::size_t ParamSet::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < tensors.size(); ++i)
    if (tensors[i].name == name) return i;
  throw ConfigError("no parameter named '" + std::string(name) + "'");
}

std::size_t ParamSet::weight_of_block(std::size_t block) const {
  for (const auto& l : layers)
    if (l.kind == LayerKind::linear && l.block == block) return *l.first;
  throw ConfigError("no linear block " + std::to_string(block));
}

ParamSet build_mlp(const ModelConfig& config, RngState& rng) {
  const auto dims = config.dims();
  if (dims.size() < 2) throw ConfigError("network needs at least one linear layer");
  for (auto d : dims)
    if (d == 0) throw ConfigError("layer dimensions must be positive");

  ParamSet ps;
  ps.config = config;
  ps.num_blocks_ = dims.size() - 1;
  ps.input_dim_ = dims.front();
  ps.output_dim_ = dims.back();
  ps.layers.push_back({.kind = LayerKind::flatten, .in_dim = dims.front(), .out_dim = dims.front()});

  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t in = dims[l];
    const std::size_t out = dims[l + 1];
    const bool is_output = l + 2 == dims.size();
    const std::string tag = std::to_string(l + 1);

    ParamTensor w;
    w.name = "fc" + tag + ".weight";
    w.role = TensorRole::weight;
    w.shape = {in, out};
    w.block = l;
    w.fan_in = in;
    w.exempt = is_output;
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    w.value.resize(in * out);
    for (auto& v : w.value) v = rng.normal(0.0, stddev);
    if (!w.exempt) {
      const double bound = std::sqrt(6.0 / static_cast<double>(in));
      w.score.resize(in * out);
      for (auto& s : w.score) s = rng.uniform(-bound, bound);
      w.mask.assign(in * out, 1.0);
    }

    ParamTensor b;
    b.name = "fc" + tag + ".bias";
    b.role = TensorRole::bias;
    b.shape = {out};
    b.block = l;
    b.fan_in = in;
    b.value.assign(out, 0.0);

    LayerSpec lin{.kind = LayerKind::linear, .in_dim = in, .out_dim = out, .prunable = !is_output, .block = l};
    lin.first = ps.tensors.size();
    ps.tensors.push_back(std::move(w));
    lin.second = ps.tensors.size();
    ps.tensors.push_back(std::move(b));
    ps.layers.push_back(lin);

    if (is_output) break;
    if (config.use_batchnorm) {
      ParamTensor sc;
      sc.name = "bn" + tag + ".scale";
      sc.role = TensorRole::bn_scale;
      sc.shape = {out};
      sc.block = l;
      sc.fan_in = out;
      sc.value.assign(out, 1.0);
      ParamTensor sh;
      sh.name = "bn" + tag + ".shift";
      sh.role = TensorRole::bn_shift;
      sh.shape = {out};
      sh.block = l;
      sh.fan_in = out;
      sh.value.assign(out, 0.0);
      LayerSpec bn{.kind = LayerKind::batchnorm, .in_dim = out, .out_dim = out, .block = l};
      bn.first = ps.tensors.size();
      ps.tensors.push_back(std::move(sc));
      bn.second = ps.tensors.size();
      ps.tensors.push_back(std::move(sh));
      ps.layers.push_back(bn);
    }
    ps.layers.push_back({.kind = LayerKind::relu, .in_dim = out, .out_dim = out, .block = l});
  }
  return ps;
}

void set_constant_init(ParamSet& params) {
  for (auto& t : params.tensors) {
    if (t.role != TensorRole::weight) continue;
    const double c = std::sqrt(2.0 / static_cast<double>(t.fan_in));
    std::fill(t.value.begin(), t.value.end(), c);
  }
}

ad::Tensor batchnorm_standardize(ad::Tensor x) {
  if (x.shape().size() != 2) throw DimensionError("batchnorm expects [B, D] input, got " + ad::to_string(x.shape()));
  const std::size_t batch = x.shape()[0];
  if (batch < 2) throw DimensionError("batchnorm: degenerate batch of size " + std::to_string(batch) + " (need >= 2)");
  const double inv_b = 1.0 / static_cast<double>(batch);
  const ad::Tensor mu = ad::scale(ad::sum_rows(x), inv_b);
  const ad::Tensor centred = ad::sub(x, ad::broadcast_rows(mu, batch));
  const ad::Tensor var = ad::scale(ad::sum_rows(ad::mul(centred, centred)), inv_b);
  const ad::Tensor inv_std = ad::rsqrt(ad::add_scalar(var, kBatchNormEps));
  return ad::mul(centred, ad::broadcast_rows(inv_std, batch));
}

ad::Tensor batchnorm_forward(ad::Tensor x, ad::Tensor scale, ad::Tensor shift) {
  const ad::Tensor xhat = batchnorm_standardize(x);
  const std::size_t batch = x.shape()[0];
  if (scale.shape() != ad::Shape{x.shape()[1]} || shift.shape() != ad::Shape{x.shape()[1]}) {
    throw DimensionError("batchnorm: affine parameters must have shape [" + std::to_string(x.shape()[1]) + "]");
  }
  return ad::add(ad::mul(xhat, ad::broadcast_rows(scale, batch)), ad::broadcast_rows(shift, batch));
}

Bound bind(const ParamSet& params, ad::Graph& graph, bool with_masks) {
  Bound b;
  b.values.reserve(params.tensors.size());
  b.masks.resize(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& t = params.tensors[i];
    b.values.push_back(graph.leaf(t.shape, t.value));
    if (with_masks && t.prunable()) b.masks[i] = graph.leaf(t.shape, t.mask);
  }
  return b;
}

ad::Tensor forward(const ParamSet& params, std::span<const ad::Tensor> values,
                   std::span<const std::optional<ad::Tensor>> masks, bool apply_mask, ad::Tensor input) {
  if (values.size() != params.tensors.size()) {
    throw ConfigError("forward: expected " + std::to_string(params.tensors.size()) + " parameter tensors, got " +
                      std::to_string(values.size()));
  }
  if (input.shape().size() != 2 || input.shape()[1] != params.input_dim()) {
    throw DimensionError("forward: input " + ad::to_string(input.shape()) + " does not match input dim " +
                         std::to_string(params.input_dim()));
  }
  const std::size_t batch = input.shape()[0];
  ad::Tensor h = input;
  for (const auto& layer : params.layers) {
    switch (layer.kind) {
      case LayerKind::flatten:
        break;
      case LayerKind::linear: {
        const std::size_t wi = *layer.first;
        ad::Tensor w = values[wi];
        if (w.shape() != params.tensors[wi].shape) {
          throw DimensionError("forward: tensor " + params.tensors[wi].name + " has shape " + ad::to_string(w.shape()));
        }
        if (apply_mask && params.tensors[wi].prunable()) {
          if (masks.size() != values.size() || !masks[wi]) {
            throw ConfigError("forward: mask for " + params.tensors[wi].name + " is not bound");
          }
          w = ad::hadamard(*masks[wi], w);
        }
        h = ad::add(ad::matmul(h, w), ad::broadcast_rows(values[*layer.second], batch));
        break;
      }
      case LayerKind::batchnorm:
        h = batchnorm_forward(h, values[*layer.first], values[*layer.second]);
        break;
      case LayerKind::relu:
        h = ad::relu(h);
        break;
    }
  }
  return h;
}

}  // namespace mtlab::nn
