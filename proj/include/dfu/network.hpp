#pragma once

// Declarative network descriptions, the DFUNet and LeNet builders, the
// layer-graph executor (forward with cached activations, reverse-mode
// backward), and fan-based parameter initialization.

#include <dfu/layers.hpp>
#include <dfu/tensor.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace dfu {

struct ConvLayer {
  std::string name;
  ConvSpec spec;
};

struct PoolLayer {
  PoolSpec spec;
};

struct LrnLayer {
  LrnParams params;
};

struct ReluLayer {};

struct ParallelConvLayer {
  std::string name;
  ParallelConvSpec spec;
};

struct FcLayer {
  std::string name;
  std::size_t in_units = 0;
  std::size_t out_units = 0;
};

using LayerSpec = std::variant<ConvLayer, PoolLayer, LrnLayer, ReluLayer, ParallelConvLayer, FcLayer>;

struct NetworkSpec {
  std::array<std::size_t, 3> input_shape{};  // C, H, W
  std::size_t num_classes = 2;
  std::vector<LayerSpec> layers;
};

using Params = std::map<std::string, Tensor>;

inline const char* layer_kind_name(const LayerSpec& layer) {
  if (std::holds_alternative<ConvLayer>(layer)) return "conv";
  if (std::holds_alternative<PoolLayer>(layer)) return "pool";
  if (std::holds_alternative<LrnLayer>(layer)) return "lrn";
  if (std::holds_alternative<ReluLayer>(layer)) return "relu";
  if (std::holds_alternative<ParallelConvLayer>(layer)) return "parallel";
  return "fc";
}

// Symbolic shape propagation. Shapes are {C,H,W} until the first FC layer
// flattens to {units}.
inline std::vector<std::vector<std::size_t>> propagate_shapes(const NetworkSpec& net) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur = {net.input_shape[0], net.input_shape[1], net.input_shape[2]};
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& layer = net.layers[li];
    try {
      if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
        if (cur.size() != 3 || cur[0] != conv->spec.in_channels)
          throw std::invalid_argument("input channels do not match conv spec");
        cur = {conv->spec.out_channels,
               conv_out_extent(cur[1], conv->spec.kernel, conv->spec.stride, conv->spec.pad),
               conv_out_extent(cur[2], conv->spec.kernel, conv->spec.stride, conv->spec.pad)};
      } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
        if (cur.size() != 3) throw std::invalid_argument("pool needs a C x H x W input");
        cur = {cur[0], pool_out_extent(cur[1], pool->spec), pool_out_extent(cur[2], pool->spec)};
      } else if (const auto* par = std::get_if<ParallelConvLayer>(&layer)) {
        if (cur.size() != 3 || cur[0] != par->spec.branch1.in_channels)
          throw std::invalid_argument("input channels do not match parallel conv spec");
        cur = {par->spec.out_channels(), cur[1], cur[2]};
      } else if (const auto* fc = std::get_if<FcLayer>(&layer)) {
        std::size_t flat = 1;
        for (std::size_t e : cur) flat *= e;
        if (flat != fc->in_units)
          throw std::invalid_argument("flattened input " + std::to_string(flat) +
                                      " does not match fc in_units " +
                                      std::to_string(fc->in_units));
        cur = {fc->out_units};
      }
      // relu and lrn preserve the shape
    } catch (const std::exception& e) {
      throw std::runtime_error("layer " + std::to_string(li) + " (" + layer_kind_name(layer) +
                               "): " + e.what());
    }
    out.push_back(cur);
  }
  return out;
}

inline void validate_spec(const NetworkSpec& net) {
  auto shapes = propagate_shapes(net);
  if (shapes.empty() || shapes.back() != std::vector<std::size_t>{net.num_classes})
    throw std::invalid_argument("network: final layer must emit num_classes logits");
}

// Parameter names in layer order; the canonical ordering for initialization
// and checkpoints.
inline std::vector<std::string> param_names(const NetworkSpec& net) {
  std::vector<std::string> names;
  for (const LayerSpec& layer : net.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      names.push_back(conv->name + ".weight");
      names.push_back(conv->name + ".bias");
    } else if (const auto* par = std::get_if<ParallelConvLayer>(&layer)) {
      for (const char* b : {".b1", ".b3", ".b5"}) {
        names.push_back(par->name + b + ".weight");
        names.push_back(par->name + b + ".bias");
      }
    } else if (const auto* fc = std::get_if<FcLayer>(&layer)) {
      names.push_back(fc->name + ".weight");
      names.push_back(fc->name + ".bias");
    }
  }
  return names;
}

namespace detail {

inline std::vector<std::size_t> conv_weight_shape(const ConvSpec& s) {
  return {s.out_channels, s.in_channels, s.kernel, s.kernel};
}

// Shape of every named parameter, in param_names order.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> param_shapes(
    const NetworkSpec& net) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  for (const LayerSpec& layer : net.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      out.emplace_back(conv->name + ".weight", conv_weight_shape(conv->spec));
      out.emplace_back(conv->name + ".bias", std::vector<std::size_t>{conv->spec.out_channels});
    } else if (const auto* par = std::get_if<ParallelConvLayer>(&layer)) {
      const std::array<const ConvSpec*, 3> branches = {&par->spec.branch1, &par->spec.branch3,
                                                       &par->spec.branch5};
      const std::array<const char*, 3> tags = {".b1", ".b3", ".b5"};
      for (std::size_t i = 0; i < 3; ++i) {
        out.emplace_back(par->name + tags[i] + ".weight", conv_weight_shape(*branches[i]));
        out.emplace_back(par->name + tags[i] + ".bias",
                         std::vector<std::size_t>{branches[i]->out_channels});
      }
    } else if (const auto* fc = std::get_if<FcLayer>(&layer)) {
      out.emplace_back(fc->name + ".weight", std::vector<std::size_t>{fc->out_units, fc->in_units});
      out.emplace_back(fc->name + ".bias", std::vector<std::size_t>{fc->out_units});
    }
  }
  return out;
}

inline double uniform01(std::mt19937_64& gen) {
  return (gen() >> 11) * (1.0 / 9007199254740992.0);
}

}  // namespace detail

inline std::size_t param_count(const NetworkSpec& net) {
  std::size_t total = 0;
  for (const auto& [name, shape] : detail::param_shapes(net)) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    total += n;
  }
  return total;
}

// Fan-based uniform initialization: weights ~ U(-a, a) with
// a = sqrt(6 / (fan_in + fan_out)); biases zero. Deterministic per seed.
inline Params init_params(const NetworkSpec& net, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Params params;
  for (const auto& [name, shape] : detail::param_shapes(net)) {
    Tensor t(shape);
    const bool is_bias = shape.size() == 1;
    if (!is_bias) {
      double fan_in = 1.0, fan_out = 1.0;
      if (shape.size() == 4) {  // O x C x k x k
        fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
        fan_out = static_cast<double>(shape[0] * shape[2] * shape[3]);
      } else {  // out x in
        fan_in = static_cast<double>(shape[1]);
        fan_out = static_cast<double>(shape[0]);
      }
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = a * (2.0 * detail::uniform01(gen) - 1.0);
    }
    params.emplace(name, std::move(t));
  }
  return params;
}

// ---------------------------------------------------------------------------
// DFUNet builder

enum class DfunetVariant { kBase, kV1, kV2, kV3, kV4, kV5 };

struct DfunetOptions {
  bool final_pool_max = false;   // Table-style 7x7 max pool instead of global average
  std::size_t fc1_units = 100;   // first fully-connected width
};

inline DfunetVariant dfunet_variant_from_string(const std::string& s) {
  if (s == "base") return DfunetVariant::kBase;
  if (s == "v1") return DfunetVariant::kV1;
  if (s == "v2") return DfunetVariant::kV2;
  if (s == "v3") return DfunetVariant::kV3;
  if (s == "v4") return DfunetVariant::kV4;
  if (s == "v5") return DfunetVariant::kV5;
  throw std::invalid_argument("unknown DFUNet variant: " + s);
}

inline std::array<std::array<std::size_t, 3>, 4> dfunet_parallel_widths(DfunetVariant v) {
  switch (v) {
    case DfunetVariant::kBase:
      return {{{32, 64, 128}, {32, 64, 128}, {32, 64, 128}, {32, 64, 128}}};
    case DfunetVariant::kV1:
      return {{{128, 256, 512}, {128, 256, 512}, {128, 256, 512}, {128, 256, 512}}};
    case DfunetVariant::kV2:
      return {{{192, 256, 512}, {192, 256, 512}, {192, 256, 512}, {192, 256, 512}}};
    case DfunetVariant::kV3:
      return {{{128, 128, 128}, {128, 128, 128}, {256, 256, 256}, {256, 256, 256}}};
    case DfunetVariant::kV4:
      return {{{192, 192, 192}, {256, 256, 256}, {256, 256, 256}, {512, 512, 512}}};
    case DfunetVariant::kV5:
      return {{{256, 256, 256}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}}};
  }
  throw std::invalid_argument("unknown DFUNet variant");
}

// 14-layer stack: conv7x7/s2(64), maxpool, conv1x1(64), conv3x3(192),
// maxpool, four parallel-conv blocks interleaved with maxpools, a global
// pool, FC(fc1_units) and FC(K). ReLU follows every conv and the first FC;
// LRN follows each parallel-conv concatenation.
inline NetworkSpec build_dfunet(DfunetVariant variant, std::size_t in_channels, std::size_t height,
                                std::size_t width, std::size_t classes,
                                const DfunetOptions& options = {}) {
  if (height < 29 || width < 29)
    throw std::invalid_argument("dfunet: input extent must be at least 29");
  if (classes < 2) throw std::invalid_argument("dfunet: need at least two classes");

  const auto widths = dfunet_parallel_widths(variant);
  NetworkSpec net;
  net.input_shape = {in_channels, height, width};
  net.num_classes = classes;

  const PoolSpec maxpool{PoolMode::kMax, 3, 2, PoolRounding::kCeil};
  std::size_t h = height, w = width;

  net.layers.push_back(ConvLayer{"conv1", {in_channels, 64, 7, 2, 3}});
  h = conv_out_extent(h, 7, 2, 3);
  w = conv_out_extent(w, 7, 2, 3);
  net.layers.push_back(ReluLayer{});
  net.layers.push_back(PoolLayer{maxpool});
  h = pool_out_extent(h, maxpool);
  w = pool_out_extent(w, maxpool);

  net.layers.push_back(ConvLayer{"conv2", {64, 64, 1, 1, 0}});
  net.layers.push_back(ReluLayer{});
  net.layers.push_back(ConvLayer{"conv3", {64, 192, 3, 1, 1}});
  net.layers.push_back(ReluLayer{});
  net.layers.push_back(PoolLayer{maxpool});
  h = pool_out_extent(h, maxpool);
  w = pool_out_extent(w, maxpool);

  std::size_t channels = 192;
  for (std::size_t block = 0; block < 4; ++block) {
    const auto& bw = widths[block];
    net.layers.push_back(
        ParallelConvLayer{"par" + std::to_string(block + 1),
                          make_parallel_conv(channels, bw[0], bw[1], bw[2])});
    channels = bw[0] + bw[1] + bw[2];
    net.layers.push_back(ReluLayer{});
    net.layers.push_back(LrnLayer{LrnParams{}});
    if (block == 0 || block == 2) {  // max pool after the first and third blocks
      net.layers.push_back(PoolLayer{maxpool});
      h = pool_out_extent(h, maxpool);
      w = pool_out_extent(w, maxpool);
    }
  }

  if (h != w)
    throw std::invalid_argument("dfunet: non-square extent at the global pool is unsupported");
  const PoolSpec global_pool{options.final_pool_max ? PoolMode::kMax : PoolMode::kAverage, h, 1,
                             PoolRounding::kFloor};
  net.layers.push_back(PoolLayer{global_pool});

  net.layers.push_back(FcLayer{"fc1", channels, options.fc1_units});
  net.layers.push_back(ReluLayer{});
  net.layers.push_back(FcLayer{"fc2", options.fc1_units, classes});
  validate_spec(net);
  return net;
}

// Small grayscale baseline: conv5x5(20)/pool2/conv5x5(50)/pool2/FC(500)/ReLU/FC(K)
// over a 1 x 28 x 28 input.
inline NetworkSpec build_lenet(std::size_t classes) {
  if (classes < 2) throw std::invalid_argument("lenet: need at least two classes");
  NetworkSpec net;
  net.input_shape = {1, 28, 28};
  net.num_classes = classes;
  const PoolSpec pool2{PoolMode::kMax, 2, 2, PoolRounding::kFloor};
  net.layers.push_back(ConvLayer{"conv1", {1, 20, 5, 1, 0}});
  net.layers.push_back(PoolLayer{pool2});
  net.layers.push_back(ConvLayer{"conv2", {20, 50, 5, 1, 0}});
  net.layers.push_back(PoolLayer{pool2});
  net.layers.push_back(FcLayer{"fc1", 50 * 4 * 4, 500});
  net.layers.push_back(ReluLayer{});
  net.layers.push_back(FcLayer{"fc2", 500, classes});
  validate_spec(net);
  return net;
}

// ---------------------------------------------------------------------------
// Executor

struct LayerCache {
  Tensor input;                              // as seen by the layer (flattened for FC)
  std::vector<std::size_t> argmax;           // pool layers, max mode
  std::vector<std::size_t> pre_flatten_shape;  // FC layers fed by a rank-4 tensor
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Tensor logits;
};

namespace detail {

inline Tensor reshape(const Tensor& t, std::vector<std::size_t> shape) {
  return Tensor(std::move(shape), t.values());
}

inline const Tensor& named_param(const Params& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::invalid_argument("missing parameter tensor: " + name);
  return it->second;
}

}  // namespace detail

inline Tensor forward(const NetworkSpec& net, const Params& params, const Tensor& x,
                      ForwardCache* cache = nullptr) {
  if (x.rank() != 4 || x.extent(1) != net.input_shape[0] || x.extent(2) != net.input_shape[1] ||
      x.extent(3) != net.input_shape[2])
    throw std::invalid_argument("forward: input must be N x " +
                                shape_string({net.input_shape[0], net.input_shape[1],
                                              net.input_shape[2]}));
  if (cache) {
    cache->layers.clear();
    cache->layers.resize(net.layers.size());
  }
  Tensor cur = x;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const LayerSpec& layer = net.layers[li];
    try {
      if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
        if (cache) cache->layers[li].input = cur;
        cur = conv2d_forward(cur, conv->spec, detail::named_param(params, conv->name + ".weight"),
                             detail::named_param(params, conv->name + ".bias"));
      } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
        if (cache) cache->layers[li].input = cur;
        PoolResult r = pool_forward(cur, pool->spec);
        if (cache) cache->layers[li].argmax = std::move(r.argmax);
        cur = std::move(r.output);
      } else if (const auto* lrn = std::get_if<LrnLayer>(&layer)) {
        if (cache) cache->layers[li].input = cur;
        cur = lrn_forward(cur, lrn->params);
      } else if (std::holds_alternative<ReluLayer>(layer)) {
        if (cache) cache->layers[li].input = cur;
        cur = relu(cur);
      } else if (const auto* par = std::get_if<ParallelConvLayer>(&layer)) {
        if (cache) cache->layers[li].input = cur;
        std::vector<Tensor> parts;
        parts.push_back(conv2d_forward(cur, par->spec.branch1,
                                       detail::named_param(params, par->name + ".b1.weight"),
                                       detail::named_param(params, par->name + ".b1.bias")));
        parts.push_back(conv2d_forward(cur, par->spec.branch3,
                                       detail::named_param(params, par->name + ".b3.weight"),
                                       detail::named_param(params, par->name + ".b3.bias")));
        parts.push_back(conv2d_forward(cur, par->spec.branch5,
                                       detail::named_param(params, par->name + ".b5.weight"),
                                       detail::named_param(params, par->name + ".b5.bias")));
        cur = concat_channels(parts);
      } else if (const auto* fc = std::get_if<FcLayer>(&layer)) {
        if (cur.rank() == 4) {
          if (cache) cache->layers[li].pre_flatten_shape = cur.shape();
          cur = detail::reshape(cur, {cur.extent(0), cur.size() / cur.extent(0)});
        }
        if (cache) cache->layers[li].input = cur;
        cur = fc_forward(cur, detail::named_param(params, fc->name + ".weight"),
                         detail::named_param(params, fc->name + ".bias"));
      }
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error("layer " + std::to_string(li) + " (" + layer_kind_name(layer) +
                               "): " + e.what());
    }
  }
  if (cache) cache->logits = cur;
  return cur;
}

// Reverse-mode pass. Returns the gradient of the mean softmax cross-entropy
// loss over the batch with respect to every parameter; also exposes the loss.
inline Params backward(const NetworkSpec& net, const Params& params, const ForwardCache& cache,
                       const std::vector<std::size_t>& labels, double* loss_out = nullptr) {
  if (cache.layers.size() != net.layers.size())
    throw std::invalid_argument("backward: cache does not match network");
  SoftmaxResult head = softmax_cross_entropy_batch(cache.logits, labels);
  if (loss_out) *loss_out = head.loss;

  Params grads;
  Tensor grad = head.grad_logits;
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const LayerSpec& layer = net.layers[li];
    const LayerCache& lc = cache.layers[li];
    try {
      if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
        auto g = conv2d_backward(lc.input, conv->spec,
                                 detail::named_param(params, conv->name + ".weight"), grad,
                                 /*need_grad_input=*/li > 0);
        grads.emplace(conv->name + ".weight", std::move(g.grad_weights));
        grads.emplace(conv->name + ".bias", std::move(g.grad_bias));
        grad = std::move(g.grad_input);
      } else if (const auto* pool = std::get_if<PoolLayer>(&layer)) {
        grad = pool_backward(lc.input, pool->spec, lc.argmax, grad);
      } else if (const auto* lrn = std::get_if<LrnLayer>(&layer)) {
        grad = lrn_backward(lc.input, lrn->params, grad);
      } else if (std::holds_alternative<ReluLayer>(layer)) {
        grad = relu_backward(lc.input, grad);
      } else if (const auto* par = std::get_if<ParallelConvLayer>(&layer)) {
        auto slices = concat_channels_backward(
            grad, {par->spec.branch1.out_channels, par->spec.branch3.out_channels,
                   par->spec.branch5.out_channels});
        const std::array<const ConvSpec*, 3> branches = {&par->spec.branch1, &par->spec.branch3,
                                                         &par->spec.branch5};
        const std::array<const char*, 3> tags = {".b1", ".b3", ".b5"};
        Tensor gx;
        for (std::size_t bi = 0; bi < 3; ++bi) {
          auto g = conv2d_backward(lc.input, *branches[bi],
                                   detail::named_param(params, par->name + tags[bi] + ".weight"),
                                   slices[bi], /*need_grad_input=*/li > 0);
          grads.emplace(par->name + tags[bi] + ".weight", std::move(g.grad_weights));
          grads.emplace(par->name + tags[bi] + ".bias", std::move(g.grad_bias));
          if (li > 0) gx = gx.empty() ? std::move(g.grad_input) : add(gx, g.grad_input);
        }
        grad = std::move(gx);
      } else if (const auto* fc = std::get_if<FcLayer>(&layer)) {
        auto g = fc_backward(lc.input, detail::named_param(params, fc->name + ".weight"), grad);
        grads.emplace(fc->name + ".weight", std::move(g.grad_weights));
        grads.emplace(fc->name + ".bias", std::move(g.grad_bias));
        grad = std::move(g.grad_input);
        if (!lc.pre_flatten_shape.empty())
          grad = detail::reshape(grad, lc.pre_flatten_shape);
      }
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error("layer " + std::to_string(li) + " (" + layer_kind_name(layer) +
                               "): " + e.what());
    }
  }
  return grads;
}

}  // namespace dfu
