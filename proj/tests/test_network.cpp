#include <dfu/checkpoint.hpp>
#include <dfu/network.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"

using namespace dfu;

namespace {

// Output shape after each layer when executing on a random input, with the
// batch dimension stripped; FC flatten points report the pre-flatten shape
// of the producing layer.
std::vector<std::vector<std::size_t>> executed_shapes(const NetworkSpec& net,
                                                      const Params& params, const Tensor& x) {
  ForwardCache cache;
  Tensor logits = forward(net, params, x, &cache);
  std::vector<std::vector<std::size_t>> out(net.layers.size());
  auto strip = [](const std::vector<std::size_t>& s) {
    return std::vector<std::size_t>(s.begin() + 1, s.end());
  };
  for (std::size_t li = 0; li + 1 < net.layers.size(); ++li) {
    const LayerCache& next = cache.layers[li + 1];
    out[li] = strip(next.pre_flatten_shape.empty() ? next.input.shape() : next.pre_flatten_shape);
  }
  out.back() = strip(logits.shape());
  return out;
}

}  // namespace

TEST_CASE("base DFUNet reproduces the reference layer geometry at 3x224x224") {
  NetworkSpec net = build_dfunet(DfunetVariant::kBase, 3, 224, 224, 2);
  auto shapes = propagate_shapes(net);
  // shapes at the structural layers (conv/pool/parallel/fc), in order:
  const std::vector<std::vector<std::size_t>> expected = {
      {64, 112, 112}, {64, 56, 56}, {64, 56, 56}, {192, 56, 56}, {192, 28, 28},
      {224, 28, 28},  {224, 14, 14}, {224, 14, 14}, {224, 14, 14}, {224, 7, 7},
      {224, 7, 7},    {224, 1, 1},   {100},         {2}};
  std::vector<std::vector<std::size_t>> structural;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const char* kind = layer_kind_name(net.layers[li]);
    if (std::string(kind) != "relu" && std::string(kind) != "lrn")
      structural.push_back(shapes[li]);
  }
  CHECK(structural == expected);
}

TEST_CASE("variant 5 widens the parallel blocks to 256/256/256 and 512/512/512") {
  NetworkSpec net = build_dfunet(DfunetVariant::kV5, 3, 224, 224, 2);
  std::vector<std::array<std::size_t, 3>> widths;
  for (const LayerSpec& layer : net.layers)
    if (const auto* par = std::get_if<ParallelConvLayer>(&layer))
      widths.push_back({par->spec.branch1.out_channels, par->spec.branch3.out_channels,
                        par->spec.branch5.out_channels});
  REQUIRE(widths.size() == 4);
  CHECK(widths[0] == std::array<std::size_t, 3>{256, 256, 256});
  CHECK(widths[1] == std::array<std::size_t, 3>{256, 256, 256});
  CHECK(widths[2] == std::array<std::size_t, 3>{512, 512, 512});
  CHECK(widths[3] == std::array<std::size_t, 3>{512, 512, 512});
}

TEST_CASE("all named variants build and chain shapes") {
  for (DfunetVariant v : {DfunetVariant::kBase, DfunetVariant::kV1, DfunetVariant::kV2,
                          DfunetVariant::kV3, DfunetVariant::kV4, DfunetVariant::kV5}) {
    NetworkSpec net = build_dfunet(v, 3, 64, 64, 2);
    CHECK(propagate_shapes(net).back() == std::vector<std::size_t>{2});
  }
}

TEST_CASE("builder is deterministic and rejects undersized inputs") {
  NetworkSpec a = build_dfunet(DfunetVariant::kV3, 3, 64, 64, 2);
  NetworkSpec b = build_dfunet(DfunetVariant::kV3, 3, 64, 64, 2);
  CHECK(spec_to_json(a) == spec_to_json(b));
  CHECK_THROWS_AS(build_dfunet(DfunetVariant::kBase, 3, 28, 28, 2), std::invalid_argument);
  CHECK_THROWS_AS(dfunet_variant_from_string("v9"), std::invalid_argument);
}

TEST_CASE("the smallest supported input still reaches the global pool") {
  NetworkSpec net = build_dfunet(DfunetVariant::kBase, 3, 29, 29, 2);
  CHECK(propagate_shapes(net).back() == std::vector<std::size_t>{2});
}

TEST_CASE("table-style max final pool is available behind the option") {
  DfunetOptions opt;
  opt.final_pool_max = true;
  NetworkSpec net = build_dfunet(DfunetVariant::kBase, 3, 224, 224, 2, opt);
  // the layer before fc1 is a 7x7 stride-1 max pool
  const auto* pool = std::get_if<PoolLayer>(&net.layers[net.layers.size() - 4]);
  REQUIRE(pool != nullptr);
  CHECK(pool->spec.mode == PoolMode::kMax);
  CHECK(pool->spec.kernel == 7);
  CHECK(pool->spec.stride == 1);
}

TEST_CASE("lenet takes 1x28x28 grayscale and emits K logits") {
  NetworkSpec net = build_lenet(2);
  CHECK(net.input_shape == std::array<std::size_t, 3>{1, 28, 28});
  CHECK(propagate_shapes(net).back() == std::vector<std::size_t>{2});

  // zero weights and a zero image propagate to zero logits, uniform p
  Params params;
  for (const auto& [name, shape] : detail::param_shapes(net)) params.emplace(name, Tensor(shape));
  Tensor logits = forward(net, params, Tensor({1, 1, 28, 28}, 0.0));
  CHECK(logits.at2(0, 0) == 0.0);
  CHECK(logits.at2(0, 1) == 0.0);
  auto sm = softmax_cross_entropy(Tensor({2}, {logits.at2(0, 0), logits.at2(0, 1)}), 0);
  CHECK(sm.probabilities[0] == Catch::Approx(0.5));
}

TEST_CASE("a one-layer FC spec reduces to the fully_connected op") {
  NetworkSpec net;
  net.input_shape = {3, 1, 1};
  net.num_classes = 2;
  net.layers.push_back(FcLayer{"fc", 3, 2});
  validate_spec(net);
  Params params = init_params(net, 5);
  testsupport::Rng rng(41);
  Tensor x({2, 3, 1, 1});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-1, 1);

  Tensor logits = forward(net, params, x);
  Tensor flat({2, 3}, x.values());
  Tensor direct = fc_forward(flat, params.at("fc.weight"), params.at("fc.bias"));
  REQUIRE(logits.shape() == direct.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits[i] == direct[i]);
}

TEST_CASE("symbolic shape propagation matches execution layer by layer") {
  for (auto [variant, extent] :
       std::vector<std::pair<DfunetVariant, std::size_t>>{{DfunetVariant::kBase, 32},
                                                          {DfunetVariant::kV3, 48}}) {
    NetworkSpec net = build_dfunet(variant, 3, extent, extent, 2);
    Params params = init_params(net, 11);
    testsupport::Rng rng(43);
    Tensor x = rng.tensor({2, 3, extent, extent});
    CHECK(propagate_shapes(net) == executed_shapes(net, params, x));
  }
  NetworkSpec lenet = build_lenet(3);
  Params params = init_params(lenet, 13);
  testsupport::Rng rng(45);
  Tensor x = rng.tensor({2, 1, 28, 28});
  CHECK(propagate_shapes(lenet) == executed_shapes(lenet, params, x));
}

TEST_CASE("base DFUNet has the recorded parameter count") {
  NetworkSpec net = build_dfunet(DfunetVariant::kBase, 3, 224, 224, 2);
  CHECK(param_count(net) == 3438126);
}

TEST_CASE("initialization: zero biases, deterministic, fan-scaled spread") {
  NetworkSpec net = build_lenet(2);
  Params a = init_params(net, 21);
  Params b = init_params(net, 21);
  for (const auto& [name, t] : a) {
    const Tensor& u = b.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == u[i]);
    if (name.ends_with(".bias"))
      for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == 0.0);
  }

  // fc1.weight is 500 x 800 = 400k samples of U(-a, a); its mean should sit
  // within 3 standard errors of zero.
  const Tensor& w = a.at("fc1.weight");
  const double bound = std::sqrt(6.0 / (800.0 + 500.0));
  double mean = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(std::abs(w[i]) <= bound);
    mean += w[i];
  }
  mean /= static_cast<double>(w.size());
  const double se = bound / std::sqrt(3.0 * static_cast<double>(w.size()));
  CHECK(std::abs(mean) <= 3.0 * se);
}

TEST_CASE("whole-network gradients match finite differences on a reduced input") {
  NetworkSpec net = build_dfunet(DfunetVariant::kBase, 3, 32, 32, 2);
  Params params = init_params(net, 31);
  testsupport::Rng rng(33);
  Tensor x = rng.tensor({2, 3, 32, 32}, 0.0, 1.0);
  std::vector<std::size_t> labels = {0, 1};

  ForwardCache cache;
  forward(net, params, x, &cache);
  double loss = 0.0;
  Params grads = backward(net, params, cache, labels, &loss);
  REQUIRE(std::isfinite(loss));

  auto loss_of = [&](const Params& p) {
    ForwardCache c;
    Tensor logits = forward(net, p, x, &c);
    return softmax_cross_entropy_batch(logits, labels).loss;
  };

  // probe a handful of parameters spread across the depth
  const std::vector<std::string> names = {"conv1.weight", "par1.b5.weight", "par4.b3.weight",
                                          "fc1.weight", "fc2.bias"};
  for (const std::string& name : names) {
    Tensor& t = params.at(name);
    const std::size_t idx = rng.integer(t.size());
    const double h = 1e-6;
    const double orig = t[idx];
    t[idx] = orig + h;
    const double fp = loss_of(params);
    t[idx] = orig - h;
    const double fm = loss_of(params);
    t[idx] = orig;
    const double fd = (fp - fm) / (2 * h);
    INFO(name << "[" << idx << "] analytic " << grads.at(name)[idx] << " fd " << fd);
    CHECK(testsupport::relative_error(grads.at(name)[idx], fd) < 1e-4);
  }
}

TEST_CASE("forward reports the failing layer index on mismatch") {
  NetworkSpec net = build_lenet(2);
  Params params = init_params(net, 1);
  CHECK_THROWS_AS(forward(net, params, Tensor({1, 3, 28, 28})), std::invalid_argument);

  // corrupt a mid-network parameter shape
  params["conv2.weight"] = Tensor({50, 20, 3, 3});
  try {
    forward(net, params, Tensor({1, 1, 28, 28}));
    FAIL("expected a layer error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
  }
}
