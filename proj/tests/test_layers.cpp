#include <dfu/layers.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "test_support.hpp"

using namespace dfu;

TEST_CASE("conv reproduces the 7x7 stride-2 pad-3 geometry") {
  ConvSpec spec{3, 64, 7, 2, 3};
  Tensor x({1, 3, 224, 224}, 0.5);
  Tensor w({64, 3, 7, 7}, 0.01);
  Tensor b({64}, 0.0);
  Tensor y = conv2d_forward(x, spec, w, b);
  CHECK(y.shape() == std::vector<std::size_t>({1, 64, 112, 112}));
}

TEST_CASE("identity 1x1 conv passes the input through") {
  ConvSpec spec{1, 1, 1, 1, 0};
  testsupport::Rng rng(3);
  Tensor x = rng.tensor({2, 1, 4, 4});
  Tensor w({1, 1, 1, 1}, {1.0});
  Tensor b({1}, 0.0);
  Tensor y = conv2d_forward(x, spec, w, b);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv window sums match the hand oracle") {
  // 3x3 ramp, all-ones 2x2 kernel is not an allowed kernel size, so the
  // window-sum oracle uses a 3x3 kernel with the corner weights zeroed to
  // emulate the 2x2 sum: weights at (0,0),(0,1),(1,0),(1,1) are one.
  ConvSpec spec{1, 1, 3, 1, 1};
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w({1, 1, 3, 3}, {0, 0, 0, 0, 1, 1, 0, 1, 1});
  Tensor b({1}, 0.0);
  Tensor y = conv2d_forward(x, spec, w, b);
  REQUIRE(y.shape() == std::vector<std::size_t>({1, 1, 3, 3}));
  // interior window sums of the 2x2 blocks anchored at (0,0) and (0,1):
  CHECK(y.at4(0, 0, 0, 0) == 12.0);  // 1+2+4+5
  CHECK(y.at4(0, 0, 0, 1) == 16.0);  // 2+3+5+6
  CHECK(y.at4(0, 0, 1, 0) == 24.0);  // 4+5+7+8
  CHECK(y.at4(0, 0, 1, 1) == 28.0);  // 5+6+8+9
}

TEST_CASE("conv rejects mismatched shapes") {
  ConvSpec spec{3, 8, 3, 1, 1};
  Tensor w({8, 3, 3, 3});
  Tensor b({8});
  CHECK_THROWS_AS(conv2d_forward(Tensor({1, 2, 5, 5}), spec, w, b), std::invalid_argument);
  CHECK_THROWS_AS(conv2d_forward(Tensor({1, 3, 5, 5}), spec, Tensor({8, 3, 5, 5}), b),
                  std::invalid_argument);
  ConvSpec shrink{1, 1, 7, 1, 0};
  CHECK_THROWS_AS(conv2d_forward(Tensor({1, 1, 3, 3}), shrink, Tensor({1, 1, 7, 7}), Tensor({1})),
                  std::invalid_argument);
}

TEST_CASE("conv backward zero upstream gives zero gradients") {
  ConvSpec spec{2, 3, 3, 1, 1};
  testsupport::Rng rng(5);
  Tensor x = rng.tensor({1, 2, 4, 4});
  Tensor w = rng.tensor({3, 2, 3, 3});
  Tensor go({1, 3, 4, 4}, 0.0);
  auto g = conv2d_backward(x, spec, w, go);
  for (std::size_t i = 0; i < g.grad_input.size(); ++i) CHECK(g.grad_input[i] == 0.0);
  for (std::size_t i = 0; i < g.grad_weights.size(); ++i) CHECK(g.grad_weights[i] == 0.0);
  for (std::size_t i = 0; i < g.grad_bias.size(); ++i) CHECK(g.grad_bias[i] == 0.0);
}

TEST_CASE("identity conv routes grad_out straight to grad_input") {
  ConvSpec spec{1, 1, 1, 1, 0};
  testsupport::Rng rng(7);
  Tensor x = rng.tensor({1, 1, 3, 3});
  Tensor w({1, 1, 1, 1}, {1.0});
  Tensor go = rng.tensor({1, 1, 3, 3});
  auto g = conv2d_backward(x, spec, w, go);
  for (std::size_t i = 0; i < go.size(); ++i) CHECK(g.grad_input[i] == go[i]);
}

TEST_CASE("pooling reproduces the strided extent chain 112-56-28-14-7") {
  PoolSpec spec{PoolMode::kMax, 3, 2, PoolRounding::kCeil};
  std::size_t e = 112;
  for (std::size_t expected : {56, 28, 14, 7}) {
    e = pool_out_extent(e, spec);
    CHECK(e == expected);
  }
}

TEST_CASE("pooling a constant input is constant in either mode") {
  Tensor x({1, 2, 5, 5}, 3.25);
  for (PoolMode mode : {PoolMode::kMax, PoolMode::kAverage}) {
    PoolSpec spec{mode, 3, 2, PoolRounding::kCeil};
    auto r = pool_forward(x, spec);
    for (std::size_t i = 0; i < r.output.size(); ++i) CHECK(r.output[i] == 3.25);
  }
}

TEST_CASE("max pool on a ramp picks the window maxima") {
  Tensor x({1, 1, 4, 4},
           {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  PoolSpec spec{PoolMode::kMax, 2, 2, PoolRounding::kFloor};
  auto r = pool_forward(x, spec);
  REQUIRE(r.output.shape() == std::vector<std::size_t>({1, 1, 2, 2}));
  CHECK(r.output.at4(0, 0, 0, 0) == 6.0);
  CHECK(r.output.at4(0, 0, 0, 1) == 8.0);
  CHECK(r.output.at4(0, 0, 1, 0) == 14.0);
  CHECK(r.output.at4(0, 0, 1, 1) == 16.0);

  SECTION("backward routes to the argmax positions") {
    Tensor go({1, 1, 2, 2}, 1.0);
    Tensor gx = pool_backward(x, spec, r.argmax, go);
    for (std::size_t i = 0; i < 16; ++i) {
      const double v = x[i];
      const bool winner = v == 6.0 || v == 8.0 || v == 14.0 || v == 16.0;
      CHECK(gx[i] == (winner ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("average pool backward splits uniformly") {
  Tensor x({1, 1, 4, 4}, 1.0);
  PoolSpec spec{PoolMode::kAverage, 2, 2, PoolRounding::kFloor};
  auto r = pool_forward(x, spec);
  Tensor go({1, 1, 2, 2}, 1.0);
  Tensor gx = pool_backward(x, spec, r.argmax, go);
  for (std::size_t i = 0; i < 16; ++i) CHECK(gx[i] == 0.25);
}

TEST_CASE("pool rejects kernels larger than the input under floor rounding") {
  PoolSpec spec{PoolMode::kMax, 7, 1, PoolRounding::kFloor};
  CHECK_THROWS_AS(pool_forward(Tensor({1, 1, 3, 3}), spec), std::invalid_argument);
}

TEST_CASE("max pool backward needs a fresh argmax map") {
  Tensor x({1, 1, 4, 4}, 1.0);
  PoolSpec spec{PoolMode::kMax, 2, 2, PoolRounding::kFloor};
  Tensor go({1, 1, 2, 2}, 1.0);
  CHECK_THROWS_AS(pool_backward(x, spec, {}, go), std::invalid_argument);
}

TEST_CASE("relu thresholds at zero") {
  Tensor x({3}, {-3, 0, 2});
  Tensor y = relu(x);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.0);

  Tensor go({3}, {7, 7, 7});
  Tensor gx = relu_backward(Tensor({3}, {-1, 0, 5}), go);
  CHECK(gx[0] == 0.0);
  CHECK(gx[1] == 0.0);
  CHECK(gx[2] == 7.0);
}

TEST_CASE("lrn with alpha 0 and k 1 is the identity") {
  LrnParams p{5, 1.0, 0.0, 0.75};
  testsupport::Rng rng(9);
  Tensor x = rng.tensor({1, 4, 2, 2});
  Tensor y = lrn_forward(x, p);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == Catch::Approx(x[i]).epsilon(1e-14));
  Tensor go = rng.tensor({1, 4, 2, 2});
  Tensor gx = lrn_backward(x, p, go);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(gx[i] == Catch::Approx(go[i]).epsilon(1e-14));
}

TEST_CASE("lrn single-channel scalar case matches the closed form") {
  LrnParams p{5, 2.0, 1e-4, 0.75};
  Tensor x({1, 1, 1, 1}, {2.0});
  Tensor y = lrn_forward(x, p);
  const double expected = 2.0 * std::pow(2.0 + 1e-4 * 4.0, -0.75);
  CHECK(y[0] == Catch::Approx(expected).epsilon(1e-14));
}

TEST_CASE("lrn neighborhood clamps to the single channel") {
  LrnParams p{5, 2.0, 0.1, 0.5};
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = lrn_forward(x, p);
  for (std::size_t i = 0; i < 4; ++i) {
    const double expected = x[i] * std::pow(2.0 + 0.1 * x[i] * x[i], -0.5);
    CHECK(y[i] == Catch::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("lrn backward of zero upstream is zero") {
  LrnParams p;
  testsupport::Rng rng(13);
  Tensor x = rng.tensor({1, 6, 2, 2});
  Tensor gx = lrn_backward(x, p, Tensor({1, 6, 2, 2}, 0.0));
  for (std::size_t i = 0; i < gx.size(); ++i) CHECK(gx[i] == 0.0);
}

TEST_CASE("concat stacks 32+64+128 channels to 224") {
  std::vector<Tensor> parts = {Tensor({1, 32, 28, 28}, 1.0), Tensor({1, 64, 28, 28}, 2.0),
                               Tensor({1, 128, 28, 28}, 3.0)};
  Tensor out = concat_channels(parts);
  CHECK(out.shape() == std::vector<std::size_t>({1, 224, 28, 28}));
  CHECK(out.at4(0, 0, 0, 0) == 1.0);
  CHECK(out.at4(0, 32, 0, 0) == 2.0);
  CHECK(out.at4(0, 96, 0, 0) == 3.0);
}

TEST_CASE("concat of a single part is the identity") {
  testsupport::Rng rng(15);
  Tensor x = rng.tensor({2, 3, 4, 4});
  Tensor out = concat_channels({x});
  REQUIRE(out.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(out[i] == x[i]);
}

TEST_CASE("concat backward slices the gradient per part") {
  Tensor a({1, 1, 1, 1}, {2.0});
  Tensor b({1, 1, 1, 1}, {5.0});
  Tensor joined = concat_channels({a, b});
  CHECK(joined.at4(0, 0, 0, 0) == 2.0);
  CHECK(joined.at4(0, 1, 0, 0) == 5.0);

  Tensor go({1, 2, 1, 1}, {10.0, 20.0});
  auto slices = concat_channels_backward(go, {1, 1});
  REQUIRE(slices.size() == 2);
  CHECK(slices[0][0] == 10.0);
  CHECK(slices[1][0] == 20.0);

  SECTION("re-concatenation of the slices reproduces grad_out") {
    Tensor back = concat_channels({slices[0], slices[1]});
    for (std::size_t i = 0; i < go.size(); ++i) CHECK(back[i] == go[i]);
  }
}

TEST_CASE("concat rejects mismatched spatial extents") {
  CHECK_THROWS_AS(concat_channels({Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3})}),
                  std::invalid_argument);
}

TEST_CASE("fully connected identity and hand oracle") {
  FcSpec eye{2, 2, Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}, 0.0)};
  Tensor x({2}, {4.0, -1.5});
  Tensor y = fully_connected(x, eye);
  CHECK(y[0] == 4.0);
  CHECK(y[1] == -1.5);

  FcSpec spec{2, 2, Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2}, 0.0)};
  Tensor z = fully_connected(Tensor({2}, {1, 1}), spec);
  CHECK(z[0] == 3.0);
  CHECK(z[1] == 7.0);

  CHECK_THROWS_AS(fully_connected(Tensor({3}), spec), std::invalid_argument);
}

TEST_CASE("fc chain 224 -> 100 -> 2 produces the declared widths") {
  testsupport::Rng rng(17);
  Tensor x = rng.tensor({224});
  FcSpec fc1{224, 100, rng.tensor({100, 224}), Tensor({100}, 0.0)};
  FcSpec fc2{100, 2, rng.tensor({2, 100}), Tensor({2}, 0.0)};
  Tensor h = fully_connected(x, fc1);
  REQUIRE(h.extent(0) == 100);
  Tensor out = fully_connected(h, fc2);
  CHECK(out.extent(0) == 2);
}

TEST_CASE("softmax on equal logits is uniform with loss ln 2") {
  auto r = softmax_cross_entropy(Tensor({2}, {0.0, 0.0}), 0);
  CHECK(r.probabilities[0] == Catch::Approx(0.5).epsilon(1e-14));
  CHECK(r.probabilities[1] == Catch::Approx(0.5).epsilon(1e-14));
  CHECK(r.loss == Catch::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("softmax is shift invariant") {
  testsupport::Rng rng(19);
  for (int t = 0; t < 10; ++t) {
    Tensor z = rng.tensor({4}, -5, 5);
    const double c = rng.uniform(-100, 100);
    Tensor zc = z;
    for (std::size_t i = 0; i < 4; ++i) zc[i] += c;
    auto a = softmax_cross_entropy(z, 1);
    auto b = softmax_cross_entropy(zc, 1);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(a.probabilities[i] == Catch::Approx(b.probabilities[i]).margin(1e-12));
  }
}

TEST_CASE("softmax scalar oracle") {
  auto r = softmax_cross_entropy(Tensor({2}, {1.0, 0.0}), 0);
  const double e = std::exp(1.0);
  CHECK(r.probabilities[0] == Catch::Approx(e / (e + 1.0)).epsilon(1e-12));
  CHECK(r.probabilities[0] == Catch::Approx(0.73106).margin(1e-5));
  CHECK(r.loss == Catch::Approx(0.31326).margin(1e-5));
  CHECK(r.grad_logits[0] == Catch::Approx(e / (e + 1.0) - 1.0).epsilon(1e-12));
}

TEST_CASE("softmax rejects out-of-range labels") {
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor({2}, {0.0, 0.0}), 2), std::invalid_argument);
}

TEST_CASE("softmax outputs are a probability vector") {
  testsupport::Rng rng(21);
  for (int t = 0; t < 25; ++t) {
    Tensor z = rng.tensor({5}, -30, 30);
    auto r = softmax_cross_entropy(z, 0);
    double sum = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(r.probabilities[i] >= 0.0);
      CHECK(r.probabilities[i] <= 1.0);
      sum += r.probabilities[i];
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("stride-1 odd-kernel conv with pad (k-1)/2 preserves extent") {
  testsupport::Rng rng(23);
  for (std::size_t k : {1, 3, 5, 7}) {
    ConvSpec spec{2, 3, k, 1, (k - 1) / 2};
    Tensor x = rng.tensor({1, 2, 9, 9});
    Tensor w = rng.tensor({3, 2, k, k});
    Tensor y = conv2d_forward(x, spec, w, Tensor({3}, 0.0));
    CHECK(y.extent(2) == 9);
    CHECK(y.extent(3) == 9);
  }
}
