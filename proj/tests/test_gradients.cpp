// Finite-difference checks: every backward pass must match central
// differences of its forward map on small random tensors (step 1e-6,
// relative error < 1e-4, 64-bit arithmetic).

#include <dfu/layers.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"

using namespace dfu;
using testsupport::Rng;

namespace {

// Scalar probe loss: weighted sum of the forward output with fixed random
// weights, so grad_out equals the weights.
double weighted_sum(const Tensor& y, const Tensor& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
  return s;
}

void check_grad(const Tensor& analytic, const std::function<double(const Tensor&)>& loss,
                const Tensor& x, double tol = 1e-4) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fd = testsupport::central_difference(loss, x, i);
    INFO("coordinate " << i << " analytic " << analytic[i] << " fd " << fd);
    CHECK(testsupport::relative_error(analytic[i], fd) < tol);
  }
}

}  // namespace

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(101);
  ConvSpec spec{2, 3, 3, 2, 1};
  Tensor x = rng.tensor({2, 2, 5, 5});
  Tensor w = rng.tensor({3, 2, 3, 3});
  Tensor b = rng.tensor({3});
  Tensor y0 = conv2d_forward(x, spec, w, b);
  Tensor gw = rng.tensor(y0.shape());

  auto g = conv2d_backward(x, spec, w, gw);

  check_grad(g.grad_input,
             [&](const Tensor& xv) { return weighted_sum(conv2d_forward(xv, spec, w, b), gw); },
             x);
  check_grad(g.grad_weights,
             [&](const Tensor& wv) { return weighted_sum(conv2d_forward(x, spec, wv, b), gw); },
             w);
  check_grad(g.grad_bias,
             [&](const Tensor& bv) { return weighted_sum(conv2d_forward(x, spec, w, bv), gw); },
             b);
}

TEST_CASE("max pool gradient matches finite differences") {
  Rng rng(103);
  PoolSpec spec{PoolMode::kMax, 3, 2, PoolRounding::kCeil};
  Tensor x = rng.tensor({2, 2, 5, 5});
  auto fwd = pool_forward(x, spec);
  Tensor gw = rng.tensor(fwd.output.shape());
  Tensor gx = pool_backward(x, spec, fwd.argmax, gw);
  // Max is piecewise linear; keep probes away from ties by construction
  // (continuous random values are almost surely tie-free).
  check_grad(gx,
             [&](const Tensor& xv) { return weighted_sum(pool_forward(xv, spec).output, gw); },
             x);
}

TEST_CASE("average pool gradient matches finite differences, partial windows included") {
  Rng rng(105);
  PoolSpec spec{PoolMode::kAverage, 3, 2, PoolRounding::kCeil};
  Tensor x = rng.tensor({1, 2, 5, 5});
  auto fwd = pool_forward(x, spec);
  Tensor gw = rng.tensor(fwd.output.shape());
  Tensor gx = pool_backward(x, spec, fwd.argmax, gw);
  check_grad(gx,
             [&](const Tensor& xv) { return weighted_sum(pool_forward(xv, spec).output, gw); },
             x);
}

TEST_CASE("relu gradient matches finite differences away from zero") {
  Rng rng(107);
  Tensor x = rng.tensor({4, 5});
  for (std::size_t i = 0; i < x.size(); ++i)
    if (std::abs(x[i]) < 1e-3) x[i] = 0.5;  // keep probes off the kink
  Tensor gw = rng.tensor({4, 5});
  Tensor gx = relu_backward(x, gw);
  check_grad(gx, [&](const Tensor& xv) { return weighted_sum(relu(xv), gw); }, x);
}

TEST_CASE("lrn gradient matches finite differences") {
  Rng rng(109);
  LrnParams p{5, 2.0, 1e-2, 0.75};  // alpha large enough to exercise the cross terms
  Tensor x = rng.tensor({2, 3, 2, 2});
  Tensor gw = rng.tensor({2, 3, 2, 2});
  Tensor gx = lrn_backward(x, p, gw);
  check_grad(gx, [&](const Tensor& xv) { return weighted_sum(lrn_forward(xv, p), gw); }, x);
}

TEST_CASE("lrn gradient with default parameters") {
  Rng rng(111);
  LrnParams p;
  Tensor x = rng.tensor({1, 7, 2, 2}, 0.5, 2.0);
  Tensor gw = rng.tensor({1, 7, 2, 2});
  Tensor gx = lrn_backward(x, p, gw);
  check_grad(gx, [&](const Tensor& xv) { return weighted_sum(lrn_forward(xv, p), gw); }, x);
}

TEST_CASE("fully connected gradients match finite differences") {
  Rng rng(113);
  Tensor x = rng.tensor({3, 4});
  Tensor w = rng.tensor({2, 4});
  Tensor b = rng.tensor({2});
  Tensor gw = rng.tensor({3, 2});
  auto g = fc_backward(x, w, gw);
  check_grad(g.grad_input, [&](const Tensor& xv) { return weighted_sum(fc_forward(xv, w, b), gw); },
             x);
  check_grad(g.grad_weights,
             [&](const Tensor& wv) { return weighted_sum(fc_forward(x, wv, b), gw); }, w);
  check_grad(g.grad_bias, [&](const Tensor& bv) { return weighted_sum(fc_forward(x, w, bv), gw); },
             b);
}

TEST_CASE("softmax cross-entropy gradient matches finite differences") {
  Rng rng(115);
  Tensor z = rng.tensor({4}, -2, 2);
  auto r = softmax_cross_entropy(z, 2);
  check_grad(r.grad_logits,
             [&](const Tensor& zv) { return softmax_cross_entropy(zv, 2).loss; }, z);
}

TEST_CASE("batch softmax gradient matches finite differences of the mean loss") {
  Rng rng(117);
  Tensor z = rng.tensor({3, 4}, -2, 2);
  std::vector<std::size_t> labels = {0, 3, 1};
  auto r = softmax_cross_entropy_batch(z, labels);
  check_grad(r.grad_logits,
             [&](const Tensor& zv) { return softmax_cross_entropy_batch(zv, labels).loss; }, z);
}

TEST_CASE("concat backward matches finite differences through both parts") {
  Rng rng(119);
  Tensor a = rng.tensor({1, 2, 3, 3});
  Tensor b = rng.tensor({1, 3, 3, 3});
  Tensor gw = rng.tensor({1, 5, 3, 3});
  auto slices = concat_channels_backward(gw, {2, 3});
  check_grad(slices[0],
             [&](const Tensor& av) { return weighted_sum(concat_channels({av, b}), gw); }, a);
  check_grad(slices[1],
             [&](const Tensor& bv) { return weighted_sum(concat_channels({a, bv}), gw); }, b);
}
