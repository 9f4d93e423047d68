#include <dfu/svm.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "qp_oracle.hpp"
#include "test_support.hpp"

using namespace dfu;
namespace fs = std::filesystem;

TEST_CASE("two opposite points on a line split the margin at alpha one half") {
  const std::vector<std::vector<double>> x = {{-1.0}, {1.0}};
  const std::vector<int> y = {-1, 1};
  SmoOptions opts;
  opts.tol = 1e-9;
  SvmModel model = smo_train(x, y, 10.0, KernelSpec{}, opts);

  REQUIRE(model.coefficients.size() == 2);
  CHECK(model.coefficients[0] == Catch::Approx(-0.5).margin(1e-6));
  CHECK(model.coefficients[1] == Catch::Approx(0.5).margin(1e-6));
  CHECK(model.bias == Catch::Approx(0.0).margin(1e-6));

  // f(x) = x on this model
  CHECK(svm_decision(model, {0.5}) == Catch::Approx(0.5).margin(1e-6));
  CHECK(svm_predict(model, {0.5}) == 1);

  SECTION("free support vectors sit on their margins") {
    CHECK(-1.0 * svm_decision(model, {-1.0}) == Catch::Approx(1.0).margin(1e-6));
    CHECK(1.0 * svm_decision(model, {1.0}) == Catch::Approx(1.0).margin(1e-6));
  }

  SECTION("the dual objective matches the closed form 2a - 2a^2 at a = 1/2") {
    CHECK(svm_dual_objective(model) == Catch::Approx(0.5).margin(1e-9));
  }
}

TEST_CASE("single-class input is rejected") {
  CHECK_THROWS_AS(smo_train({{0.0}, {1.0}}, {1, 1}, 1.0, KernelSpec{}), std::invalid_argument);
  CHECK_THROWS_AS(smo_train({{0.0}}, {1, -1}, 1.0, KernelSpec{}), std::invalid_argument);
  CHECK_THROWS_AS(smo_train({{0.0}, {1.0}}, {1, -1}, 0.0, KernelSpec{}), std::invalid_argument);
  CHECK_THROWS_AS(
      smo_train({{std::numeric_limits<double>::quiet_NaN()}, {1.0}}, {1, -1}, 1.0, KernelSpec{}),
      std::invalid_argument);
}

TEST_CASE("rbf SMO separates XOR") {
  const std::vector<std::vector<double>> x = {{0, 0}, {1, 1}, {0, 1}, {1, 0}};
  const std::vector<int> y = {1, 1, -1, -1};
  KernelSpec rbf{KernelKind::kRbf, 1.0};
  SmoOptions opts;
  opts.tol = 1e-6;
  SvmModel model = smo_train(x, y, 10.0, rbf, opts);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(svm_predict(model, x[i]) == y[i]);
}

TEST_CASE("SMO matches the dense QP oracle on random small problems") {
  testsupport::Rng rng(97);
  std::size_t checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng.integer(5);
    const std::size_t d = 1 + rng.integer(3);
    std::vector<std::vector<double>> x(n, std::vector<double>(d));
    std::vector<int> y(n);
    bool pos = false, neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) x[i][j] = rng.uniform(-1, 1);
      y[i] = rng.uniform() < 0.5 ? -1 : 1;
      (y[i] == 1 ? pos : neg) = true;
    }
    if (!pos || !neg) continue;
    const double c = std::vector<double>{0.5, 1.0, 10.0}[rng.integer(3)];
    KernelSpec kernel;
    if (trial % 2 == 1) kernel = {KernelKind::kRbf, rng.uniform(0.3, 2.0)};

    SmoOptions opts;
    opts.tol = 1e-7;
    opts.max_passes = 1000;
    SvmModel model = smo_train(x, y, c, kernel, opts);

    // the oracle solves the same standardized problem
    std::vector<std::vector<double>> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = model.scaler.transform(x[i]);
    auto oracle = qporacle::qp_dual_solve(z, y, c, kernel);

    CHECK(std::abs(svm_dual_objective(model) - oracle.objective) < 1e-6);

    double sum_ay = 0.0;
    for (double coeff : model.coefficients) {
      sum_ay += coeff;
      CHECK(std::abs(coeff) <= c + 1e-8);
    }
    CHECK(std::abs(sum_ay) <= 1e-8);

    for (std::size_t i = 0; i < n; ++i)
      CHECK(svm_predict(model, x[i]) == qporacle::qp_predict(oracle, z, y, kernel, z[i]));
    ++checked;
  }
  CHECK(checked >= 30);
}

TEST_CASE("scaling features and gamma inversely leaves rbf predictions unchanged") {
  testsupport::Rng rng(99);
  const std::size_t n = 12, d = 2;
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x[i][j] = rng.uniform(-1, 1);
    y[i] = i % 2 == 0 ? 1 : -1;
  }
  const double s = 3.7;
  std::vector<std::vector<double>> xs = x;
  for (auto& row : xs)
    for (double& v : row) v *= s;

  SmoOptions opts;
  opts.standardize = false;
  opts.tol = 1e-7;
  SvmModel a = smo_train(x, y, 5.0, KernelSpec{KernelKind::kRbf, 1.2}, opts);
  SvmModel b = smo_train(xs, y, 5.0, KernelSpec{KernelKind::kRbf, 1.2 / (s * s)}, opts);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> probe = x[i];
    std::vector<double> probe_s = xs[i];
    CHECK(svm_predict(a, probe) == svm_predict(b, probe_s));
    CHECK(svm_decision(a, probe) == Catch::Approx(svm_decision(b, probe_s)).margin(1e-9));
  }
}

TEST_CASE("training is deterministic") {
  testsupport::Rng rng(101);
  std::vector<std::vector<double>> x(8, std::vector<double>(2));
  std::vector<int> y(8);
  for (std::size_t i = 0; i < 8; ++i) {
    x[i] = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
    y[i] = i < 4 ? 1 : -1;
  }
  SvmModel a = smo_train(x, y, 1.0, KernelSpec{});
  SvmModel b = smo_train(x, y, 1.0, KernelSpec{});
  CHECK(svm_model_to_json(a) == svm_model_to_json(b));
}

TEST_CASE("svm model JSON round trips") {
  SvmModel model = smo_train({{-1.0}, {1.0}}, {-1, 1}, 10.0, KernelSpec{});
  const fs::path tmp = fs::temp_directory_path() / "dfu_svm_test.json";
  save_svm_model(tmp.string(), model, {{"which", "lbp"}});
  nlohmann::json extra;
  SvmModel back = load_svm_model(tmp.string(), &extra);
  CHECK(extra.at("which") == "lbp");
  CHECK(svm_model_to_json(back, {{"which", "lbp"}}) == svm_model_to_json(model, {{"which", "lbp"}}));
  fs::remove(tmp);
}

TEST_CASE("decision rejects dimension mismatches") {
  SvmModel model = smo_train({{-1.0}, {1.0}}, {-1, 1}, 1.0, KernelSpec{});
  CHECK_THROWS_AS(svm_decision(model, {1.0, 2.0}), std::invalid_argument);
}
