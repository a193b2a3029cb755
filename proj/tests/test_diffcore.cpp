#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "soiltdm/diffcore.hpp"

using namespace soiltdm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Seeds are advanced until every pre-activation in the batch sits clear of
// the ReLU kink, so central differences with h = 1e-5 stay valid.
bool preactivation_margin_ok(const Mlp& net, const MatrixXd& x, double margin) {
  MatrixXd h = x;
  for (int l = 0; l < net.num_layers(); ++l) {
    MatrixXd z = (net.weight(l) * h).colwise() + net.bias(l);
    if (l + 1 < net.num_layers()) {
      if (z.cwiseAbs().minCoeff() < margin) return false;
      h = z.cwiseMax(0.0);
    }
  }
  return true;
}

}  // namespace

TEST_CASE("forward: zero-initialized net maps any input to zero") {
  Mlp net({3, 5, 2}, Activation::kRelu);
  Rng rng(7);
  const MatrixXd x = rng.normal_matrix(3, 4);
  CHECK(net.forward(x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward: identity single linear layer returns its input") {
  Mlp net({2, 2}, Activation::kRelu);
  net.weight(0).setIdentity();
  net.bias(0).setZero();
  VectorXd x(2);
  x << 1.25, -3.5;
  const MatrixXd y = net.forward(x);
  CHECK(y(0, 0) == doctest::Approx(1.25).epsilon(1e-15));
  CHECK(y(1, 0) == doctest::Approx(-3.5).epsilon(1e-15));
}

TEST_CASE("forward: 2-2-1 net with hand-set weights matches hand computation") {
  Mlp net({2, 2, 1}, Activation::kRelu);
  net.weight(0) << 0.5, -0.25, 0.75, 1.0;
  net.bias(0) << 0.1, -0.2;
  net.weight(1) << 2.0, -1.0;
  net.bias(1) << 0.05;
  VectorXd x(2);
  x << 1.0, 1.0;
  // hidden = relu([0.5-0.25+0.1, 0.75+1.0-0.2]) = [0.35, 1.55]
  // out = 2*0.35 - 1.55 + 0.05 = -0.8
  CHECK(net.forward(x)(0, 0) == doctest::Approx(-0.8).epsilon(1e-12));
}

TEST_CASE("forward: dimension mismatch raises a shape error") {
  Mlp net({3, 2}, Activation::kRelu);
  CHECK_THROWS_AS(net.forward(MatrixXd::Zero(4, 1)), ShapeError);
}

TEST_CASE("gradients: half squared norm on a linear net gives input-times-output") {
  Rng rng(11);
  Mlp net({3, 2}, Activation::kRelu);
  net.init_fan_in(rng);
  const VectorXd x = rng.normal_vector(3);
  const double loss = scalar_loss_gradient(net, x, [](const MatrixXd& out) {
    return ScalarLoss{0.5 * out.squaredNorm(), out};
  });
  const VectorXd y = net.forward(x);
  CHECK(loss == doctest::Approx(0.5 * y.squaredNorm()));
  // dL/dW = y x^T, dL/db = y
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 3; ++c) {
      CHECK(net.grad()[r + c * 2] == doctest::Approx(y[r] * x[c]).epsilon(1e-12));
    }
    CHECK(net.grad()[6 + r] == doctest::Approx(y[r]).epsilon(1e-12));
  }
}

TEST_CASE("gradients: constant loss gives zero gradient") {
  Rng rng(3);
  Mlp net({4, 6, 3}, Activation::kTanh);
  net.init_fan_in(rng);
  scalar_loss_gradient(net, rng.normal_matrix(4, 5), [](const MatrixXd& out) {
    return ScalarLoss{2.5, MatrixXd::Zero(out.rows(), out.cols())};
  });
  CHECK(net.grad().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradients: non-finite loss raises a numeric error") {
  Rng rng(5);
  Mlp net({2, 2}, Activation::kRelu);
  net.init_fan_in(rng);
  CHECK_THROWS_AS(
      scalar_loss_gradient(net, MatrixXd::Zero(2, 1),
                           [](const MatrixXd& out) {
                             return ScalarLoss{
                                 std::numeric_limits<double>::quiet_NaN(),
                                 MatrixXd::Zero(out.rows(), out.cols())};
                           }),
      NumericError);
}

TEST_CASE("gradients: random small nets match central finite differences") {
  const std::vector<std::pair<std::vector<int>, Activation>> shapes = {
      {{3, 8, 8, 2}, Activation::kRelu},
      {{4, 6, 1}, Activation::kLeakyRelu},
      {{2, 5, 5, 4}, Activation::kTanh},
  };
  for (const auto& [widths, act] : shapes) {
    Mlp net(widths, act);
    MatrixXd x;
    for (std::uint64_t seed = 17;; ++seed) {
      Rng rng(seed);
      net.init_fan_in(rng);
      x = rng.normal_matrix(widths.front(), 3);
      if (act == Activation::kTanh || preactivation_margin_ok(net, x, 1e-3)) break;
    }
    MatrixXd target = MatrixXd::Constant(widths.back(), 3, 0.3);
    auto loss_fn = [&](const MatrixXd& out) {
      return ScalarLoss{0.5 * (out - target).squaredNorm(), out - target};
    };
    const double base = scalar_loss_gradient(net, x, loss_fn);
    CHECK(std::isfinite(base));
    const VectorXd analytic = net.grad();
    Mlp probe = net;
    const VectorXd numeric = finite_difference_gradient(
        [&](const VectorXd& p) {
          probe.params() = p;
          return 0.5 * (probe.forward(x) - target).squaredNorm();
        },
        net.params(), 1e-5);
    CHECK(gradient_rel_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("adam: zero gradient leaves fresh parameters unchanged") {
  AdamState st(3, 0.01);
  VectorXd p(3);
  p << 1.0, 2.0, 3.0;
  const VectorXd p0 = p;
  const VectorXd g = VectorXd::Zero(3);
  for (int i = 0; i < 50; ++i) adam_step(st, p, g);
  CHECK(p == p0);
  CHECK(st.step_count == 50);
}

TEST_CASE("adam: moments decay toward zero once gradients stop") {
  AdamState st(2, 0.01);
  VectorXd p = VectorXd::Ones(2);
  VectorXd g(2);
  g << 2.0, -1.0;
  adam_step(st, p, g);
  const double m0 = st.first_moment.cwiseAbs().maxCoeff();
  const double v0 = st.second_moment.cwiseAbs().maxCoeff();
  const VectorXd zero = VectorXd::Zero(2);
  for (int i = 0; i < 300; ++i) adam_step(st, p, zero);
  CHECK(st.first_moment.cwiseAbs().maxCoeff() < 1e-8 * m0);
  CHECK(st.second_moment.cwiseAbs().maxCoeff() < v0);
}

TEST_CASE("adam: first step matches the bias-corrected update by hand") {
  AdamState st(1, 0.1);
  VectorXd p(1);
  p << 1.0;
  VectorXd g(1);
  g << 0.5;
  adam_step(st, p, g);
  // m=0.05, v=0.00025, mhat=0.5, vhat=0.25
  const double expected = 1.0 - 0.1 * 0.5 / (std::sqrt(0.25) + 1e-8);
  CHECK(p[0] == doctest::Approx(expected).epsilon(1e-14));
  CHECK(st.step_count == 1);
}

TEST_CASE("adam: constant gradient drives a monotone descent") {
  AdamState st(1, 0.05);
  VectorXd p(1);
  p << 4.0;
  VectorXd g(1);
  g << 1.0;
  double prev = p[0];
  for (int i = 0; i < 100; ++i) {
    adam_step(st, p, g);
    CHECK(p[0] < prev);
    prev = p[0];
  }
}

TEST_CASE("adam: NaN gradient raises a numeric error") {
  AdamState st(2, 0.1);
  VectorXd p = VectorXd::Ones(2);
  VectorXd g(2);
  g << 1.0, std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(adam_step(st, p, g), NumericError);
}

TEST_CASE("determinism: same seed gives bit-identical init, forward, gradient") {
  auto build = [] {
    Rng rng(123);
    Mlp net({4, 16, 16, 3}, Activation::kLeakyRelu);
    net.init_fan_in(rng);
    return net;
  };
  Mlp a = build();
  Mlp b = build();
  CHECK(a.params() == b.params());
  Rng rx(9);
  const MatrixXd x = rx.normal_matrix(4, 7);
  CHECK(a.forward(x) == b.forward(x));
  auto loss_fn = [](const MatrixXd& out) {
    return ScalarLoss{0.5 * out.squaredNorm(), out};
  };
  scalar_loss_gradient(a, x, loss_fn);
  scalar_loss_gradient(b, x, loss_fn);
  CHECK(a.grad() == b.grad());
}

TEST_CASE("parameter count follows the layer widths") {
  Mlp net({3, 7, 2}, Activation::kRelu);
  CHECK(net.parameter_count() == 3 * 7 + 7 + 7 * 2 + 2);
}
