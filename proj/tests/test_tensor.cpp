#include <catch2/catch.hpp>

#include <cmath>

#include "dwmr/adam.hpp"
#include "dwmr/gradcheck.hpp"
#include "dwmr/rng.hpp"
#include "dwmr/tensor.hpp"

using namespace dwmr;

TEST_CASE("tensor construction and views") {
  auto t = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  REQUIRE(t.size() == 6);
  REQUIRE(t.shape == Shape{2, 3});

  auto r = t.reshaped({3, 2});
  REQUIRE(r.shape == Shape{3, 2});
  r.ptr()[0] = 42;  // views share storage
  REQUIRE(t.data()[0] == 42);

  auto c = t.clone();
  c.ptr()[1] = -1;
  REQUIRE(t.data()[1] == 2);

  REQUIRE_THROWS(t.reshaped({4, 2}));
  REQUIRE(Tensor<double>::full({2}, 7.0).data()[1] == 7.0);
  REQUIRE(Tensor<double>::scalar(3.5).item() == 3.5);
}

TEST_CASE("elementwise forward values") {
  Tape<double> tape;
  auto a = Tensor<double>::from({3}, {1, -2, 3});
  auto b = Tensor<double>::from({3}, {4, 5, -6});
  REQUIRE(add(tape, a, b).data() == std::vector<double>{5, 3, -3});
  REQUIRE(sub(tape, a, b).data() == std::vector<double>{-3, -7, 9});
  REQUIRE(mul(tape, a, b).data() == std::vector<double>{4, -10, -18});
  REQUIRE(scale(tape, a, 2.0).data() == std::vector<double>{2, -4, 6});
  REQUIRE(relu(tape, a).data() == std::vector<double>{1, 0, 3});
  REQUIRE(sigmoid(tape, Tensor<double>::scalar(0.0)).item() == 0.5);
}

TEST_CASE("sigmoid derivative at zero is one quarter") {
  Tape<double> tape;
  auto x = Tensor<double>::scalar(0.0);
  x.set_requires_grad(true);
  auto y = sigmoid(tape, x);
  tape.backward(y);
  REQUIRE(x.grad()[0] == Approx(0.25).epsilon(1e-12));
}

TEST_CASE("gradient of sum of squares") {
  Tape<double> tape;
  auto x = Tensor<double>::from({2}, {1, 2});
  x.set_requires_grad(true);
  auto y = sum_all(tape, mul(tape, x, x));
  tape.backward(y);
  REQUIRE(x.grad()[0] == Approx(2.0));
  REQUIRE(x.grad()[1] == Approx(4.0));
}

TEST_CASE("matmul forward oracle and gradients") {
  Tape<double> tape;
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  auto c = matmul(tape, a, b);
  REQUIRE(c.data() == std::vector<double>{19, 22, 43, 50});

  a.set_requires_grad(true);
  b.set_requires_grad(true);
  std::vector<Tensor<double>> params = {a, b};
  auto res = gradcheck<double>(params, [&](Tape<double>& t) {
    return sum_all(t, mul(t, matmul(t, a, b), matmul(t, a, b)));
  });
  REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("relu subgradient masks negatives") {
  Tape<double> tape;
  auto x = Tensor<double>::from({3}, {-1, 0.5, 2});
  x.set_requires_grad(true);
  auto y = sum_all(tape, relu(tape, x));
  tape.backward(y);
  REQUIRE(x.grad() == std::vector<double>{0, 1, 1});
}

TEST_CASE("concat_cols routes gradients to both inputs") {
  Tape<double> tape;
  auto a = Tensor<double>::from({2, 1}, {1, 2});
  auto b = Tensor<double>::from({2, 2}, {3, 4, 5, 6});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto y = concat_cols(tape, a, b);
  REQUIRE(y.shape == Shape{2, 3});
  REQUIRE(y.data() == std::vector<double>{1, 3, 4, 2, 5, 6});
  auto s = sum_all(tape, mul(tape, y, y));
  tape.backward(s);
  REQUIRE(a.grad() == std::vector<double>{2, 4});
  REQUIRE(b.grad() == std::vector<double>{6, 8, 10, 12});
}

TEST_CASE("stop_gradient blocks the backward path") {
  Tape<double> tape;
  auto x = Tensor<double>::from({2}, {1, 2});
  x.set_requires_grad(true);
  auto y = sum_all(tape, mul(tape, stop_gradient(x), x));
  tape.backward(y);
  // d/dx of sg(x)*x is sg(x) = x, not 2x
  REQUIRE(x.grad() == std::vector<double>{1, 2});
}

TEST_CASE("bce matches the closed form at one half") {
  Tape<double> tape;
  auto p = Tensor<double>::full({4}, 0.5);
  auto target = Tensor<double>::from({4}, {0, 1, 0, 1});
  auto y = bce_loss(tape, p, target);
  REQUIRE(y.item() == Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("bce never propagates into a detached target") {
  Tape<double> tape;
  auto p = Tensor<double>::from({2}, {0.3, 0.8});
  p.set_requires_grad(true);
  auto raw = Tensor<double>::from({2}, {0.0, 1.0});
  raw.set_requires_grad(true);
  auto y = bce_loss(tape, p, raw.detached());
  tape.backward(y);
  REQUIRE(p.has_grad());
  REQUIRE_FALSE(raw.has_grad());
}

TEST_CASE("mse forward and gradient") {
  Tape<double> tape;
  auto a = Tensor<double>::from({2}, {1, 3});
  auto b = Tensor<double>::from({2}, {2, 1});
  a.set_requires_grad(true);
  auto y = mse_loss(tape, a, b);
  REQUIRE(y.item() == Approx((1.0 + 4.0) / 2.0));
  tape.backward(y);
  REQUIRE(a.grad()[0] == Approx(-1.0));  // 2*(a-b)/n
  REQUIRE(a.grad()[1] == Approx(2.0));
}

TEST_CASE("softmax cross entropy oracle") {
  Tape<double> tape;
  auto logits = Tensor<double>::from({2, 2}, {0, 0, 1, 1});
  logits.set_requires_grad(true);
  auto y = softmax_ce_loss(tape, logits, {0, 1});
  REQUIRE(y.item() == Approx(std::log(2.0)).epsilon(1e-12));
  tape.backward(y);
  // grad = (softmax - onehot)/N
  REQUIRE(logits.grad()[0] == Approx((0.5 - 1.0) / 2));
  REQUIRE(logits.grad()[1] == Approx(0.5 / 2));
  REQUIRE(logits.grad()[2] == Approx(0.5 / 2));
  REQUIRE(logits.grad()[3] == Approx((0.5 - 1.0) / 2));
}

TEST_CASE("backward on a detached scalar is an error") {
  Tape<double> tape;
  auto x = Tensor<double>::scalar(1.0);
  REQUIRE_THROWS_WITH(tape.backward(x), Catch::Contains("detached"));
}

TEST_CASE("unused subgraphs replay as no-ops") {
  Tape<double> tape;
  auto x = Tensor<double>::from({2}, {1, 2});
  x.set_requires_grad(true);
  auto used = sum_all(tape, mul(tape, x, x));
  auto unused = sigmoid(tape, scale(tape, x, 3.0));
  (void)unused;
  tape.backward(used);
  REQUIRE(x.grad() == std::vector<double>{2, 4});
}

TEST_CASE("mean_all averages") {
  Tape<double> tape;
  auto x = Tensor<double>::from({4}, {1, 2, 3, 6});
  REQUIRE(mean_all(tape, x).item() == Approx(3.0));
}

TEST_CASE("adam first step follows the sign of the gradient") {
  auto p = Tensor<double>::from({2}, {1.0, -2.0});
  p.set_requires_grad(true);
  Adam<double> opt({{"p", p}}, 0.1);
  p.grad()[0] = 0.5;
  p.grad()[1] = -0.25;
  opt.step();
  // t=1: mhat=g, vhat=g^2 -> update = lr * g/(|g|+eps)
  REQUIRE(p.data()[0] == Approx(1.0 - 0.1).epsilon(1e-6));
  REQUIRE(p.data()[1] == Approx(-2.0 + 0.1).epsilon(1e-6));
  REQUIRE(opt.step_count() == 1);
}

TEST_CASE("adam skips parameters that saw no gradient") {
  auto p = Tensor<double>::from({1}, {1.0});
  auto q = Tensor<double>::from({1}, {5.0});
  p.set_requires_grad(true);
  q.set_requires_grad(true);
  Adam<double> opt({{"p", p}, {"q", q}}, 0.1);
  p.grad()[0] = 1.0;
  opt.step();
  REQUIRE(p.data()[0] != 1.0);
  REQUIRE(q.data()[0] == 5.0);  // untouched, bit-exact

  // second step with no gradients at all: nothing moves, not even moments
  opt.zero_grad();
  const double p_after = p.data()[0];
  opt.step();
  REQUIRE(p.data()[0] == p_after);
}

TEST_CASE("adam decoupled weight decay") {
  auto p = Tensor<double>::from({1}, {2.0});
  p.set_requires_grad(true);
  Adam<double> opt({{"p", p}}, 0.1, 0.01);
  p.grad()[0] = 1.0;
  opt.step();
  // update = lr*(mhat/(sqrt(vhat)+eps) + wd*p) with mhat/sqrt(vhat) ~ 1
  REQUIRE(p.data()[0] == Approx(2.0 - 0.1 * (1.0 + 0.01 * 2.0)).epsilon(1e-6));
}

TEST_CASE("adam rejects non-finite gradients") {
  auto p = Tensor<double>::from({1}, {0.0});
  p.set_requires_grad(true);
  Adam<double> opt({{"p", p}});
  p.grad()[0] = std::nan("");
  REQUIRE_THROWS_WITH(opt.step(), Catch::Contains("non-finite"));
}

TEST_CASE("composite expression matches finite differences") {
  Rng rng(7);
  auto x = Tensor<double>::zeros({4, 3});
  auto w = Tensor<double>::zeros({3, 2});
  for (auto& v : x.data()) v = rng.normal();
  for (auto& v : w.data()) v = rng.normal();
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  std::vector<Tensor<double>> params = {x, w};
  auto res = gradcheck<double>(params, [&](Tape<double>& t) {
    auto h = sigmoid(t, matmul(t, x, w));
    return mean_all(t, mul(t, h, h));
  });
  INFO(res.worst_param << "[" << res.worst_index << "]");
  REQUIRE(res.max_rel_err < 1e-6);
}
