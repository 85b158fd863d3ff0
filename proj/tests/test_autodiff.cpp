#include <functional>

#include "doctest.h"
#include "test_helpers.hpp"
#include "vseg/autodiff.hpp"
#include "vseg/nn.hpp"

using namespace vseg;
using namespace vseg::ad;
using vseg::testing::fd_check;
using vseg::testing::random_tensor;

namespace {

// Runs fd_check on builder(x) where builder returns a scalar Var on a fresh tape.
double check_grad(const std::function<Var<double>(Tape<double>&, Var<double>)>& builder,
                  const Tensor<double>& x0, double h = 1e-5) {
  Tape<double> tape;
  Var<double> x = tape.input(x0);
  Var<double> y = builder(tape, x);
  tape.backward(y);
  const Tensor<double> analytic = tape.grad_of(x);
  auto f = [&](const Tensor<double>& xv) {
    Tape<double> t2;
    Var<double> x2 = t2.input(xv);
    return builder(t2, x2).value()[0];
  };
  return fd_check(f, x0, analytic, h);
}

}  // namespace

TEST_CASE("gradients: elementwise and reductions") {
  Rng rng(11);
  auto x0 = random_tensor<double>({1, 2, 2, 2, 3}, rng, -2.0, 2.0);
  CHECK(check_grad([](Tape<double>&, Var<double> x) { return sum_all(leaky_relu(x, 0.2)); }, x0) <
        1e-6);
  CHECK(check_grad([](Tape<double>&, Var<double> x) { return sum_all(sigmoid(x)); }, x0) < 1e-6);
  const auto wts = random_tensor<double>(x0.shape(), rng);
  CHECK(check_grad(
            [&](Tape<double>& t, Var<double> x) {
              return sum_all(mul(softmax_channels(scale(x, 2.0)), t.constant(wts)));
            },
            x0) < 1e-5);
  // relu at nudged inputs (avoid the kink)
  for (int64_t i = 0; i < x0.size(); ++i)
    if (std::abs(x0[i]) < 1e-3) x0[i] = 0.5;
  CHECK(check_grad([](Tape<double>&, Var<double> x) { return sum_all(relu(x)); }, x0) < 1e-6);
}

TEST_CASE("gradients: conv3d w.r.t. input, weights and bias") {
  Rng rng(12);
  auto x0 = random_tensor<double>({1, 3, 4, 4, 2}, rng);
  auto w0 = random_tensor<double>({3, 3, 3, 2, 3}, rng);
  auto b0 = random_tensor<double>({3}, rng);

  // w.r.t. input
  CHECK(check_grad(
            [&](Tape<double>& t, Var<double> x) {
              return sum_all(sigmoid(conv3d(x, t.constant(w0), t.constant(b0), 1, 1)));
            },
            x0) < 1e-5);

  // w.r.t. weights
  {
    Tape<double> tape;
    Var<double> w = tape.input(w0);
    Var<double> y = sum_all(sigmoid(conv3d(tape.constant(x0), w, tape.constant(b0), 1, 1)));
    tape.backward(y);
    auto analytic = tape.grad_of(w);
    auto f = [&](const Tensor<double>& wv) {
      Tape<double> t2;
      return sum_all(sigmoid(conv3d(t2.constant(x0), t2.input(wv), t2.constant(b0), 1, 1)))
          .value()[0];
    };
    CHECK(fd_check(f, w0, analytic) < 1e-5);
  }

  // stride-2 k=4 path (discriminator blocks)
  auto x1 = random_tensor<double>({1, 4, 4, 4, 2}, rng);
  auto w1 = random_tensor<double>({4, 4, 4, 2, 2}, rng);
  CHECK(check_grad(
            [&](Tape<double>& t, Var<double> x) {
              return sum_all(sigmoid(conv3d(x, t.constant(w1), Var<double>{}, 2, 1)));
            },
            x1) < 1e-5);
}

TEST_CASE("gradients: pooling, upsampling, norm, concat, products") {
  Rng rng(13);
  auto x0 = random_tensor<double>({1, 4, 4, 4, 2}, rng, 0.1, 1.0);

  CHECK(check_grad([](Tape<double>&, Var<double> x) { return sum_all(avgpool3d(x, {2, 2, 2})); },
                   x0) < 1e-6);
  CHECK(check_grad(
            [](Tape<double>&, Var<double> x) {
              return sum_all(sigmoid(upsample3d(x, {2, 2, 2})));
            },
            x0) < 1e-6);
  CHECK(check_grad([](Tape<double>&, Var<double> x) { return sum_all(maxpool3d(x, 3, 2, 1)); },
                   x0) < 1e-5);

  // instance norm with affine params
  auto g0 = random_tensor<double>({2}, rng, 0.5, 1.5);
  auto b0 = random_tensor<double>({2}, rng);
  CHECK(check_grad(
            [&](Tape<double>& t, Var<double> x) {
              return sum_all(sigmoid(instance_norm(x, t.constant(g0), t.constant(b0), 1e-5)));
            },
            x0, 1e-6) < 1e-4);

  // concat + linear_comb
  const auto other0 = random_tensor<double>({1, 4, 4, 4, 3}, rng);
  CHECK(check_grad(
            [&](Tape<double>& t, Var<double> x) {
              return sum_all(sigmoid(concat_channels(x, t.constant(other0))));
            },
            x0) < 1e-6);
  CHECK(check_grad(
            [](Tape<double>&, Var<double> x) {
              return sum_all(linear_comb(0.3, x, 0.7, scale(x, 2.0)));
            },
            x0) < 1e-6);

  // channel_scale both directions
  auto x1 = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.2, 0.9);
  auto y1 = random_tensor<double>({1, 2, 2, 2, 4}, rng);
  CHECK(check_grad(
            [&](Tape<double>& t, Var<double> x) {
              return sum_all(sigmoid(channel_scale(x, t.constant(y1))));
            },
            x1) < 1e-6);
  CHECK(check_grad(
            [&](Tape<double>& t, Var<double> y) {
              return sum_all(sigmoid(channel_scale(t.constant(x1), y)));
            },
            y1) < 1e-6);
}

TEST_CASE("detach cuts gradient flow") {
  Rng rng(14);
  auto x0 = random_tensor<double>({1, 2, 2, 2, 2}, rng);
  Tape<double> tape;
  Var<double> x = tape.input(x0);
  Var<double> y = sum_all(detach(scale(x, 3.0)));
  tape.backward(y);
  auto g = tape.grad_of(x);
  for (int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("straight-through one-hot: hard forward, identity backward") {
  Rng rng(15);
  auto p0 = random_tensor<double>({1, 2, 2, 2, 4}, rng, 0.05, 1.0);
  Tape<double> tape;
  Var<double> p = tape.input(p0);
  Var<double> st = straight_through_onehot(p);
  // forward is exactly the hard one-hot of the argmax
  const auto labels = argmax_channels(p0);
  const auto hard = onehot_channels<double>(labels, 4);
  CHECK(vseg::testing::max_abs_diff(st.value(), hard) == 0.0);
  // backward: gradient of sum(st * c) w.r.t. p equals c (identity pass-through)
  auto c0 = random_tensor<double>({1, 2, 2, 2, 4}, rng);
  Var<double> y = sum_all(channel_scale(tape.constant(Tensor<double>({1, 2, 2, 2, 1}, 1.0)),
                                        linear_comb(1.0, st, 0.0, st)));
  tape.backward(y);
  auto g = tape.grad_of(p);
  for (int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 1.0);
}

TEST_CASE("frozen params receive no gradient but pass it through") {
  Rng rng(16);
  nn::ParamSet<double> ps;
  auto& w = ps.create("w", {1, 1, 1, 2, 2});
  for (int64_t i = 0; i < w.value.size(); ++i) w.value[i] = rng.normal();
  w.trainable = false;

  auto x0 = random_tensor<double>({1, 2, 2, 2, 2}, rng);
  Tape<double> tape;
  Var<double> x = tape.input(x0);
  Var<double> y = sum_all(sigmoid(conv3d(x, tape.param(w), Var<double>{}, 1, 0)));
  tape.backward(y);
  // input still gets a gradient
  auto gx = tape.grad_of(x);
  double nrm = 0;
  for (int64_t i = 0; i < gx.size(); ++i) nrm += std::abs(gx[i]);
  CHECK(nrm > 0.0);
  // frozen weight accumulates nothing
  for (int64_t i = 0; i < w.grad.size(); ++i) CHECK(w.grad[i] == 0.0);
}

TEST_CASE("adam step moves parameters against the gradient") {
  nn::ParamSet<double> ps;
  auto& p = ps.create("p", {4});
  p.value.fill(1.0);
  p.grad.fill(0.5);
  nn::Adam<double> opt(ps.all());
  opt.step(0.1);
  for (int64_t i = 0; i < 4; ++i) CHECK(p.value[i] < 1.0);
  CHECK(opt.iterations() == 1);
}
