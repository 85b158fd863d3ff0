#include <cmath>

#include "doctest.h"
#include "test_helpers.hpp"
#include "vseg/disc.hpp"
#include "vseg/kernels.hpp"
#include "vseg/losses.hpp"

using namespace vseg;
using namespace vseg::disc;
using ad::Tape;
using ad::Var;
using vseg::testing::max_abs_diff;
using vseg::testing::random_tensor;

namespace {

DiscConfig desk_cfg() {
  DiscConfig cfg;
  cfg.in_depth = 16;
  cfg.in_height = 32;
  cfg.in_width = 32;
  cfg.base_channels = 8;
  cfg.init_seed = 21;
  return cfg;
}

template <typename T>
Tensor<T> random_probs(std::vector<int64_t> shape, Rng& rng) {
  auto logits = random_tensor<T>(shape, rng, -2.0, 2.0);
  Tensor<T> probs(shape);
  kernels::softmax_channels_forward(logits, probs);
  return probs;
}

}  // namespace

TEST_CASE("make_disc_input: unit image, uniform labels, mode semantics") {
  Rng rng(30);

  // ground-truth one-hot with constant x = 1 reproduces the one-hot map
  {
    Tape<float> tape;
    Tensor<float> x({1, 2, 2, 2, 1}, 1.0f);
    Tensor<uint8_t> labels({1, 2, 2, 2});
    for (int64_t i = 0; i < 8; ++i) labels[i] = uint8_t(rng.uniform_int(4));
    auto onehot = ad::onehot_channels<float>(labels, 4);
    auto inp = make_disc_input(tape.constant(x), tape.constant(onehot), DiscInputMode::kHard);
    CHECK(max_abs_diff(inp.value(), onehot) == 0.0);
  }

  // uniform soft labels: every channel equals x / C
  {
    Tape<float> tape;
    auto x = random_tensor<float>({1, 2, 2, 2, 1}, rng, 0.0, 1.0);
    Tensor<float> uni({1, 2, 2, 2, 4}, 0.25f);
    auto inp = make_disc_input(tape.constant(x), tape.constant(uni), DiscInputMode::kSoft);
    for (int64_t r = 0; r < 8; ++r)
      for (int64_t c = 0; c < 4; ++c)
        CHECK(inp.value()[r * 4 + c] == doctest::Approx(x[r] / 4.0f));
  }

  // unnormalized intensity rejected
  {
    Tape<float> tape;
    Tensor<float> x({1, 2, 2, 2, 1}, 4.0f);
    Tensor<float> p({1, 2, 2, 2, 4}, 0.25f);
    CHECK_THROWS_AS(make_disc_input(tape.constant(x), tape.constant(p), DiscInputMode::kSoft),
                    InvalidArgument);
  }
}

TEST_CASE("straight-through: forward equals hard exactly, gradient follows soft path") {
  Rng rng(31);
  auto x0 = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.1, 0.9);
  auto p0 = random_probs<double>({1, 2, 2, 2, 4}, rng);

  // forward equality with hard mode on arbitrary soft inputs
  {
    Tape<double> tape;
    auto st =
        make_disc_input(tape.constant(x0), tape.input(p0), DiscInputMode::kStraightThrough);
    auto hard = make_disc_input(tape.constant(x0), tape.constant(p0), DiscInputMode::kHard);
    CHECK(max_abs_diff(st.value(), hard.value()) == 0.0);
  }

  // on exactly one-hot probabilities the hard product equals the soft product,
  // so the straight-through gradient must equal the soft gradient exactly;
  // verify the shared value by finite differences on the soft path.
  auto labels = ad::argmax_channels(p0);
  auto onehot = ad::onehot_channels<double>(labels, 4);
  auto downstream = random_tensor<double>({1, 2, 2, 2, 4}, rng);

  auto loss_with = [&](DiscInputMode mode, const Tensor<double>& probs, Tape<double>& tape,
                       Var<double>& pvar) {
    pvar = tape.input(probs);
    auto inp = make_disc_input(tape.constant(x0), pvar, mode);
    return ad::sum_all(ad::mul(ad::sigmoid(inp), tape.constant(downstream)));
  };

  Tape<double> t_st, t_soft;
  Var<double> p_st, p_soft;
  auto l_st = loss_with(DiscInputMode::kStraightThrough, onehot, t_st, p_st);
  auto l_soft = loss_with(DiscInputMode::kSoft, onehot, t_soft, p_soft);
  t_st.backward(l_st);
  t_soft.backward(l_soft);
  const auto g_st = t_st.grad_of(p_st);
  const auto g_soft = t_soft.grad_of(p_soft);
  CHECK(max_abs_diff(g_st, g_soft) == 0.0);

  auto f = [&](const Tensor<double>& pv) {
    Tape<double> t2;
    Var<double> pvar;
    return loss_with(DiscInputMode::kSoft, pv, t2, pvar).value()[0];
  };
  CHECK(vseg::testing::fd_check(f, onehot, g_soft, 1e-6) < 1e-6);

  // hard mode passes no gradient into the labels
  Tape<double> t_h;
  Var<double> p_h;
  auto l_h = loss_with(DiscInputMode::kHard, p0, t_h, p_h);
  t_h.backward(l_h);
  const auto g_h = t_h.grad_of(p_h);
  for (int64_t i = 0; i < g_h.size(); ++i) CHECK(g_h[i] == 0.0);
}

TEST_CASE("discnet: shape contract, range, determinism, batch independence") {
  DiscNet<float> net(desk_cfg());
  Rng rng(32);
  auto inp = random_tensor<float>({2, 16, 32, 32, 6}, rng, 0.0, 1.0);

  Tape<float> tape;
  auto conf = net.forward(tape, tape.constant(inp));
  CHECK(conf.value().shape() == std::vector<int64_t>{2, 16, 32, 32, 1});
  for (int64_t i = 0; i < conf.value().size(); ++i) {
    CHECK(conf.value()[i] > 0.0f);
    CHECK(conf.value()[i] < 1.0f);
  }

  // determinism
  Tape<float> t2;
  auto conf2 = net.forward(t2, t2.constant(inp));
  CHECK(max_abs_diff(conf.value(), conf2.value()) == 0.0);

  // batch of 2 equals the two singles (batch-independent normalization)
  Tensor<float> one({1, 16, 32, 32, 6});
  for (int64_t i = 0; i < one.size(); ++i) one[i] = inp[i];
  Tape<float> t3;
  auto c1 = net.forward(t3, t3.constant(one));
  for (int64_t i = 0; i < c1.value().size(); ++i)
    CHECK(std::abs(c1.value()[i] - conf.value()[i]) < 1e-5f);

  // fully convolutional: doubling the in-plane dims doubles the output dims
  DiscConfig big = desk_cfg();
  big.in_height = 64;
  big.in_width = 64;
  DiscNet<float> net_big(big);
  Tape<float> t4;
  auto conf_big =
      net_big.forward(t4, t4.constant(random_tensor<float>({1, 16, 64, 64, 6}, rng, 0.0, 1.0)));
  CHECK(conf_big.value().shape() == std::vector<int64_t>{1, 16, 64, 64, 1});

  // bad channel count rejected
  Tape<float> t5;
  CHECK_THROWS_AS(net.forward(t5, t5.constant(random_tensor<float>({1, 16, 32, 32, 5}, rng))),
                  InvalidArgument);
  DiscConfig bad = desk_cfg();
  bad.in_depth = 12;
  CHECK_THROWS_AS(DiscNet<float>{bad}, InvalidArgument);
}

TEST_CASE("d-net loss gradient matches finite differences on a tiny probe") {
  DiscConfig cfg;
  cfg.in_depth = 16;
  cfg.in_height = 16;
  cfg.in_width = 16;
  cfg.base_channels = 2;
  cfg.num_classes = 3;
  cfg.init_seed = 33;
  DiscNet<double> net(cfg);
  Rng rng(34);
  const auto real0 = random_tensor<double>({1, 16, 16, 16, 3}, rng, 0.0, 1.0);
  const auto fake0 = random_tensor<double>({1, 16, 16, 16, 3}, rng, 0.0, 1.0);

  auto loss_value = [&]() {
    Tape<double> tape;
    auto cr = net.forward(tape, tape.constant(real0));
    auto cf = net.forward(tape, tape.constant(fake0));
    return losses::d_loss(cr, cf).value()[0];
  };

  Tape<double> tape;
  auto cr = net.forward(tape, tape.constant(real0));
  auto cf = net.forward(tape, tape.constant(fake0));
  auto l = losses::d_loss(cr, cf);
  net.params().zero_grads();
  tape.backward(l);

  Rng pick(35);
  const double h = 1e-5;
  for (auto* p : net.params().all()) {
    for (int rep = 0; rep < 2; ++rep) {
      const int64_t i = pick.uniform_int(p->value.size());
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double fp = loss_value();
      p->value[i] = orig - h;
      const double fm = loss_value();
      p->value[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double an = p->grad[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      INFO("param ", p->name, " elem ", i);
      CHECK(std::abs(fd - an) / denom < 1e-4);
    }
  }
}

TEST_CASE("frozen discriminator passes adversarial gradient to its input") {
  DiscNet<float> net(desk_cfg());
  net.set_trainable(false);
  Rng rng(36);
  Tape<float> tape;
  Var<float> inp = tape.input(random_tensor<float>({1, 16, 32, 32, 6}, rng, 0.0, 1.0));
  auto conf = net.forward(tape, inp);
  auto loss = losses::adversarial_loss(conf);
  net.params().zero_grads();
  tape.backward(loss);
  // all D parameters untouched
  for (const auto* p : net.params().all())
    for (int64_t i = 0; i < p->grad.size(); ++i) CHECK(p->grad[i] == 0.0f);
  // input receives gradient
  const auto g = tape.grad_of(inp);
  double nrm = 0;
  for (int64_t i = 0; i < g.size(); ++i) nrm += std::abs(double(g[i]));
  CHECK(nrm > 0.0);
}
