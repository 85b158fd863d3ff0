#include <cmath>

#include "doctest.h"
#include "test_helpers.hpp"
#include "vseg/kernels.hpp"
#include "vseg/losses.hpp"

using namespace vseg;
using namespace vseg::losses;
using ad::Tape;
using ad::Var;
using vseg::testing::fd_check;
using vseg::testing::random_tensor;

namespace {

// Soft probability tensor (N,Z,H,W,C): random logits through softmax.
Tensor<double> random_probs(std::vector<int64_t> shape, Rng& rng) {
  auto logits = random_tensor<double>(shape, rng, -2.0, 2.0);
  Tensor<double> probs(shape);
  vseg::kernels::softmax_channels_forward(logits, probs);
  return probs;
}

}  // namespace

TEST_CASE("adaptive_weights reproduces the closed-form values") {
  // DSC=1, class occupies all voxels -> w = 1
  {
    auto w = adaptive_weights({1.0, 0.0}, {1000, 0});
    CHECK(w.w[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  // DSC=0, class holds total/e voxels -> w = 3
  {
    const int64_t total = 1000000;
    const int64_t ce = int64_t(std::llround(double(total) / std::exp(1.0)));
    auto w = adaptive_weights({0.0, 0.0}, {ce, total - ce});
    CHECK(w.w[0] == doctest::Approx(3.0).epsilon(1e-5));
  }
  // C=2, counts (900,100), DSC (0.9,0.5) -> (1.2054, 3.8026)
  {
    auto w = adaptive_weights({0.9, 0.5}, {900, 100});
    CHECK(w.w[0] == doctest::Approx(1.2054).epsilon(1e-4));
    CHECK(w.w[1] == doctest::Approx(3.8026).epsilon(1e-4));
  }
  // absent class gets its count floored at one voxel
  {
    auto w = adaptive_weights({0.5, 0.0}, {1000, 0});
    CHECK(w.w[1] == doctest::Approx(2.0 + std::log(1000.0)).epsilon(1e-9));
  }
  CHECK_THROWS_AS(adaptive_weights({0.0}, {0}), InvalidArgument);
}

TEST_CASE("weighted_mce: frozen hand values") {
  // 1 voxel, C=3, gt class 1, p=(0.2,0.5,0.3), w=(1,2,1) -> -2 ln 0.5 = 1.3863
  Tape<double> tape;
  Tensor<double> p({1, 1, 1, 1, 3});
  p[0] = 0.2;
  p[1] = 0.5;
  p[2] = 0.3;
  Tensor<uint8_t> gt({1, 1, 1, 1});
  gt[0] = 1;
  ClassWeights w;
  w.w = {1.0, 2.0, 1.0};
  auto loss = weighted_mce(tape.input(p), gt, w);
  CHECK(loss.value()[0] == doctest::Approx(1.3863).epsilon(1e-4));

  // uniform prediction, unit weights -> Z*H*W * ln C
  Tape<double> t2;
  const int64_t vox = 2 * 3 * 4;
  Tensor<double> pu({1, 2, 3, 4, 6}, 1.0 / 6.0);
  Tensor<uint8_t> gtu({1, 2, 3, 4});
  ClassWeights wu;
  wu.w.assign(6, 1.0);
  auto lu = weighted_mce(t2.input(pu), gtu, wu);
  CHECK(lu.value()[0] == doctest::Approx(double(vox) * std::log(6.0)).epsilon(1e-9));

  // perfect one-hot prediction -> loss ~ 0
  Tape<double> t3;
  Tensor<double> pp({1, 1, 1, 2, 2});
  pp.at(0, 0, 0, 0, 0) = 1.0;
  pp.at(0, 0, 0, 1, 1) = 1.0;
  Tensor<uint8_t> gtp({1, 1, 1, 2});
  gtp[0] = 0;
  gtp[1] = 1;
  ClassWeights w2;
  w2.w = {1.0, 1.0};
  auto lp = weighted_mce(t3.input(pp), gtp, w2);
  CHECK(lp.value()[0] == doctest::Approx(0.0).epsilon(1e-9));

  // NaN prediction rejected
  Tape<double> t4;
  Tensor<double> pn({1, 1, 1, 1, 2}, 0.5);
  pn[0] = std::nan("");
  Tensor<uint8_t> g4({1, 1, 1, 1});
  CHECK_THROWS_AS(weighted_mce(t4.input(pn), g4, ClassWeights{{1.0, 1.0}, {}, {}}),
                  InvalidArgument);
}

TEST_CASE("weighted_mce with unit weights equals plain cross-entropy oracle") {
  Rng rng(21);
  auto p = random_probs({2, 2, 2, 2, 4}, rng);
  Tensor<uint8_t> gt({2, 2, 2, 2});
  for (int64_t i = 0; i < gt.size(); ++i) gt[i] = uint8_t(rng.uniform_int(4));
  double expected = 0.0;
  for (int64_t i = 0; i < gt.size(); ++i) expected -= std::log(p[i * 4 + gt[i]]);
  Tape<double> tape;
  ClassWeights w;
  w.w.assign(4, 1.0);
  auto loss = weighted_mce(tape.input(p), gt, w);
  CHECK(loss.value()[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("bce_confidence: frozen values, symmetry, finiteness at clamp") {
  Tape<double> tape;
  Tensor<double> half({1, 2, 2, 2, 1}, 0.5);
  CHECK(bce_confidence(tape.input(half), 1).value()[0] ==
        doctest::Approx(5.5452).epsilon(1e-4));

  // near-one against target 1 -> ~0
  Tensor<double> one({1, 2, 2, 2, 1}, 1.0 - 1e-7);
  CHECK(bce_confidence(tape.input(one), 1).value()[0] == doctest::Approx(0.0).epsilon(1e-5));

  // symmetry: bce(c, 0) == bce(1-c, 1)
  Rng rng(22);
  auto c = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.05, 0.95);
  Tensor<double> cm(c.shape());
  for (int64_t i = 0; i < c.size(); ++i) cm[i] = 1.0 - c[i];
  CHECK(bce_confidence(tape.input(c), 0).value()[0] ==
        doctest::Approx(bce_confidence(tape.input(cm), 1).value()[0]).epsilon(1e-12));

  // extreme maps stay finite thanks to the log floor
  Tensor<double> zeroish({1, 2, 2, 2, 1}, 1e-9);
  CHECK(std::isfinite(bce_confidence(tape.input(zeroish), 1).value()[0]));
  CHECK(std::isfinite(bce_confidence(tape.input(zeroish), 0).value()[0]));
}

TEST_CASE("adversarial_loss is bce against the all-ones target") {
  Tape<double> tape;
  Tensor<double> half({1, 2, 2, 2, 1}, 0.5);
  auto a = adversarial_loss(tape.input(half));
  CHECK(a.value()[0] == doctest::Approx(5.5452).epsilon(1e-4));
  Rng rng(23);
  auto c = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.1, 0.9);
  CHECK(adversarial_loss(tape.input(c)).value()[0] ==
        doctest::Approx(bce_confidence(tape.input(c), 1).value()[0]).epsilon(1e-15));
  // perfect generator: conf ~ 1 -> loss ~ 0
  Tensor<double> one({1, 2, 2, 2, 1}, 1.0 - 1e-7);
  CHECK(adversarial_loss(tape.input(one)).value()[0] == doctest::Approx(0.0).epsilon(1e-5));
}

TEST_CASE("semi_loss: threshold gating, pseudo-labels, frozen value") {
  Rng rng(24);
  LossWeights lw;

  // single trusted voxel with p = (0.2, 0.8) -> -ln 0.8 = 0.2231
  {
    Tape<double> tape;
    Tensor<double> p({1, 1, 1, 1, 2});
    p[0] = 0.2;
    p[1] = 0.8;
    Tensor<double> conf({1, 1, 1, 1, 1}, 0.9);
    SemiMask mask;
    auto l = semi_loss(tape.input(p), conf, lw, &mask);
    CHECK(l.value()[0] == doctest::Approx(0.2231).epsilon(1e-4));
    CHECK(mask.pseudo_labels[0] == 1);
    CHECK(mask.indicator[0] == 1);
    CHECK(mask.trusted_fraction == 1.0);
  }

  // threshold above the sigmoid ceiling -> empty trusted set, zero loss
  {
    Tape<double> tape;
    auto p = random_probs({1, 2, 2, 2, 3}, rng);
    auto conf = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.0, 1.0);
    LossWeights high = lw;
    high.t_semi = 1.1;
    SemiMask mask;
    auto l = semi_loss(tape.input(p), conf, high, &mask);
    CHECK(l.value()[0] == 0.0);
    CHECK(mask.trusted_fraction == 0.0);
  }

  // T=0.2: confidence 0.3 included, 0.1 masked
  {
    Tape<double> tape;
    Tensor<double> p({1, 1, 1, 2, 2});
    p.at(0, 0, 0, 0, 0) = 0.3;
    p.at(0, 0, 0, 0, 1) = 0.7;
    p.at(0, 0, 0, 1, 0) = 0.6;
    p.at(0, 0, 0, 1, 1) = 0.4;
    Tensor<double> conf({1, 1, 1, 2, 1});
    conf[0] = 0.3;
    conf[1] = 0.1;
    SemiMask mask;
    auto l = semi_loss(tape.input(p), conf, lw, &mask);
    CHECK(mask.indicator[0] == 1);
    CHECK(mask.indicator[1] == 0);
    CHECK(l.value()[0] == doctest::Approx(-std::log(0.7)).epsilon(1e-9));
  }

  // monotone non-increasing in the threshold
  {
    auto p = random_probs({1, 2, 2, 2, 3}, rng);
    auto conf = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.0, 1.0);
    double prev = std::numeric_limits<double>::infinity();
    for (double t : {0.0, 0.2, 0.5, 0.8, 1.0}) {
      Tape<double> tape;
      LossWeights l2 = lw;
      l2.t_semi = t;
      auto l = semi_loss(tape.input(p), conf, l2, nullptr);
      CHECK(l.value()[0] <= prev + 1e-12);
      prev = l.value()[0];
    }
  }
}

TEST_CASE("semi_loss passes no gradient through pseudo-labels or indicator") {
  // Construct a graph where probs feed ONLY the pseudo-label/indicator paths:
  // detached probs drive the loss; the live path contributes only via argmax.
  Rng rng(25);
  auto p0 = random_probs({1, 2, 2, 2, 3}, rng);
  auto conf = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.5, 0.9);
  Tape<double> tape;
  Var<double> p = tape.input(p0);
  // The loss evaluates detach(p); p itself only shapes pseudo-labels.
  auto l = semi_loss(ad::detach(p), conf, LossWeights{}, nullptr);
  tape.backward(l);
  auto g = tape.grad_of(p);
  for (int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("total_s_loss combines branches with the paper's lambdas") {
  LossWeights lw;
  Tape<double> tape;
  auto scalar = [&](double v) {
    Tensor<double> t({1});
    t[0] = v;
    return tape.input(t);
  };
  // labeled: (10, 5, -) -> 10 + 0.01*5 = 10.05
  auto lab = total_s_loss<double>(scalar(10.0), scalar(5.0), std::nullopt, lw, Branch::kLabeled);
  CHECK(lab.value()[0] == doctest::Approx(10.05).epsilon(1e-12));
  // unlabeled: (-, 5, 3) -> 0.001*5 + 0.1*3 = 0.305
  auto unl =
      total_s_loss<double>(std::nullopt, scalar(5.0), scalar(3.0), lw, Branch::kUnlabeled);
  CHECK(unl.value()[0] == doctest::Approx(0.305).epsilon(1e-12));
  // all-zero components -> 0
  auto z = total_s_loss<double>(scalar(0.0), scalar(0.0), std::nullopt, lw, Branch::kLabeled);
  CHECK(z.value()[0] == 0.0);
  // labeled branch with a nonzero semi term violates the contract
  CHECK_THROWS_AS(
      total_s_loss<double>(scalar(1.0), scalar(1.0), scalar(1.0), lw, Branch::kLabeled),
      InvalidArgument);
  // unlabeled branch with a nonzero vox term violates the contract
  CHECK_THROWS_AS(
      total_s_loss<double>(scalar(1.0), scalar(1.0), std::nullopt, lw, Branch::kUnlabeled),
      InvalidArgument);
}

TEST_CASE("d_loss: frozen value, optimum, and argument symmetry") {
  Tape<double> tape;
  Tensor<double> half({1, 2, 2, 2, 1}, 0.5);
  auto l = d_loss(tape.input(half), tape.input(half));
  CHECK(l.value()[0] == doctest::Approx(11.0904).epsilon(1e-4));

  // perfect discriminator: real ~1, fake ~eps -> ~0
  Tensor<double> hi({1, 2, 2, 2, 1}, 1.0 - 1e-7);
  Tensor<double> lo({1, 2, 2, 2, 1}, 1e-7);
  CHECK(d_loss(tape.input(hi), tape.input(lo)).value()[0] ==
        doctest::Approx(0.0).epsilon(1e-4));

  // swapping real/fake with complementary maps leaves the loss unchanged
  Rng rng(26);
  auto a = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.1, 0.9);
  auto b = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.1, 0.9);
  Tensor<double> ac(a.shape()), bc(b.shape());
  for (int64_t i = 0; i < a.size(); ++i) {
    ac[i] = 1.0 - a[i];
    bc[i] = 1.0 - b[i];
  }
  CHECK(d_loss(tape.input(a), tape.input(b)).value()[0] ==
        doctest::Approx(d_loss(tape.input(bc), tape.input(ac)).value()[0]).epsilon(1e-12));

  // finite for all clamped maps
  CHECK(std::isfinite(d_loss(tape.input(lo), tape.input(hi)).value()[0]));
}

TEST_CASE("loss gradients match finite differences (both branches)") {
  Rng rng(27);
  // labeled: weighted_mce + lambda * adversarial on shared probabilities
  {
    auto p0 = random_probs({1, 2, 2, 2, 3}, rng);
    Tensor<uint8_t> gt({1, 2, 2, 2});
    for (int64_t i = 0; i < gt.size(); ++i) gt[i] = uint8_t(rng.uniform_int(3));
    ClassWeights w;
    w.w = {1.0, 2.5, 0.7};
    auto conf0 = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.2, 0.8);
    LossWeights lw;

    Tape<double> tape;
    Var<double> p = tape.input(p0);
    Var<double> conf = tape.input(conf0);
    auto total = total_s_loss<double>(weighted_mce(p, gt, w), adversarial_loss(conf),
                                      std::nullopt, lw, Branch::kLabeled);
    tape.backward(total);
    const auto gp = tape.grad_of(p);
    const auto gc = tape.grad_of(conf);

    auto fp = [&](const Tensor<double>& pv) {
      Tape<double> t2;
      return total_s_loss<double>(weighted_mce(t2.input(pv), gt, w),
                                  adversarial_loss(t2.constant(conf0)), std::nullopt, lw,
                                  Branch::kLabeled)
          .value()[0];
    };
    CHECK(fd_check(fp, p0, gp, 1e-6) < 1e-5);
    auto fc = [&](const Tensor<double>& cv) {
      Tape<double> t2;
      return total_s_loss<double>(weighted_mce(t2.constant(p0), gt, w),
                                  adversarial_loss(t2.input(cv)), std::nullopt, lw,
                                  Branch::kLabeled)
          .value()[0];
    };
    CHECK(fd_check(fc, conf0, gc, 1e-6) < 1e-5);
  }
  // unlabeled: lambda_adv * adv + lambda_semi * semi
  {
    auto p0 = random_probs({1, 2, 2, 2, 3}, rng);
    auto conf0 = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.0, 1.0);
    LossWeights lw;
    Tape<double> tape;
    Var<double> p = tape.input(p0);
    auto total = total_s_loss<double>(std::nullopt, adversarial_loss(tape.constant(conf0)),
                                      semi_loss(p, conf0, lw, nullptr), lw, Branch::kUnlabeled);
    tape.backward(total);
    const auto gp = tape.grad_of(p);
    auto fp = [&](const Tensor<double>& pv) {
      Tape<double> t2;
      return total_s_loss<double>(std::nullopt, adversarial_loss(t2.constant(conf0)),
                                  semi_loss(t2.input(pv), conf0, lw, nullptr), lw,
                                  Branch::kUnlabeled)
          .value()[0];
    };
    CHECK(fd_check(fp, p0, gp, 1e-6) < 1e-5);
  }
  // d_loss w.r.t. both confidence maps
  {
    auto r0 = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.2, 0.8);
    auto f0 = random_tensor<double>({1, 2, 2, 2, 1}, rng, 0.2, 0.8);
    Tape<double> tape;
    Var<double> r = tape.input(r0);
    Var<double> f = tape.input(f0);
    auto l = d_loss(r, f);
    tape.backward(l);
    const auto gr = tape.grad_of(r);
    const auto gf = tape.grad_of(f);
    auto fr = [&](const Tensor<double>& rv) {
      Tape<double> t2;
      return d_loss(t2.input(rv), t2.constant(f0)).value()[0];
    };
    auto ff = [&](const Tensor<double>& fv) {
      Tape<double> t2;
      return d_loss(t2.constant(r0), t2.input(fv)).value()[0];
    };
    CHECK(fd_check(fr, r0, gr, 1e-6) < 1e-5);
    CHECK(fd_check(ff, f0, gf, 1e-6) < 1e-5);
  }
}
