#include "doctest.h"
#include "vseg/rng.hpp"
#include "vseg/tensor.hpp"

using namespace vseg;

TEST_CASE("tensor shape and indexing") {
  Tensor<float> t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  t.at(1, 2, 3) = 7.0f;
  CHECK(t[23] == 7.0f);
  CHECK(t.at(0, 0, 0) == 0.0f);
}

TEST_CASE("tensor rejects degenerate dims") {
  CHECK_THROWS_AS(Tensor<float>({2, 0, 4}), InvalidArgument);
}

TEST_CASE("reshape preserves data") {
  Tensor<int32_t> t({2, 6});
  for (int64_t i = 0; i < 12; ++i) t[i] = int32_t(i);
  auto r = t.reshaped({3, 4});
  CHECK(r.at(2, 3) == 11);
  CHECK_THROWS_AS(t.reshaped({5, 5}), InvalidArgument);
}

TEST_CASE("rng determinism and range") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.uniform() == b.uniform());
    const double n = a.normal();
    (void)n;
    b.normal();
  }
  Rng c(7);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const int64_t k = c.uniform_int(10);
    CHECK(k >= 0);
    CHECK(k < 10);
  }
}

TEST_CASE("rng stream derivation differs per stream") {
  CHECK(Rng::derive(1, 0) != Rng::derive(1, 1));
  CHECK(Rng::derive(1, 0) == Rng::derive(1, 0));
}
