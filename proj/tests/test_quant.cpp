#include <cmath>
#include <limits>

#include "doctest.h"
#include "e2t/errors.hpp"
#include "e2t/quant.hpp"
#include "e2t/rng.hpp"

using namespace e2t;

TEST_CASE("quantize examples") {
  const FixedPointFormat f4(4);
  CHECK(f4.step() == 0.125);
  CHECK(quantize_value(0.3, f4, 1.0) == 0.25);
  CHECK(quantize_value(0.0, f4, 1.0) == 0.0);
  CHECK(quantize_value(-1.0, f4, 1.0) == -1.0);
  CHECK(quantize_value(0.999, f4, 1.0) == 0.875);
  CHECK(quantize_value(-0.3, f4, 1.0) == -0.25);
  CHECK(quantize_value(-5.0, f4, 1.0) == -1.0);
}

TEST_CASE("quantize errors") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(quantize(Tensor({2}, {0.1, nan}), FixedPointFormat(8)), NumericError);
  CHECK_THROWS_AS(quantize(Tensor({1}, {0.1}), FixedPointFormat(8), 0.0), ConfigError);
  CHECK_THROWS_AS(FixedPointFormat(0), ConfigError);
  CHECK_THROWS_AS(FixedPointFormat(8, -1.0), ConfigError);
}

TEST_CASE("msb split examples") {
  const FixedPointFormat full(8), msb(4);
  auto s = msb_split(Tensor({1}, {41.0 / 128.0}), full, msb);
  CHECK(s.msb.values[0] == 0.25);
  CHECK(s.residual[0] == 0.0703125);
  auto z = msb_split(Tensor({1}, {0.5}), full, msb);
  CHECK(z.residual[0] == 0.0);
  auto n = msb_split(Tensor({1}, {-41.0 / 128.0}), full, msb);
  CHECK(n.msb.values[0] == -0.25);
  CHECK(n.residual[0] == -0.0703125);
  CHECK_THROWS_AS(msb_split(Tensor({1}), full, FixedPointFormat(8)), ConfigError);
  CHECK_THROWS_AS(msb_split(Tensor({1}), full, FixedPointFormat(4, 2.0)), ConfigError);
}

TEST_CASE("dynamic scale examples") {
  CHECK(dynamic_scale(Tensor({2}, {0.3, -0.7})) == 1.0);
  CHECK(dynamic_scale(Tensor({1}, {5.1})) == 8.0);
  CHECK(dynamic_scale(Tensor({3})) == 1.0);
  CHECK(dynamic_scale(Tensor({1}, {1.0})) == 2.0);
}

TEST_CASE("step size halves per extra bit") {
  for (int b = 1; b < 32; ++b) {
    CHECK(FixedPointFormat(b + 1).step() == FixedPointFormat(b).step() / 2.0);
    CHECK(FixedPointFormat(b, 3.0).step() == 3.0 * std::ldexp(1.0, -(b - 1)));
  }
}

TEST_CASE("quantizer properties on random values") {
  Rng rng(2024);
  const std::size_t n = 20000;
  for (int bits : {4, 8, 16}) {
    Tensor x({n});
    for (double& v : x.data()) v = rng.normal(0.0, 3.0);
    const double scale = dynamic_scale(x);
    const FixedPointFormat f(bits);
    auto q = quantize(x, f, scale);
    auto qq = quantize(q.values, f, scale);
    CHECK(qq.values == q.values);
    const double unit = f.step() * scale;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(x[i] - q.values[i]) < unit);
      CHECK(std::abs(q.values[i]) <= std::abs(x[i]));
      const double lv = q.values[i] / unit;
      CHECK(lv == std::trunc(lv));
    }
    if (bits > 4) {
      auto s = msb_split(x, f, FixedPointFormat(bits - 4), scale);
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(s.msb.values[i] + s.residual[i] == x[i]);
        CHECK(std::abs(s.residual[i]) < FixedPointFormat(bits - 4).step() * scale);
      }
    }
  }
}
