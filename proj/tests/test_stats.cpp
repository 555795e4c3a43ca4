#include "doctest.h"
#include "e2t/errors.hpp"
#include "e2t/stats.hpp"

using namespace e2t;

// reference values from scipy.stats / statsmodels

TEST_CASE("chi-square goodness of fit") {
  auto r = chi_square_gof({30, 50, 20}, {0.25, 0.5, 0.25});
  CHECK(r.statistic == doctest::Approx(2.0));
  CHECK(r.dof == 2);
  CHECK(r.p_value == doctest::Approx(0.36787944117144245).epsilon(1e-10));
  CHECK_THROWS_AS(chi_square_gof({1}, {1.0}), ConfigError);
}

TEST_CASE("spearman rank correlation") {
  auto r = spearman({0, 0.1, 0.3, 1.0, 0, 0.1, 0.3, 1.0}, {0.9, 0.8, 0.6, 0.3, 0.95, 0.7, 0.65, 0.2});
  CHECK(r.rho == doctest::Approx(-0.9759000729485332).epsilon(1e-10));
  CHECK(r.p_two_sided == doctest::Approx(3.436402807612141e-05).epsilon(1e-6));
  CHECK(r.p_one_sided_negative == doctest::Approx(r.p_two_sided / 2.0).epsilon(1e-9));
  auto s = spearman({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5});
  CHECK(s.rho == doctest::Approx(0.8));
  CHECK(s.p_two_sided == doctest::Approx(0.10408803866182788).epsilon(1e-8));
}

TEST_CASE("wilson interval") {
  auto w = wilson_interval(7, 100);
  CHECK(w.lo == doctest::Approx(0.03431926106727266).epsilon(1e-9));
  CHECK(w.hi == doctest::Approx(0.13749514739073504).epsilon(1e-9));
  auto z = wilson_interval(0, 100000);
  CHECK(z.lo == 0.0);
  CHECK(z.hi > 0.0);
  CHECK(z.hi < 1e-4);
  CHECK(normal_quantile_two_sided(0.95) == doctest::Approx(1.959963984540054));
}

TEST_CASE("median and mean interval") {
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({4, 1, 2, 3}) == 2.5);
  auto m = mean_ci({1, 2, 3, 4});
  CHECK(m.mean == 2.5);
  CHECK(m.half_width > 0.0);
}
