#include <cmath>

#include "doctest.h"
#include "e2t/errors.hpp"
#include "e2t/optim.hpp"

using namespace e2t;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double stddev = 1.0) {
  Tensor t(s);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

// g_w[o, i] = sum_n g[n, o] x[n, i], written out independently of the kernels
Tensor naive_dense_grad(const Tensor& x, const Tensor& g) {
  Tensor out({g.dim(1), x.dim(1)});
  for (std::size_t o = 0; o < g.dim(1); ++o)
    for (std::size_t i = 0; i < x.dim(1); ++i) {
      double s = 0.0;
      for (std::size_t n = 0; n < x.dim(0); ++n) s += g[n * g.dim(1) + o] * x[n * x.dim(1) + i];
      out[o * x.dim(1) + i] = s;
    }
  return out;
}

// truncate toward zero onto a b-bit grid of [-s, s), with clipping
double trunc_q(double v, int bits, double s) {
  const double step = s * std::ldexp(1.0, -(bits - 1));
  const double top = std::ldexp(1.0, bits - 1);
  return std::clamp(std::trunc(v / step), -top, top - 1) * step;
}

Tensor map(const Tensor& t, int bits, double s) {
  Tensor r = t;
  for (double& v : r.data()) v = trunc_q(v, bits, s);
  return r;
}

double pow2_above(double m) { return m == 0.0 ? 1.0 : std::exp2(std::floor(std::log2(m)) + 1.0); }

const InnerProduct kDense = [](const Tensor& x, const Tensor& g) { return dense_weight_grad(x, g); };

}  // namespace

TEST_CASE("sgd examples") {
  Tensor w({1}, {1.0}), v;
  sgd_step(w, Tensor({1}, {0.5}), v, 0.1, 0.0, 0.0);
  CHECK(w[0] == doctest::Approx(0.95));
  Tensor u({1}, {0.7}), v2;
  sgd_step(u, Tensor({1}, {0.0}), v2, 0.1, 0.0, 0.0);
  CHECK(u[0] == 0.7);
  Tensor z({1}, {0.0}), v3;
  sgd_step(z, Tensor({1}, {1.0}), v3, 0.1, 0.9, 0.0);
  sgd_step(z, Tensor({1}, {1.0}), v3, 0.1, 0.9, 0.0);
  CHECK(z[0] == doctest::Approx(-0.29));
  CHECK_THROWS_AS(sgd_step(z, Tensor({2}), v3, 0.1, 0.9, 0.0), DimensionError);
}

TEST_CASE("signsgd examples") {
  Tensor a({1}, {0.4}), b({1}, {0.4});
  signsgd_step(a, Tensor({1}, {0.001}), 0.03, 0.0);
  signsgd_step(b, Tensor({1}, {100.0}), 0.03, 0.0);
  CHECK(a == b);
  Tensor c({1}, {0.4});
  signsgd_step(c, Tensor({1}, {0.0}), 0.03, 0.0);
  CHECK(c[0] == 0.4);
  Tensor d({1}, {1.0});
  signsgd_step(d, Tensor({1}, {-3.0}), 0.03, 0.0);
  CHECK(d[0] == doctest::Approx(1.03));
}

TEST_CASE("signsgd step magnitude equals lr on nonzero coordinates") {
  Rng rng(1);
  Tensor w = random_tensor({500}, rng), g = random_tensor({500}, rng);
  for (std::size_t i = 0; i < 500; i += 7) g[i] = 0.0;
  Tensor w0 = w;
  signsgd_step(w, g, 0.03, 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (g[i] == 0.0) {
      CHECK(w[i] == w0[i]);
    } else {
      CHECK(std::abs(w[i] - w0[i]) == doctest::Approx(0.03).epsilon(1e-12));
    }
  }
}

TEST_CASE("psg branch examples and threshold") {
  // one entry, so g_w_msb = g_w_msb[0] and tau = beta * |g_w_msb[0]|
  PrecisionConfig p;
  Tensor x({1, 2}, {0.5, 0.05});
  Tensor g({1, 1}, {0.5});
  auto r = psg_weight_grad(x, g, kDense, p, 0.05);
  CHECK(r.tau == doctest::Approx(0.05 * r.g_w_msb.max_abs()));
  CHECK(r.signs[0] == 1.0);
  CHECK(r.stats.predicted + (r.stats.total - r.stats.predicted) == 2);
  CHECK_THROWS_AS(psg_weight_grad(x, g, kDense, p, 0.0), ConfigError);
  CHECK_THROWS_AS(psg_weight_grad(x, g, kDense, p, 1.0), ConfigError);
}

TEST_CASE("psg falls back to the full-width sign below tau") {
  // x = [0.5, -0.03]: at 4 bits the second input truncates to 0, so its
  // predicted gradient is 0 < tau and the 8/16-bit product decides.
  PrecisionConfig p;
  Tensor x({1, 2}, {0.5, -0.03});
  Tensor g({1, 1}, {0.75});
  auto r = psg_weight_grad(x, g, kDense, p, 0.05);
  CHECK(r.g_w_msb[1] == 0.0);
  CHECK(r.g_w[1] < 0.0);
  CHECK(r.signs[1] == -1.0);
  CHECK(r.stats.predicted == 1);
}

TEST_CASE("psg with all-zero predictions uses the predictor everywhere") {
  PrecisionConfig p;
  Tensor x({2, 3}, {0.01, 0.02, 0.03, 0.01, 0.02, 0.03});
  Tensor g({2, 1}, {0.0, 0.0});
  auto r = psg_weight_grad(x, g, kDense, p, 0.05);
  CHECK(r.tau == 0.0);
  CHECK(r.stats.predicted_fraction() == 1.0);
  CHECK(r.signs.max_abs() == 0.0);
}

TEST_CASE("psg on a gaussian layer agrees with a brute-force oracle") {
  Rng rng(77);
  PrecisionConfig p;
  Tensor x = random_tensor({32, 100}, rng), g = random_tensor({32, 100}, rng);
  auto r = psg_weight_grad(x, g, kDense, p, 0.05);
  REQUIRE(r.stats.total == 10000);

  const double sx = pow2_above(x.max_abs()), sg = pow2_above(g.max_abs());
  const Tensor xq = map(x, 8, sx), gq = map(g, 16, sg);
  const Tensor full = naive_dense_grad(xq, gq);
  const Tensor msb = naive_dense_grad(map(xq, 4, sx), map(gq, 10, sg));
  double mx = 0.0;
  for (double v : msb.data()) mx = std::max(mx, std::abs(v));
  const double tau = 0.05 * mx;
  std::uint64_t predicted = 0, flips = 0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    const bool use_msb = std::abs(msb[i]) >= tau;
    const double s = use_msb ? sgn(msb[i]) : sgn(full[i]);
    predicted += use_msb;
    flips += s != sgn(full[i]);
    CHECK(r.signs[i] == s);
  }
  CHECK(r.stats.predicted == predicted);
  CHECK(r.stats.flips == flips);
  MESSAGE("gaussian layer: predicted fraction " << r.stats.predicted_fraction() << ", flip rate "
                                                << r.stats.flip_rate());
  CHECK(r.stats.predicted_fraction() + r.stats.fallback_fraction() == doctest::Approx(1.0));
}

TEST_CASE("predictor branch is correct when the noise bound is guaranteed") {
  PrecisionConfig p;
  std::size_t guaranteed = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    Tensor x = random_tensor({8, 6}, rng), g = random_tensor({8, 5}, rng);
    auto r = psg_weight_grad(x, g, kDense, p, 0.05);
    const double sx = pow2_above(x.max_abs()), sg = pow2_above(g.max_abs());
    const double dx = sx * std::ldexp(1.0, -3), dg = sg * std::ldexp(1.0, -9);
    const Tensor xq = map(x, 8, sx), gq = map(g, 16, sg);
    const Tensor gm = map(gq, 10, sg);
    for (std::size_t o = 0; o < 5; ++o)
      for (std::size_t i = 0; i < 6; ++i) {
        // |g_w - g_w_msb| < sum_n |x_n| dg + dx |g_msb_n|
        double bound = 0.0;
        for (std::size_t n = 0; n < 8; ++n) bound += std::abs(xq[n * 6 + i]) * dg + dx * std::abs(gm[n * 5 + o]);
        const std::size_t k = o * 6 + i;
        if (std::abs(r.g_w_msb[k]) >= r.tau && std::abs(r.g_w_msb[k]) > bound) {
          ++guaranteed;
          CHECK(r.signs[k] == sgn(r.g_w[k]));
        }
      }
  }
  CHECK(guaranteed > 0);
}

TEST_CASE("psg signs are invariant to power-of-two input scaling") {
  PrecisionConfig p;
  Rng rng(5);
  Tensor x = random_tensor({16, 10}, rng), g = random_tensor({16, 7}, rng);
  auto a = psg_weight_grad(x, g, kDense, p, 0.05);
  auto b = psg_weight_grad(x * 8.0, g * 0.25, kDense, p, 0.05);
  CHECK(a.signs == b.signs);
  CHECK(a.stats.predicted == b.stats.predicted);
}

TEST_CASE("psg engine charges msb cost for all entries and full cost for fallbacks") {
  Rng rng(9);
  Tensor x = random_tensor({16, 20}, rng), g = random_tensor({16, 10}, rng);
  WeightGradRequest req{"fc", LayerKind::dense, {}, x, g, {10, 20}, 16ull * 200, kDense};
  PrecisionConfig p;
  p.quantized = true;
  PsgWeightGrad engine(0.05);
  EnergyLedger ledger;
  Tensor s = engine.compute(req, p, &ledger);
  const auto& st = engine.step_stats();
  CHECK(ledger.count(Phase::weight_grad, OpClass::multiply, 10) == 16 * 200);
  CHECK(ledger.count(Phase::weight_grad, OpClass::multiply, 16) == 16 * (st.total - st.predicted));
  CHECK(ledger.count(Phase::weight_grad, OpClass::data_move, 4) == 16 * 200);
  for (double v : s.data()) CHECK((v == 1.0 || v == -1.0 || v == 0.0));
  CHECK(engine.last_tau().count("fc") == 1);
}

TEST_CASE("swa examples and exact mean") {
  Tensor avg;
  std::uint64_t n = 0;
  swa_update(avg, Tensor({2}, {3.0, 4.0}), n);
  CHECK(avg.values() == std::vector<double>{3.0, 4.0});
  CHECK(n == 1);
  swa_update(avg, Tensor({2}, {3.0, 4.0}), n);
  CHECK(avg.values() == std::vector<double>{3.0, 4.0});

  Tensor a;
  std::uint64_t m = 0;
  for (double v : {0.0, 1.0, 2.0}) swa_update(a, Tensor({1}, {v}), m);
  CHECK(a[0] == 1.0);

  Rng rng(3);
  Tensor avg2, sum({50});
  std::uint64_t k = 0;
  for (int i = 0; i < 200; ++i) {
    Tensor w = random_tensor({50}, rng);
    sum += w;
    swa_update(avg2, w, k);
  }
  for (std::size_t i = 0; i < 50; ++i) CHECK(std::abs(avg2[i] - sum[i] / 200.0) <= 1e-14);
}

TEST_CASE("optimizer leaves inactive parameters bit-identical") {
  Rng rng(2);
  Param a("a", ParamKind::conv_weight, random_tensor({4}, rng));
  Param b("b", ParamKind::conv_weight, random_tensor({4}, rng));
  a.grad = random_tensor({4}, rng);
  b.grad = random_tensor({4}, rng);
  b.active = false;
  const Tensor b0 = b.value, a0 = a.value;
  for (auto kind : {OptimKind::sgd, OptimKind::signsgd, OptimKind::psg}) {
    Optimizer opt({kind, 0.1, 0.9, 1e-4});
    EnergyLedger l;
    opt.step({&a, &b}, 0.1, &l);
    CHECK(b.value == b0);
    CHECK(l.flops(Phase::update) > 0);
  }
  CHECK(a.value != a0);
}

TEST_CASE("lr schedule") {
  LrSchedule s(0.1, {50, 75});
  CHECK(s.at(0) == 0.1);
  CHECK(s.at(49) == 0.1);
  CHECK(s.at(50) == doctest::Approx(0.01));
  CHECK(s.at(99) == doctest::Approx(0.001));
  CHECK_THROWS_AS(LrSchedule(0.1, {75, 50}), ConfigError);
  CHECK_THROWS_AS(LrSchedule(0.0, {}), ConfigError);
}
