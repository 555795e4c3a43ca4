#include <cmath>

#include "doctest.h"
#include "e2t/energy.hpp"
#include "e2t/errors.hpp"

using namespace e2t;

TEST_CASE("record semantics") {
  EnergyLedger a, b;
  a.record(OpClass::add, 0, 8);
  CHECK(a == EnergyLedger{});
  a.record(OpClass::multiply, 5, 16);
  a.record(OpClass::multiply, 5, 16);
  b.record(OpClass::multiply, 10, 16);
  CHECK(a == b);
  CHECK_THROWS_AS(a.record(OpClass::add, -1, 8), ConfigError);
  CHECK_THROWS_AS(a.record(OpClass::add, 1, 12), ConfigError);
  for (int bits : kLedgerBits) CHECK_NOTHROW(a.record(OpClass::data_move, 1, bits));
}

TEST_CASE("quadratic model ratios") {
  const auto m = CostModel::quadratic();
  CHECK(m.ratio(OpClass::multiply, 32) == 1.0);
  CHECK(m.ratio(OpClass::multiply, 8) == 1.0 / 16.0);
  CHECK(m.ratio(OpClass::multiply, 1) == 1.0 / 1024.0);
  for (int bits : kLedgerBits)
    for (auto op : {OpClass::multiply, OpClass::add, OpClass::data_move}) {
      CHECK(m.energy_of(1000, bits, op) / m.energy_of(1000, 32, op) ==
            doctest::Approx((bits / 32.0) * (bits / 32.0)).epsilon(1e-15));
    }
  CHECK(m.energy_of(10, 32, OpClass::multiply) == doctest::Approx(37.0));
}

TEST_CASE("paper-calibrated preset") {
  const auto m = CostModel::paper_calibrated();
  CHECK(m.ratio(OpClass::multiply, 8) == doctest::Approx(0.05));
  CHECK(m.ratio(OpClass::add, 8) == doctest::Approx(0.03));
  CHECK(m.ratio(OpClass::data_move, 8) == doctest::Approx(0.25));
  CHECK(m.ratio(OpClass::add, 32) == doctest::Approx(1.0));
  CHECK(m.ratio(OpClass::add, 16) < 1.0);
  CHECK(m.ratio(OpClass::add, 16) > 0.03);
  CHECK(CostModel::from_name("quadratic").name() == "quadratic");
  CHECK_THROWS_AS(CostModel::from_name("linear"), ConfigError);
}

TEST_CASE("override replaces one entry") {
  auto m = CostModel::quadratic();
  m.set_override(OpClass::add, 8, 0.5);
  CHECK(m.ratio(OpClass::add, 8) == 0.5);
  CHECK(m.ratio(OpClass::multiply, 8) == 1.0 / 16.0);
}

TEST_CASE("energy totals equal sum of counter costs") {
  EnergyLedger l;
  l.record(OpClass::multiply, 100, 8, Phase::forward);
  l.record(OpClass::add, 50, 16, Phase::backward);
  l.record(OpClass::data_move, 7, 32, Phase::update);
  const auto m = CostModel::quadratic();
  const double want = m.energy_of(100, 8, OpClass::multiply) + m.energy_of(50, 16, OpClass::add) +
                      m.energy_of(7, 32, OpClass::data_move);
  CHECK(m.energy(l) == doctest::Approx(want));
  CHECK(m.energy(l, Phase::backward) == doctest::Approx(m.energy_of(50, 16, OpClass::add)));
  CHECK(l.flops() == 150);
  CHECK(l.flops(Phase::update) == 0);
}

TEST_CASE("savings report") {
  EnergyLedger base;
  base.record(OpClass::multiply, 1000, 32);
  base.record(OpClass::add, 1000, 32);
  const auto m = CostModel::quadratic();
  auto self = savings_report(base, base, m);
  CHECK(self.computational_savings == 0.0);
  CHECK(self.energy_savings == 0.0);

  EnergyLedger half;
  half.record(OpClass::multiply, 500, 32);
  half.record(OpClass::add, 500, 32);
  CHECK(savings_report(half, base, m).computational_savings == 0.5);
  CHECK(savings_report(half, base, m).energy_savings == doctest::Approx(0.5));
  CHECK_THROWS_AS(savings_report(half, EnergyLedger{}, m), ConfigError);
}

TEST_CASE("op meter charges one MAC as two FLOPs at the wider width") {
  EnergyLedger l;
  OpMeter{&l, Phase::weight_grad, 4, 10}.macs(3);
  CHECK(l.count(Phase::weight_grad, OpClass::multiply, 10) == 3);
  CHECK(l.count(Phase::weight_grad, OpClass::add, 10) == 3);
  CHECK(l.count(Phase::weight_grad, OpClass::data_move, 4) == 3);
  CHECK(l.count(Phase::weight_grad, OpClass::data_move, 10) == 3);
  CHECK(l.flops() == 6);
  OpMeter{&l, Phase::forward, 5, 5}.macs(1);
  CHECK(l.count(OpClass::multiply, 8) == 1);
}
