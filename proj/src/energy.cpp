#include "e2t/energy.hpp"

#include <algorithm>
#include <cmath>

#include "e2t/errors.hpp"

namespace e2t {

std::string_view to_string(OpClass c) {
  switch (c) {
    case OpClass::multiply: return "multiply";
    case OpClass::add: return "add";
    case OpClass::data_move: return "data_move";
  }
  return "?";
}

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::forward: return "forward";
    case Phase::backward: return "backward";
    case Phase::weight_grad: return "weight_grad";
    case Phase::gate: return "gate";
    case Phase::update: return "update";
  }
  return "?";
}

OpClass op_class_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kNumOpClasses; ++i) {
    if (to_string(static_cast<OpClass>(i)) == s) return static_cast<OpClass>(i);
  }
  throw ConfigError("unknown op class '" + std::string(s) + "'");
}

Phase phase_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kNumPhases; ++i) {
    if (to_string(static_cast<Phase>(i)) == s) return static_cast<Phase>(i);
  }
  throw ConfigError("unknown phase '" + std::string(s) + "'");
}

std::size_t bits_index(int bits) {
  auto it = std::find(kLedgerBits.begin(), kLedgerBits.end(), bits);
  if (it == kLedgerBits.end()) {
    throw ConfigError("unsupported ledger bit width " + std::to_string(bits));
  }
  return static_cast<std::size_t>(it - kLedgerBits.begin());
}

int ledger_bits_ceil(int bits) {
  for (int b : kLedgerBits) {
    if (b >= bits) return b;
  }
  return 32;
}

void EnergyLedger::record(OpClass op, std::int64_t count, int bits, Phase phase) {
  if (count < 0) throw ConfigError("ledger count must be non-negative");
  counters_[static_cast<std::size_t>(phase)][static_cast<std::size_t>(op)][bits_index(bits)] +=
      static_cast<std::uint64_t>(count);
}

std::uint64_t EnergyLedger::count(OpClass op, int bits) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < kNumPhases; ++p) s += count(static_cast<Phase>(p), op, bits);
  return s;
}

std::uint64_t EnergyLedger::count(Phase phase, OpClass op, int bits) const {
  return counters_[static_cast<std::size_t>(phase)][static_cast<std::size_t>(op)][bits_index(bits)];
}

std::uint64_t EnergyLedger::flops(Phase phase) const {
  std::uint64_t s = 0;
  const auto& rows = counters_[static_cast<std::size_t>(phase)];
  for (auto op : {OpClass::multiply, OpClass::add}) {
    for (auto v : rows[static_cast<std::size_t>(op)]) s += v;
  }
  return s;
}

std::uint64_t EnergyLedger::flops() const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < kNumPhases; ++p) s += flops(static_cast<Phase>(p));
  return s;
}

void EnergyLedger::merge(const EnergyLedger& other) {
  for (std::size_t p = 0; p < kNumPhases; ++p)
    for (std::size_t c = 0; c < kNumOpClasses; ++c)
      for (std::size_t b = 0; b < kLedgerBits.size(); ++b)
        counters_[p][c][b] += other.counters_[p][c][b];
}

CostModel CostModel::quadratic() {
  CostModel m;
  m.name_ = "quadratic";
  for (std::size_t c = 0; c < kNumOpClasses; ++c) {
    for (std::size_t b = 0; b < kLedgerBits.size(); ++b) {
      const double r = kLedgerBits[b] / 32.0;
      m.ratio_[c][b] = r * r;
    }
  }
  return m;
}

CostModel CostModel::paper_calibrated() {
  CostModel m;
  m.name_ = "paper_calibrated";
  const std::array<double, kNumOpClasses> at8{0.05, 0.03, 0.25};
  for (std::size_t c = 0; c < kNumOpClasses; ++c) {
    const double k = std::log(at8[c]) / std::log(8.0 / 32.0);
    for (std::size_t b = 0; b < kLedgerBits.size(); ++b) {
      m.ratio_[c][b] = std::pow(kLedgerBits[b] / 32.0, k);
    }
    m.ratio_[c][bits_index(8)] = at8[c];
    m.ratio_[c][bits_index(32)] = 1.0;
  }
  return m;
}

CostModel CostModel::from_name(std::string_view name) {
  if (name == "quadratic") return quadratic();
  if (name == "paper_calibrated") return paper_calibrated();
  throw ConfigError("unknown energy model '" + std::string(name) + "'");
}

double CostModel::ratio(OpClass op, int bits) const {
  return ratio_[static_cast<std::size_t>(op)][bits_index(bits)];
}

double CostModel::energy_of(std::uint64_t count, int bits, OpClass op) const {
  return static_cast<double>(count) * unit32(op) * ratio(op, bits);
}

void CostModel::set_override(OpClass op, int bits, double r) {
  if (!(r >= 0.0)) throw ConfigError("cost ratio must be non-negative");
  ratio_[static_cast<std::size_t>(op)][bits_index(bits)] = r;
}

double CostModel::energy(const EnergyLedger& ledger) const {
  double e = 0.0;
  ledger.for_each_nonzero([&](Phase, OpClass op, int bits, std::uint64_t n) {
    e += energy_of(n, bits, op);
  });
  return e;
}

double CostModel::energy(const EnergyLedger& ledger, Phase phase) const {
  double e = 0.0;
  ledger.for_each_nonzero([&](Phase p, OpClass op, int bits, std::uint64_t n) {
    if (p == phase) e += energy_of(n, bits, op);
  });
  return e;
}

SavingsReport savings_report(const EnergyLedger& run, const EnergyLedger& baseline,
                             const CostModel& model) {
  const auto base_flops = baseline.flops();
  if (base_flops == 0) throw ConfigError("baseline ledger has zero FLOPs");
  SavingsReport r;
  r.computational_savings =
      1.0 - static_cast<double>(run.flops()) / static_cast<double>(base_flops);
  r.energy_savings = 1.0 - model.energy(run) / model.energy(baseline);
  for (std::size_t p = 0; p < kNumPhases; ++p) {
    const auto phase = static_cast<Phase>(p);
    r.attribution[std::string("flops_share.") + std::string(to_string(phase))] =
        static_cast<double>(run.flops(phase)) / static_cast<double>(base_flops);
  }
  return r;
}

void OpMeter::macs(std::uint64_t n) const {
  if (!ledger || n == 0) return;
  const int a = ledger_bits_ceil(bits_a);
  const int b = ledger_bits_ceil(bits_b);
  const int wide = std::max(a, b);
  const auto c = static_cast<std::int64_t>(n);
  ledger->record(OpClass::multiply, c, wide, phase);
  ledger->record(OpClass::add, c, wide, phase);
  ledger->record(OpClass::data_move, c, a, phase);
  ledger->record(OpClass::data_move, c, b, phase);
}

void OpMeter::elementwise(std::uint64_t mults, std::uint64_t adds, std::uint64_t moves) const {
  if (!ledger) return;
  const int a = ledger_bits_ceil(bits_a);
  ledger->record(OpClass::multiply, static_cast<std::int64_t>(mults), a, phase);
  ledger->record(OpClass::add, static_cast<std::int64_t>(adds), a, phase);
  ledger->record(OpClass::data_move, static_cast<std::int64_t>(moves), a, phase);
}

}  // namespace e2t
