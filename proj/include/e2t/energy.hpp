#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace e2t {

enum class OpClass { multiply = 0, add = 1, data_move = 2 };
inline constexpr std::size_t kNumOpClasses = 3;

/// Where in a training step an operation was spent. Totals sum over phases;
/// the split exists for per-technique attribution and gate-overhead checks.
enum class Phase { forward = 0, backward = 1, weight_grad = 2, gate = 3, update = 4 };
inline constexpr std::size_t kNumPhases = 5;

inline constexpr std::array<int, 6> kLedgerBits{1, 4, 8, 10, 16, 32};

std::string_view to_string(OpClass c);
std::string_view to_string(Phase p);
OpClass op_class_from_string(std::string_view s);
Phase phase_from_string(std::string_view s);

/// Smallest ledger width >= bits (32 for anything wider).
int ledger_bits_ceil(int bits);

/// Index of `bits` in kLedgerBits; throws ConfigError for unsupported widths.
std::size_t bits_index(int bits);

/// Per-(phase, op class, bit width) operation counters. Counters only grow.
class EnergyLedger {
 public:
  /// Adds `count` operations. Negative counts and unknown widths throw
  /// ConfigError.
  void record(OpClass op, std::int64_t count, int bits, Phase phase = Phase::forward);

  std::uint64_t count(OpClass op, int bits) const;
  std::uint64_t count(Phase phase, OpClass op, int bits) const;

  /// Multiplies plus adds, i.e. FLOPs with one MAC = 2 FLOPs.
  std::uint64_t flops() const;
  std::uint64_t flops(Phase phase) const;

  void merge(const EnergyLedger& other);
  void clear() { counters_ = {}; }

  friend bool operator==(const EnergyLedger&, const EnergyLedger&) = default;

  template <typename Fn>
  void for_each_nonzero(Fn&& fn) const {
    for (std::size_t p = 0; p < kNumPhases; ++p)
      for (std::size_t c = 0; c < kNumOpClasses; ++c)
        for (std::size_t b = 0; b < kLedgerBits.size(); ++b)
          if (counters_[p][c][b] != 0)
            fn(static_cast<Phase>(p), static_cast<OpClass>(c), kLedgerBits[b], counters_[p][c][b]);
  }

 private:
  using Row = std::array<std::uint64_t, kLedgerBits.size()>;
  std::array<std::array<Row, kNumOpClasses>, kNumPhases> counters_{};
};

/// Energy per operation relative to a 32-bit unit cost. The default law is
/// quadratic in bit width; entries may be overridden with measured ratios.
class CostModel {
 public:
  /// cost = count * unit32(op) * (bits/32)^2
  static CostModel quadratic();
  /// 8-bit multiply/add/data-move at 5%/3%/25% of their 32-bit cost, other
  /// widths on the power law through that point.
  static CostModel paper_calibrated();
  /// "quadratic" or "paper_calibrated".
  static CostModel from_name(std::string_view name);

  const std::string& name() const { return name_; }
  double unit32(OpClass op) const { return unit32_[static_cast<std::size_t>(op)]; }
  double ratio(OpClass op, int bits) const;
  double energy_of(std::uint64_t count, int bits, OpClass op) const;
  void set_override(OpClass op, int bits, double ratio);

  double energy(const EnergyLedger& ledger) const;
  double energy(const EnergyLedger& ledger, Phase phase) const;

 private:
  CostModel() = default;

  std::string name_;
  // 45nm float32 figures (pJ): multiply 3.7, add 0.9, 32-bit SRAM read 5.0.
  std::array<double, kNumOpClasses> unit32_{3.7, 0.9, 5.0};
  std::array<std::array<double, kLedgerBits.size()>, kNumOpClasses> ratio_{};
};

struct SavingsReport {
  double computational_savings = 0.0;  // 1 - FLOPs(run)/FLOPs(baseline)
  double energy_savings = 0.0;         // same on cost-model totals
  std::map<std::string, double> attribution;
};

/// Throws ConfigError when the baseline has zero FLOPs.
SavingsReport savings_report(const EnergyLedger& run, const EnergyLedger& baseline,
                             const CostModel& model);

/// Records kernel work at a given operand precision into an optional ledger.
/// Operand widths are rounded up to the nearest ledger width.
struct OpMeter {
  EnergyLedger* ledger = nullptr;
  Phase phase = Phase::forward;
  int bits_a = 32;
  int bits_b = 32;

  /// n multiply-accumulates: n multiplies and n adds at the wider operand
  /// width, one operand load of each side per MAC.
  void macs(std::uint64_t n) const;
  /// Elementwise work at bits_a.
  void elementwise(std::uint64_t mults, std::uint64_t adds, std::uint64_t moves) const;

  OpMeter with_phase(Phase p) const {
    OpMeter m = *this;
    m.phase = p;
    return m;
  }
};

}  // namespace e2t
