#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "e2t/context.hpp"

namespace e2t {

/// -1, 0 or +1.
double sgn(double v);

/// v' = momentum*v + g + wd*w ; w' = w - lr*v'
void sgd_step(Tensor& w, const Tensor& g, Tensor& velocity, double lr, double momentum, double wd);

/// w' = w - lr*(sgn(g) + wd*w)
void signsgd_step(Tensor& w, const Tensor& g, double lr, double wd);

struct PsgStepStats {
  std::uint64_t total = 0;
  std::uint64_t predicted = 0;  // resolved by the MSB predictor
  std::uint64_t flips = 0;      // emitted sign differs from the full-precision sign

  double predicted_fraction() const { return total ? static_cast<double>(predicted) / total : 0.0; }
  double fallback_fraction() const { return total ? 1.0 - predicted_fraction() : 0.0; }
  double flip_rate() const { return total ? static_cast<double>(flips) / total : 0.0; }
  void merge(const PsgStepStats& o) {
    total += o.total;
    predicted += o.predicted;
    flips += o.flips;
  }
};

struct PsgResult {
  Tensor signs;
  Tensor g_w;      // from the full-width (B_x, B_g) operands
  Tensor g_w_msb;  // from the MSB predictors
  double tau = 0.0;
  PsgStepStats stats;
};

using InnerProduct = std::function<Tensor(const Tensor& x, const Tensor& g_y)>;

/// Predictive sign of the weight gradient g_w = inner(x, g_y).
///
/// x and g_y are normalised by their dynamic scales and truncated to
/// act_bits / grad_bits; their MSB prefixes (act_msb_bits / grad_msb_bits)
/// give g_w_msb. With tau = beta * max|g_w_msb|, an entry takes
/// sgn(g_w_msb) when |g_w_msb| >= tau and sgn(g_w) otherwise. ConfigError
/// unless 0 < beta < 1.
PsgResult psg_weight_grad(const Tensor& x, const Tensor& g_y, const InnerProduct& inner,
                          const PrecisionConfig& precision, double beta);

/// Weight-gradient engine that emits predictive signs and charges the
/// ledger for the MSB product of every entry plus the full-width product of
/// fallback entries.
class PsgWeightGrad final : public WeightGradEngine {
 public:
  explicit PsgWeightGrad(double beta);
  Tensor compute(const WeightGradRequest& req, const PrecisionConfig& precision, EnergyLedger* ledger) override;

  double beta() const { return beta_; }
  /// Statistics accumulated since the last reset, over all layers.
  const PsgStepStats& step_stats() const { return stats_; }
  const std::map<std::string, double>& last_tau() const { return tau_; }
  void reset_step() { stats_ = {}; }

 private:
  double beta_;
  PsgStepStats stats_;
  std::map<std::string, double> tau_;
};

/// avg' = (avg*n + w)/(n+1); n is incremented.
void swa_update(Tensor& avg, const Tensor& w, std::uint64_t& n);

/// Running mean of a parameter set.
class SwaAverager {
 public:
  void update(const std::vector<Param*>& params);
  std::uint64_t count() const { return n_; }
  /// Copies the averages into the parameters (StateError before any update).
  void apply(const std::vector<Param*>& params) const;

 private:
  std::map<std::string, Tensor> avg_;
  std::uint64_t n_ = 0;
};

enum class OptimKind { sgd, signsgd, psg };
OptimKind optim_kind_from_string(const std::string& s);
std::string to_string(OptimKind k);

struct OptimConfig {
  OptimKind kind = OptimKind::sgd;
  double lr = 0.1;
  double momentum = 0.9;
  double wd = 1e-4;
};

/// Piecewise-constant learning rate on scheduled steps.
class LrSchedule {
 public:
  LrSchedule(double base, std::vector<std::uint64_t> decay_points, double factor = 0.1);
  double at(std::uint64_t scheduled_step) const;
  const std::vector<std::uint64_t>& decay_points() const { return points_; }

 private:
  double base_;
  std::vector<std::uint64_t> points_;
  double factor_;
};

/// Applies one update to every active parameter; inactive ones (skipped
/// blocks) are left bit-identical, momentum included. sgd keeps per-name
/// momentum buffers; signsgd and psg apply the sign rule to the stored
/// gradient. Update arithmetic is charged to Phase::update.
class Optimizer {
 public:
  explicit Optimizer(OptimConfig cfg);
  void step(const std::vector<Param*>& params, double lr, EnergyLedger* ledger = nullptr);
  const OptimConfig& config() const { return cfg_; }

 private:
  OptimConfig cfg_;
  std::map<std::string, Tensor> velocity_;
};

}  // namespace e2t
