#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "e2t/energy.hpp"
#include "e2t/kernels.hpp"
#include "e2t/quant.hpp"
#include "e2t/rng.hpp"
#include "e2t/tensor.hpp"

namespace e2t {

enum class ParamKind { conv_weight, dense_weight, dense_bias, bn_gamma, bn_beta, gate };

struct Param {
  std::string name;
  ParamKind kind = ParamKind::conv_weight;
  Tensor value;
  Tensor grad;
  /// Cleared when the owning block is skipped for the current step; inactive
  /// parameters are left untouched by the optimizer.
  bool active = true;

  Param() = default;
  Param(std::string n, ParamKind k, Tensor v)
      : name(std::move(n)), kind(k), value(std::move(v)), grad(value.shape()) {}
};

/// Fixed-point regime of a training step. When `quantized`, conv and dense
/// layers see inputs and weights truncated to act_bits in the forward pass and
/// output gradients truncated to grad_bits in the backward pass; quantizers
/// pass gradients straight through.
struct PrecisionConfig {
  bool quantized = false;
  int act_bits = 8;
  int grad_bits = 16;
  int act_msb_bits = 4;
  int grad_msb_bits = 10;

  int forward_bits() const { return quantized ? act_bits : 32; }
  int backward_bits() const { return quantized ? grad_bits : 32; }
};

enum class LayerKind { conv2d, dense, batchnorm, relu, global_avg_pool, residual_block };

/// One weight-gradient computation handed to a WeightGradEngine.
struct WeightGradRequest {
  std::string_view layer;
  LayerKind kind = LayerKind::conv2d;
  ConvGeometry geometry;
  const Tensor& x;    // layer input as consumed by the multiply
  const Tensor& g_y;  // output gradient as consumed by the multiply
  Shape w_shape;
  std::uint64_t macs = 0;  // MACs of one full g_w evaluation
  /// Unmetered g_w = sum over the mini-batch of x_n^T g_{y,n}.
  std::function<Tensor(const Tensor&, const Tensor&)> inner_product;
};

/// Strategy for the weight-gradient inner product. The default computes it
/// exactly; the sign predictor substitutes low-precision predictions.
class WeightGradEngine {
 public:
  virtual ~WeightGradEngine() = default;
  virtual Tensor compute(const WeightGradRequest& req, const PrecisionConfig& precision,
                         EnergyLedger* ledger) = 0;
};

class ExactWeightGrad final : public WeightGradEngine {
 public:
  Tensor compute(const WeightGradRequest& req, const PrecisionConfig& precision,
                 EnergyLedger* ledger) override;
};

/// Forwards to an inner engine, handing every request to an observer first.
class ObservedWeightGrad final : public WeightGradEngine {
 public:
  using Observer = std::function<void(const WeightGradRequest&)>;
  ObservedWeightGrad(WeightGradEngine& inner, Observer obs) : inner_(inner), obs_(std::move(obs)) {}
  Tensor compute(const WeightGradRequest& req, const PrecisionConfig& precision,
                 EnergyLedger* ledger) override {
    if (obs_) obs_(req);
    return inner_.compute(req, precision, ledger);
  }

 private:
  WeightGradEngine& inner_;
  Observer obs_;
};

enum class Mode { train, eval };

/// How gate probabilities become keep/skip decisions.
///  - sample: keep ~ Bernoulli(prob); gradients use prob (straight-through)
///  - deterministic: keep = prob >= threshold
///  - soft: every block runs and its residual branch is scaled by prob (the
///    differentiable relaxation used to verify gate gradients)
enum class GateMode { sample, deterministic, soft };

struct GateDecision {
  double prob = 1.0;
  bool keep = true;
  std::size_t block_index = 0;
};

struct StepContext {
  Mode mode = Mode::train;
  EnergyLedger* ledger = nullptr;
  PrecisionConfig precision;
  WeightGradEngine* weight_grad = nullptr;  // null: exact

  GateMode gate_mode = GateMode::sample;
  double gate_threshold = 0.5;
  Rng* gate_rng = nullptr;
  double alpha = 0.0;
  /// Bypasses the gate network with fixed keep bits.
  std::optional<std::vector<bool>> forced_mask;

  /// Backpropagate into the classifier head only.
  bool head_only = false;
  /// BatchNorm accumulates a cumulative average of batch statistics instead
  /// of the momentum update (used to re-estimate statistics for averaged
  /// weights).
  bool bn_recalibrate = false;
  /// When set, every ReLU folds its on/off pattern into this hash so callers
  /// can tell whether two evaluations took the same piecewise-linear branch.
  std::uint64_t* relu_signature = nullptr;

  OpMeter meter(Phase phase, int bits_a, int bits_b) const { return OpMeter{ledger, phase, bits_a, bits_b}; }
};

}  // namespace e2t
