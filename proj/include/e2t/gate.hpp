#pragma once

#include <cstdint>
#include <vector>

#include "e2t/context.hpp"

namespace e2t {

/// Recurrent gate shared by all residual blocks: global average pooling, a
/// linear projection to a 10-dim vector, one LSTM cell of width 10 and a
/// linear head with a sigmoid. One parameter set serves every block; the
/// recurrent state runs across blocks within one forward pass.
///
/// Decisions are made per mini-batch: pooling averages over the batch as well
/// as over space, so one decision skips the whole batch's forward and backward
/// work for that block. `pool_stride` pools every stride-th row and column
/// only.
class GateNetwork {
 public:
  static constexpr std::size_t kHidden = 10;

  GateNetwork() = default;
  GateNetwork(std::size_t channels, Rng& rng, double head_bias = 0.0, std::size_t pool_stride = 1);

  /// Clears recurrent state and cached steps; called once per mini-batch.
  void reset();

  /// Runs one recurrent step on the block input and turns the probability
  /// into a decision according to ctx.gate_mode.
  GateDecision step(const Tensor& block_input, std::size_t block_index, const StepContext& ctx);

  /// Backpropagates dLoss/dprob for the latest step not yet backpropagated
  /// (steps must be visited in reverse order) and adds dLoss/d(block input)
  /// into `g_input`.
  void backward_step(std::size_t block_index, double g_prob, const StepContext& ctx, Tensor& g_input);

  std::vector<Param*> parameters();
  std::size_t channels() const { return channels_; }
  std::size_t pool_stride() const { return pool_stride_; }
  std::size_t pending_steps() const { return steps_.size(); }

  /// FLOPs of one forward step for a block input of `shape`.
  std::uint64_t step_flops(const Shape& shape) const;

 private:
  struct StepCache {
    std::size_t block_index;
    Shape input_shape;
    std::vector<double> feat, z, h_prev, c_prev, i, f, g, o, c, tanh_c, h;
    double prob;
  };

  std::vector<double> pool(const Tensor& x, const StepContext& ctx) const;

  std::size_t channels_ = 0;
  std::size_t pool_stride_ = 1;
  Param proj_w_, proj_b_;
  Param lstm_wx_, lstm_wh_, lstm_b_;
  Param head_w_, head_b_;

  std::vector<double> h_, c_;
  std::vector<StepCache> steps_;  // popped as they are backpropagated
  std::vector<double> dh_next_, dc_next_;
};

/// Keep mask from one decision per gated block; ConfigError on a count
/// mismatch.
std::vector<bool> select_layers(const std::vector<GateDecision>& decisions, std::size_t num_blocks);

struct SluLossParts {
  double task_loss = 0.0;
  double complexity_cost = 0.0;  // FLOPs of kept blocks / FLOPs of all blocks
  double alpha = 0.0;
  double total() const { return task_loss + alpha * complexity_cost; }
};

/// Hard complexity from the keep mask; ConfigError on alpha < 0 or size
/// mismatch.
SluLossParts slu_total_loss(double task_loss, const std::vector<bool>& mask,
                            const std::vector<std::uint64_t>& block_flops, double alpha);

/// Differentiable complexity: probabilities in place of the mask.
double soft_complexity(const std::vector<double>& probs, const std::vector<std::uint64_t>& block_flops);

/// d soft_complexity / d prob_b.
std::vector<double> complexity_shares(const std::vector<std::uint64_t>& block_flops);

}  // namespace e2t
