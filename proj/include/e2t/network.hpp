#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "e2t/gate.hpp"
#include "e2t/layers.hpp"

namespace e2t {

/// Stem conv-bn-relu, a stack of equal-width residual blocks, global average
/// pooling and a dense classifier.
struct NetworkSpec {
  std::size_t in_channels = 3;
  std::size_t image_size = 16;
  std::size_t width = 12;
  std::size_t blocks = 4;
  std::size_t classes = 10;
  std::size_t stem_stride = 2;
  std::size_t kernel = 3;
  bool gated = false;
  double gate_head_bias = 0.0;
  std::size_t gate_pool_stride = 4;
};

struct ForwardResult {
  Tensor logits;
  std::vector<GateDecision> decisions;
  std::vector<bool> mask;
};

class Network {
 public:
  Network() = default;
  Network(const NetworkSpec& spec, Rng& rng);

  /// Runs the network. Gate decisions come from ctx.forced_mask when set,
  /// else from the gate network when present, else every block is kept.
  ForwardResult forward(const Tensor& x, const StepContext& ctx);

  /// Backpropagates d(task loss)/d(logits) through the last forward pass.
  /// Gate probabilities additionally receive ctx.alpha times each block's
  /// FLOPs share from the complexity term.
  void backward(const Tensor& g_logits, const StepContext& ctx);

  std::vector<Param*> parameters();
  std::vector<Param*> gate_parameters();
  std::vector<Param*> head_parameters();
  void zero_grad();

  /// d total / d prob per block from the last gate-driven backward pass.
  const std::vector<double>& gate_prob_grads() const { return gate_prob_grads_; }

  const NetworkSpec& spec() const { return spec_; }
  bool has_gate() const { return gate_.has_value(); }
  GateNetwork& gate() { return *gate_; }
  std::vector<ResidualBlock>& blocks() { return blocks_; }
  Conv2d& stem() { return stem_conv_; }
  Dense& head() { return head_; }

  /// Shape of every block's input for a batch of n.
  Shape block_input_shape(std::size_t n) const;
  /// Forward FLOPs of each residual block for a batch of n.
  std::vector<std::uint64_t> block_flops(std::size_t n) const;
  /// Forward FLOPs of the full ungated network for a batch of n.
  std::uint64_t base_forward_flops(std::size_t n) const;

  void reset_bn();

 private:
  NetworkSpec spec_;
  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<ResidualBlock> blocks_;
  Dense head_;
  std::optional<GateNetwork> gate_;

  // last forward
  Tensor stem_pre_relu_;
  Shape pooled_from_;
  std::vector<GateDecision> decisions_;
  bool gate_driven_ = false;
  std::vector<double> gate_prob_grads_;
  std::size_t batch_ = 0;
};

}  // namespace e2t
