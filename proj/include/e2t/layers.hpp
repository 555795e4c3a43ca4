#pragma once

#include <optional>
#include <string>
#include <vector>

#include "e2t/context.hpp"

namespace e2t {

/// Network description entry. Residual blocks are conv-bn-relu-conv-bn with an
/// identity shortcut, so their input and output shapes coincide.
struct LayerSpec {
  LayerKind kind = LayerKind::conv2d;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
};

/// Output shape of `spec` applied to an input of `in`; DimensionError if the
/// input is incompatible.
Shape infer_output_shape(const LayerSpec& spec, const Shape& in);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel, ConvGeometry g,
         Rng& rng);

  Tensor forward(const Tensor& x, const StepContext& ctx);
  /// Accumulates into weight().grad; returns the input gradient unless
  /// `need_input_grad` is false (then an empty tensor).
  Tensor backward(const Tensor& g_y, const StepContext& ctx, bool need_input_grad = true);

  Param& weight() { return weight_; }
  const Param& weight() const { return weight_; }
  ConvGeometry geometry() const { return geom_; }
  void clear_cache() { cache_.reset(); }

 private:
  struct Cache {
    Tensor x;  // as multiplied (quantized when the step is)
    Tensor w;
  };
  std::string name_;
  Param weight_;
  ConvGeometry geom_;
  std::optional<Cache> cache_;
};

class BatchNorm2d {
 public:
  static constexpr double kMomentum = 0.9;
  static constexpr double kEps = 1e-5;

  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, std::size_t channels);

  Tensor forward(const Tensor& x, const StepContext& ctx);
  Tensor backward(const Tensor& g_y, const StepContext& ctx);

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  const std::vector<double>& running_mean() const { return running_mean_; }
  const std::vector<double>& running_var() const { return running_var_; }
  void reset_running_stats();
  void clear_cache() { cache_.reset(); }

 private:
  Param gamma_;
  Param beta_;
  std::vector<double> running_mean_;
  std::vector<double> running_var_;
  std::size_t recalibration_batches_ = 0;
  std::optional<BatchNormCache> cache_;
};

class Dense {
 public:
  Dense() = default;
  Dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x, const StepContext& ctx);
  Tensor backward(const Tensor& g_y, const StepContext& ctx, bool need_input_grad = true);

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  void clear_cache() { cache_.reset(); }

 private:
  struct Cache {
    Tensor x;
    Tensor w;
  };
  std::string name_;
  Param weight_;
  Param bias_;
  std::optional<Cache> cache_;
};

/// out = x + F(x) with F = conv-bn-relu-conv-bn, or out = x when the gate
/// skips the block (no compute, no gradient, no parameter or statistics
/// update).
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, std::size_t index, std::size_t channels,
                std::size_t kernel, Rng& rng);

  Tensor forward(const Tensor& x, const GateDecision& gate, const StepContext& ctx);

  struct Backward {
    Tensor g_x;
    /// <g_out, F(x)>: derivative of the loss w.r.t. the branch scale. Zero
    /// when the block was skipped.
    double g_scale = 0.0;
  };
  Backward backward(const Tensor& g_out, const StepContext& ctx);

  bool executed() const { return executed_; }
  std::size_t index() const { return index_; }
  LayerSpec spec() const;
  std::vector<Param*> parameters();
  void set_active(bool active);

  /// FLOPs one executed forward pass charges at input shape `x`.
  std::uint64_t forward_flops(const Shape& x) const;

  Conv2d& conv1() { return conv1_; }
  Conv2d& conv2() { return conv2_; }
  BatchNorm2d& bn1() { return bn1_; }
  BatchNorm2d& bn2() { return bn2_; }

 private:
  std::size_t index_ = 0;
  std::size_t channels_ = 0;
  Conv2d conv1_;
  BatchNorm2d bn1_;
  Conv2d conv2_;
  BatchNorm2d bn2_;

  bool executed_ = false;
  double scale_ = 1.0;
  Tensor pre_relu_;
  Tensor branch_;
};

}  // namespace e2t
