#include "e2t/layers.hpp"

#include <cmath>

#include "e2t/errors.hpp"

namespace e2t {

Tensor ExactWeightGrad::compute(const WeightGradRequest& req, const PrecisionConfig& precision,
                                EnergyLedger* ledger) {
  OpMeter{ledger, Phase::weight_grad, precision.forward_bits(), precision.backward_bits()}.macs(req.macs);
  return req.inner_product(req.x, req.g_y);
}

namespace {

ExactWeightGrad& exact_engine() {
  static ExactWeightGrad engine;
  return engine;
}

WeightGradEngine& engine_of(const StepContext& ctx) {
  return ctx.weight_grad ? *ctx.weight_grad : exact_engine();
}

Tensor he_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor t(shape);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.normal(0.0, std);
  return t;
}

Tensor as_multiplied(const Tensor& t, const StepContext& ctx, int bits) {
  if (!ctx.precision.quantized) return t;
  return quantize(t, FixedPointFormat(bits), dynamic_scale(t)).values;
}

}  // namespace

Shape infer_output_shape(const LayerSpec& spec, const Shape& in) {
  switch (spec.kind) {
    case LayerKind::conv2d: {
      if (in.size() != 4) throw DimensionError("conv2d expects a rank-4 input, got " + shape_str(in));
      if (in[1] != spec.in_channels) throw DimensionError("conv2d: channel axis (1) mismatch");
      return {in[0], spec.out_channels, conv_out_size(in[2], spec.kernel, spec.stride, spec.pad),
              conv_out_size(in[3], spec.kernel, spec.stride, spec.pad)};
    }
    case LayerKind::dense:
      if (in.size() != 2 || in[1] != spec.in_channels) {
        throw DimensionError("dense: feature axis (1) mismatch for input " + shape_str(in));
      }
      return {in[0], spec.out_channels};
    case LayerKind::batchnorm:
    case LayerKind::relu:
      return in;
    case LayerKind::global_avg_pool:
      if (in.size() != 4) throw DimensionError("global_avg_pool expects a rank-4 input");
      return {in[0], in[1]};
    case LayerKind::residual_block: {
      if (in.size() != 4 || in[1] != spec.in_channels || spec.in_channels != spec.out_channels) {
        throw DimensionError("residual block: input " + shape_str(in) + " does not match block channels");
      }
      LayerSpec conv{LayerKind::conv2d, spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.pad};
      Shape out = infer_output_shape(conv, infer_output_shape(conv, in));
      if (out != in) throw DimensionError("residual block: branch output " + shape_str(out) + " != input " + shape_str(in));
      return out;
    }
  }
  throw DimensionError("unknown layer kind");
}

// ---- Conv2d ----------------------------------------------------------------

Conv2d::Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel,
               ConvGeometry g, Rng& rng)
    : name_(std::move(name)),
      weight_(name_ + ".weight", ParamKind::conv_weight,
              he_normal({cout, cin, kernel, kernel}, cin * kernel * kernel, rng)),
      geom_(g) {}

Tensor Conv2d::forward(const Tensor& x, const StepContext& ctx) {
  const int bits = ctx.precision.forward_bits();
  Tensor xq = as_multiplied(x, ctx, ctx.precision.act_bits);
  Tensor wq = as_multiplied(weight_.value, ctx, ctx.precision.act_bits);
  Tensor y = conv2d_forward(xq, wq, geom_, ctx.meter(Phase::forward, bits, bits));
  if (ctx.mode == Mode::train) {
    cache_ = Cache{std::move(xq), std::move(wq)};
  } else {
    cache_.reset();
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& g_y, const StepContext& ctx, bool need_input_grad) {
  if (!cache_) throw StateError("conv2d '" + name_ + "': backward without cached forward activations");
  const Tensor gq = as_multiplied(g_y, ctx, ctx.precision.grad_bits);
  Tensor g_x;
  if (need_input_grad) {
    g_x = conv2d_input_grad(gq, cache_->w, cache_->x.shape(), geom_,
                            ctx.meter(Phase::backward, ctx.precision.forward_bits(),
                                      ctx.precision.backward_bits()));
  }
  const Shape w_shape = weight_.value.shape();
  const ConvGeometry geom = geom_;
  WeightGradRequest req{name_,
                        LayerKind::conv2d,
                        geom_,
                        cache_->x,
                        gq,
                        w_shape,
                        conv2d_macs(cache_->x.shape(), w_shape, geom_),
                        [w_shape, geom](const Tensor& x, const Tensor& g) {
                          return conv2d_weight_grad(x, g, w_shape, geom);
                        }};
  weight_.grad += engine_of(ctx).compute(req, ctx.precision, ctx.ledger);
  return g_x;
}

// ---- BatchNorm2d -------------------------------------------------------------

BatchNorm2d::BatchNorm2d(const std::string& name, std::size_t channels)
    : gamma_(name + ".gamma", ParamKind::bn_gamma, Tensor({channels}, 1.0)),
      beta_(name + ".beta", ParamKind::bn_beta, Tensor({channels}, 0.0)),
      running_mean_(channels, 0.0),
      running_var_(channels, 1.0) {}

void BatchNorm2d::reset_running_stats() {
  std::fill(running_mean_.begin(), running_mean_.end(), 0.0);
  std::fill(running_var_.begin(), running_var_.end(), 1.0);
  recalibration_batches_ = 0;
}

Tensor BatchNorm2d::forward(const Tensor& x, const StepContext& ctx) {
  const int bits = ctx.precision.forward_bits();
  if (ctx.mode == Mode::eval) {
    cache_.reset();
    return batchnorm_forward_eval(x, gamma_.value, beta_.value, running_mean_, running_var_, kEps,
                                  ctx.meter(Phase::forward, bits, bits));
  }
  BatchNormCache cache;
  BatchNormStats stats;
  Tensor y = batchnorm_forward_train(x, gamma_.value, beta_.value, kEps, &cache, &stats,
                                     ctx.meter(Phase::forward, bits, bits));
  const double m = static_cast<double>(x.size() / x.dim(1));
  const double unbias = m > 1.0 ? m / (m - 1.0) : 1.0;
  if (ctx.bn_recalibrate) {
    const double k = static_cast<double>(++recalibration_batches_);
    for (std::size_t c = 0; c < running_mean_.size(); ++c) {
      running_mean_[c] += (stats.mean[c] - running_mean_[c]) / k;
      running_var_[c] += (stats.var[c] * unbias - running_var_[c]) / k;
    }
  } else {
    for (std::size_t c = 0; c < running_mean_.size(); ++c) {
      running_mean_[c] = kMomentum * running_mean_[c] + (1.0 - kMomentum) * stats.mean[c];
      running_var_[c] = kMomentum * running_var_[c] + (1.0 - kMomentum) * stats.var[c] * unbias;
    }
  }
  cache_ = std::move(cache);
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& g_y, const StepContext& ctx) {
  if (!cache_) throw StateError("batchnorm '" + gamma_.name + "': backward without cached forward");
  const int bits = ctx.precision.backward_bits();
  auto b = batchnorm_backward(g_y, gamma_.value, *cache_, ctx.meter(Phase::backward, bits, bits));
  gamma_.grad += b.g_params[0];
  beta_.grad += b.g_params[1];
  return std::move(b.g_x);
}

// ---- Dense -------------------------------------------------------------------

Dense::Dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
    : name_(name),
      weight_(name + ".weight", ParamKind::dense_weight, he_normal({out, in}, in, rng)),
      bias_(name + ".bias", ParamKind::dense_bias, Tensor({out})) {}

Tensor Dense::forward(const Tensor& x, const StepContext& ctx) {
  const int bits = ctx.precision.forward_bits();
  Tensor xq = as_multiplied(x, ctx, ctx.precision.act_bits);
  Tensor wq = as_multiplied(weight_.value, ctx, ctx.precision.act_bits);
  Tensor y = dense_forward(xq, wq, &bias_.value, ctx.meter(Phase::forward, bits, bits));
  if (ctx.mode == Mode::train) {
    cache_ = Cache{std::move(xq), std::move(wq)};
  } else {
    cache_.reset();
  }
  return y;
}

Tensor Dense::backward(const Tensor& g_y, const StepContext& ctx, bool need_input_grad) {
  if (!cache_) throw StateError("dense '" + name_ + "': backward without cached forward activations");
  const Tensor gq = as_multiplied(g_y, ctx, ctx.precision.grad_bits);
  const int fb = ctx.precision.forward_bits(), bb = ctx.precision.backward_bits();
  Tensor g_x;
  if (need_input_grad) g_x = dense_input_grad(gq, cache_->w, ctx.meter(Phase::backward, fb, bb));
  WeightGradRequest req{name_,
                        LayerKind::dense,
                        {},
                        cache_->x,
                        gq,
                        weight_.value.shape(),
                        static_cast<std::uint64_t>(gq.dim(0)) * weight_.value.size(),
                        [](const Tensor& x, const Tensor& g) { return dense_weight_grad(x, g); }};
  weight_.grad += engine_of(ctx).compute(req, ctx.precision, ctx.ledger);
  bias_.grad += dense_bias_grad(gq, ctx.meter(Phase::backward, bb, bb));
  return g_x;
}

// ---- ResidualBlock -------------------------------------------------------------

ResidualBlock::ResidualBlock(const std::string& name, std::size_t index, std::size_t channels,
                             std::size_t kernel, Rng& rng)
    : index_(index),
      channels_(channels),
      conv1_(name + ".conv1", channels, channels, kernel, {1, kernel / 2}, rng),
      bn1_(name + ".bn1", channels),
      conv2_(name + ".conv2", channels, channels, kernel, {1, kernel / 2}, rng),
      bn2_(name + ".bn2", channels) {}

LayerSpec ResidualBlock::spec() const {
  const auto k = conv1_.weight().value.dim(2);
  return {LayerKind::residual_block, channels_, channels_, k, 1, k / 2};
}

std::vector<Param*> ResidualBlock::parameters() {
  return {&conv1_.weight(), &bn1_.gamma(), &bn1_.beta(), &conv2_.weight(), &bn2_.gamma(), &bn2_.beta()};
}

void ResidualBlock::set_active(bool active) {
  for (Param* p : parameters()) p->active = active;
}

std::uint64_t ResidualBlock::forward_flops(const Shape& x) const {
  const auto macs = conv2d_macs(x, conv1_.weight().value.shape(), conv1_.geometry()) +
                    conv2d_macs(x, conv2_.weight().value.shape(), conv2_.geometry());
  const auto n = static_cast<std::uint64_t>(shape_numel(x));
  // 2 FLOPs per MAC; two batchnorms at 8 FLOPs/element, relu and the
  // shortcut add at 1 each.
  return 2 * macs + 18 * n;
}

Tensor ResidualBlock::forward(const Tensor& x, const GateDecision& gate, const StepContext& ctx) {
  if (gate.block_index != index_) {
    throw ConfigError("gate decision for block " + std::to_string(gate.block_index) +
                      " applied to block " + std::to_string(index_));
  }
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw DimensionError("residual block " + std::to_string(index_) + ": channel axis (1) of " +
                         shape_str(x.shape()) + " != " + std::to_string(channels_));
  }
  executed_ = gate.keep;
  if (!gate.keep) {
    set_active(false);
    conv1_.clear_cache();
    conv2_.clear_cache();
    bn1_.clear_cache();
    bn2_.clear_cache();
    branch_ = Tensor();
    pre_relu_ = Tensor();
    return x;
  }
  set_active(true);
  scale_ = ctx.gate_mode == GateMode::soft ? gate.prob : 1.0;
  const int bits = ctx.precision.forward_bits();
  Tensor h = bn1_.forward(conv1_.forward(x, ctx), ctx);
  Tensor r = relu_forward(h, ctx.meter(Phase::forward, bits, bits));
  if (ctx.relu_signature) relu_signature(h, *ctx.relu_signature);
  Tensor f = bn2_.forward(conv2_.forward(r, ctx), ctx);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += scale_ * f[i];
  ctx.meter(Phase::forward, bits, bits).elementwise(0, out.size(), out.size());
  if (ctx.mode == Mode::train) {
    pre_relu_ = std::move(h);
    branch_ = std::move(f);
  }
  return out;
}

ResidualBlock::Backward ResidualBlock::backward(const Tensor& g_out, const StepContext& ctx) {
  if (!executed_) return {g_out, 0.0};
  if (branch_.empty()) throw StateError("residual block: backward without cached forward");
  Backward r;
  r.g_scale = dot(g_out, branch_);
  Tensor g = g_out * scale_;
  g = conv2_.backward(bn2_.backward(g, ctx), ctx);
  const int bits = ctx.precision.backward_bits();
  g = relu_backward(pre_relu_, g, ctx.meter(Phase::backward, bits, bits));
  g = conv1_.backward(bn1_.backward(g, ctx), ctx);
  g += g_out;
  ctx.meter(Phase::backward, bits, bits).elementwise(0, g.size(), g.size());
  r.g_x = std::move(g);
  return r;
}

}  // namespace e2t
