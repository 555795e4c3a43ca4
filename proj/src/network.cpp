#include "e2t/network.hpp"

#include "e2t/errors.hpp"

namespace e2t {

Network::Network(const NetworkSpec& spec, Rng& rng) : spec_(spec) {
  if (spec.blocks == 0 || spec.width == 0 || spec.classes < 2 || spec.in_channels == 0) {
    throw ConfigError("network: blocks, width and in_channels must be positive and classes >= 2");
  }
  Rng init = rng.fork("network");
  const std::size_t k = spec.kernel;
  stem_conv_ = Conv2d("stem.conv", spec.in_channels, spec.width, k, {spec.stem_stride, k / 2}, init);
  stem_bn_ = BatchNorm2d("stem.bn", spec.width);
  for (std::size_t b = 0; b < spec.blocks; ++b) {
    blocks_.emplace_back("block" + std::to_string(b), b, spec.width, k, init);
  }
  head_ = Dense("head", spec.width, spec.classes, init);
  if (spec.gated) {
    Rng gate_rng = rng.fork("gate");
    gate_.emplace(spec.width, gate_rng, spec.gate_head_bias, spec.gate_pool_stride);
  }
}

ForwardResult Network::forward(const Tensor& x, const StepContext& ctx) {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.image_size ||
      x.dim(3) != spec_.image_size) {
    throw DimensionError("network input " + shape_str(x.shape()) + " does not match " +
                         std::to_string(spec_.in_channels) + "x" + std::to_string(spec_.image_size) + "x" +
                         std::to_string(spec_.image_size));
  }
  if (ctx.forced_mask && ctx.forced_mask->size() != blocks_.size()) {
    throw ConfigError("network: forced mask has " + std::to_string(ctx.forced_mask->size()) + " bits for " +
                      std::to_string(blocks_.size()) + " blocks");
  }
  batch_ = x.dim(0);
  // head-only fine-tuning runs the frozen body in inference mode
  StepContext body = ctx;
  if (ctx.head_only) body.mode = Mode::eval;
  const int bits = ctx.precision.forward_bits();

  Tensor h = stem_bn_.forward(stem_conv_.forward(x, body), body);
  Tensor a = relu_forward(h, body.meter(Phase::forward, bits, bits));
  if (ctx.relu_signature) relu_signature(h, *ctx.relu_signature);
  if (body.mode == Mode::train) stem_pre_relu_ = std::move(h);

  gate_driven_ = gate_.has_value() && !ctx.forced_mask;
  if (gate_) gate_->reset();
  decisions_.clear();
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    GateDecision d{1.0, true, b};
    if (ctx.forced_mask) {
      d.keep = (*ctx.forced_mask)[b];
      d.prob = d.keep ? 1.0 : 0.0;
    } else if (gate_) {
      d = gate_->step(a, b, body);
    }
    decisions_.push_back(d);
    a = blocks_[b].forward(a, d, body);
  }
  pooled_from_ = a.shape();
  Tensor pooled = global_avg_pool_forward(a, body.meter(Phase::forward, bits, bits));
  ForwardResult r;
  r.logits = head_.forward(pooled, ctx);
  r.decisions = decisions_;
  r.mask = select_layers(decisions_, blocks_.size());
  return r;
}

void Network::backward(const Tensor& g_logits, const StepContext& ctx) {
  const int bits = ctx.precision.backward_bits();
  if (ctx.head_only) {
    head_.backward(g_logits, ctx, false);
    return;
  }
  Tensor g = head_.backward(g_logits, ctx);
  g = global_avg_pool_backward(g, pooled_from_, ctx.meter(Phase::backward, bits, bits));
  const auto shares = complexity_shares(block_flops(batch_));
  gate_prob_grads_.assign(blocks_.size(), 0.0);
  for (std::size_t i = blocks_.size(); i-- > 0;) {
    auto r = blocks_[i].backward(g, ctx);
    g = std::move(r.g_x);
    if (gate_driven_ && ctx.mode == Mode::train) {
      gate_prob_grads_[i] = r.g_scale + ctx.alpha * shares[i];
      gate_->backward_step(i, gate_prob_grads_[i], ctx, g);
    }
  }
  g = relu_backward(stem_pre_relu_, g, ctx.meter(Phase::backward, bits, bits));
  g = stem_bn_.backward(g, ctx);
  stem_conv_.backward(g, ctx, false);
}

std::vector<Param*> Network::parameters() {
  std::vector<Param*> ps{&stem_conv_.weight(), &stem_bn_.gamma(), &stem_bn_.beta()};
  for (auto& b : blocks_)
    for (Param* p : b.parameters()) ps.push_back(p);
  ps.push_back(&head_.weight());
  ps.push_back(&head_.bias());
  return ps;
}

std::vector<Param*> Network::gate_parameters() {
  if (!gate_) return {};
  return gate_->parameters();
}

std::vector<Param*> Network::head_parameters() { return {&head_.weight(), &head_.bias()}; }

void Network::zero_grad() {
  for (Param* p : parameters()) p->grad.fill(0.0);
  for (Param* p : gate_parameters()) p->grad.fill(0.0);
}

Shape Network::block_input_shape(std::size_t n) const {
  const std::size_t s = conv_out_size(spec_.image_size, spec_.kernel, spec_.stem_stride, spec_.kernel / 2);
  return {n, spec_.width, s, s};
}

std::vector<std::uint64_t> Network::block_flops(std::size_t n) const {
  std::vector<std::uint64_t> f;
  const Shape s = block_input_shape(n);
  for (const auto& b : blocks_) f.push_back(b.forward_flops(s));
  return f;
}

std::uint64_t Network::base_forward_flops(std::size_t n) const {
  const Shape in{n, spec_.in_channels, spec_.image_size, spec_.image_size};
  const Shape s = block_input_shape(n);
  const auto numel = static_cast<std::uint64_t>(shape_numel(s));
  // stem conv, batchnorm (8/element), relu
  std::uint64_t total = 2 * conv2d_macs(in, stem_conv_.weight().value.shape(), stem_conv_.geometry()) + 9 * numel;
  for (auto f : block_flops(n)) total += f;
  // pooling adds and divides, dense MACs and bias adds
  total += numel + n * spec_.width + 2 * n * spec_.width * spec_.classes + n * spec_.classes;
  return total;
}

void Network::reset_bn() {
  stem_bn_.reset_running_stats();
  for (auto& b : blocks_) {
    b.bn1().reset_running_stats();
    b.bn2().reset_running_stats();
  }
}

}  // namespace e2t
