#include "e2t/gate.hpp"

#include <cmath>
#include <numeric>

#include "e2t/errors.hpp"

namespace e2t {

namespace {

constexpr std::size_t H = GateNetwork::kHidden;

// projection, LSTM matmuls, gate nonlinearities, head and sigmoid
std::uint64_t recurrent_flops(std::size_t channels) {
  return 2 * H * channels + H + 2 * (4 * H) * (2 * H) + 4 * H + 8 * H + 2 * H + 4;
}

std::uint64_t pooled_count(const Shape& s, std::size_t stride) {
  return s[0] * ((s[2] + stride - 1) / stride) * ((s[3] + stride - 1) / stride);
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

Tensor uniform_init(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor t(shape);
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * a;
  return t;
}

// y += W x for row-major W (rows x cols)
void matvec_acc(const Tensor& w, const std::vector<double>& x, std::vector<double>& y) {
  const std::size_t rows = y.size(), cols = x.size();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += w[r * cols + c] * x[c];
    y[r] += s;
  }
}

// dx += W^T dy ; dW += dy x^T
void matvec_backward(const Tensor& w, Tensor& dw, const std::vector<double>& x,
                     const std::vector<double>& dy, std::vector<double>* dx) {
  const std::size_t rows = dy.size(), cols = x.size();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      dw[r * cols + c] += dy[r] * x[c];
      if (dx) (*dx)[c] += w[r * cols + c] * dy[r];
    }
  }
}

}  // namespace

GateNetwork::GateNetwork(std::size_t channels, Rng& rng, double head_bias, std::size_t pool_stride)
    : channels_(channels),
      pool_stride_(pool_stride),
      proj_w_("gate.proj.weight", ParamKind::gate, uniform_init({H, channels}, channels, rng)),
      proj_b_("gate.proj.bias", ParamKind::gate, Tensor({H})),
      lstm_wx_("gate.lstm.wx", ParamKind::gate, uniform_init({4 * H, H}, H, rng)),
      lstm_wh_("gate.lstm.wh", ParamKind::gate, uniform_init({4 * H, H}, H, rng)),
      lstm_b_("gate.lstm.bias", ParamKind::gate, Tensor({4 * H})),
      head_w_("gate.head.weight", ParamKind::gate, Tensor({1, H})),
      head_b_("gate.head.bias", ParamKind::gate, Tensor({1}, head_bias)) {
  if (channels == 0) throw ConfigError("gate: channels must be positive");
  if (pool_stride == 0) throw ConfigError("gate: pool stride must be positive");
  reset();
}

void GateNetwork::reset() {
  h_.assign(H, 0.0);
  c_.assign(H, 0.0);
  steps_.clear();
  dh_next_.assign(H, 0.0);
  dc_next_.assign(H, 0.0);
}

std::vector<Param*> GateNetwork::parameters() {
  return {&proj_w_, &proj_b_, &lstm_wx_, &lstm_wh_, &lstm_b_, &head_w_, &head_b_};
}

std::uint64_t GateNetwork::step_flops(const Shape& s) const {
  return (pooled_count(s, pool_stride_) + 1) * channels_ + recurrent_flops(channels_);
}

std::vector<double> GateNetwork::pool(const Tensor& x, const StepContext& ctx) const {
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw ConfigError("gate: block input " + shape_str(x.shape()) + " does not match gate channels " +
                      std::to_string(channels_));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), hh = x.dim(2), ww = x.dim(3);
  std::vector<double> feat(c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t y = 0; y < hh; y += pool_stride_)
        for (std::size_t xx = 0; xx < ww; xx += pool_stride_) s += x.at(i, ch, y, xx);
      feat[ch] += s;
    }
  }
  const std::size_t count = pooled_count(x.shape(), pool_stride_);
  for (double& v : feat) v /= static_cast<double>(count);
  ctx.meter(Phase::gate, 32, 32).elementwise(c, count * c, count * c);
  return feat;
}

GateDecision GateNetwork::step(const Tensor& block_input, std::size_t block_index, const StepContext& ctx) {
  StepCache s;
  s.block_index = block_index;
  s.input_shape = block_input.shape();
  s.feat = pool(block_input, ctx);
  s.z = proj_b_.value.values();
  matvec_acc(proj_w_.value, s.feat, s.z);

  std::vector<double> a = lstm_b_.value.values();
  matvec_acc(lstm_wx_.value, s.z, a);
  matvec_acc(lstm_wh_.value, h_, a);
  s.h_prev = h_;
  s.c_prev = c_;
  s.i.resize(H), s.f.resize(H), s.g.resize(H), s.o.resize(H), s.c.resize(H), s.tanh_c.resize(H), s.h.resize(H);
  for (std::size_t k = 0; k < H; ++k) {
    s.i[k] = sigmoid(a[k]);
    s.f[k] = sigmoid(a[H + k]);
    s.g[k] = std::tanh(a[2 * H + k]);
    s.o[k] = sigmoid(a[3 * H + k]);
    s.c[k] = s.f[k] * s.c_prev[k] + s.i[k] * s.g[k];
    s.tanh_c[k] = std::tanh(s.c[k]);
    s.h[k] = s.o[k] * s.tanh_c[k];
  }
  double logit = head_b_.value[0];
  for (std::size_t k = 0; k < H; ++k) logit += head_w_.value[k] * s.h[k];
  s.prob = sigmoid(logit);
  h_ = s.h;
  c_ = s.c;

  const std::uint64_t rf = recurrent_flops(channels_);
  ctx.meter(Phase::gate, 32, 32).elementwise(rf / 2, rf - rf / 2, rf / 2);

  GateDecision d{s.prob, true, block_index};
  switch (ctx.gate_mode) {
    case GateMode::sample:
      if (!ctx.gate_rng) throw StateError("gate: sampling mode needs a random stream");
      d.keep = ctx.gate_rng->bernoulli(s.prob);
      break;
    case GateMode::deterministic:
      d.keep = s.prob >= ctx.gate_threshold;
      break;
    case GateMode::soft:
      d.keep = true;
      break;
  }
  if (ctx.mode == Mode::train) steps_.push_back(std::move(s));
  return d;
}

void GateNetwork::backward_step(std::size_t block_index, double g_prob, const StepContext& ctx, Tensor& g_input) {
  if (steps_.empty()) throw StateError("gate: backward without a cached forward step");
  StepCache s = std::move(steps_.back());
  steps_.pop_back();
  if (s.block_index != block_index) {
    throw StateError("gate: backward for block " + std::to_string(block_index) +
                     " but latest cached step is block " + std::to_string(s.block_index));
  }
  const double g_logit = g_prob * s.prob * (1.0 - s.prob);
  head_b_.grad[0] += g_logit;
  std::vector<double> dh(H);
  for (std::size_t k = 0; k < H; ++k) {
    head_w_.grad[k] += g_logit * s.h[k];
    dh[k] = g_logit * head_w_.value[k] + dh_next_[k];
  }
  std::vector<double> da(4 * H), dc_prev(H);
  for (std::size_t k = 0; k < H; ++k) {
    const double d_o = dh[k] * s.tanh_c[k];
    const double dc = dh[k] * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next_[k];
    da[k] = dc * s.g[k] * s.i[k] * (1.0 - s.i[k]);
    da[H + k] = dc * s.c_prev[k] * s.f[k] * (1.0 - s.f[k]);
    da[2 * H + k] = dc * s.i[k] * (1.0 - s.g[k] * s.g[k]);
    da[3 * H + k] = d_o * s.o[k] * (1.0 - s.o[k]);
    dc_prev[k] = dc * s.f[k];
  }
  for (std::size_t r = 0; r < 4 * H; ++r) lstm_b_.grad[r] += da[r];
  std::vector<double> dz(H, 0.0), dh_prev(H, 0.0);
  matvec_backward(lstm_wx_.value, lstm_wx_.grad, s.z, da, &dz);
  matvec_backward(lstm_wh_.value, lstm_wh_.grad, s.h_prev, da, &dh_prev);
  for (std::size_t k = 0; k < H; ++k) proj_b_.grad[k] += dz[k];
  std::vector<double> dfeat(channels_, 0.0);
  matvec_backward(proj_w_.value, proj_w_.grad, s.feat, dz, &dfeat);
  dh_next_ = std::move(dh_prev);
  dc_next_ = std::move(dc_prev);

  if (g_input.shape() != s.input_shape) {
    throw DimensionError("gate backward: input gradient " + shape_str(g_input.shape()) +
                         " does not match cached input " + shape_str(s.input_shape));
  }
  const std::size_t n = s.input_shape[0], hh = s.input_shape[2], ww = s.input_shape[3];
  const std::size_t count = pooled_count(s.input_shape, pool_stride_);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < channels_; ++ch) {
      const double v = dfeat[ch] / static_cast<double>(count);
      for (std::size_t y = 0; y < hh; y += pool_stride_)
        for (std::size_t xx = 0; xx < ww; xx += pool_stride_) g_input.at(i, ch, y, xx) += v;
    }
  // matmul backward costs twice the forward products
  const std::uint64_t flops = 2 * (2 * H * channels_ + 2 * (4 * H) * (2 * H)) + 20 * H;
  ctx.meter(Phase::gate, 32, 32).elementwise(flops / 2 + channels_, flops / 2 + count * channels_, flops / 2 + count * channels_);
}

std::vector<bool> select_layers(const std::vector<GateDecision>& decisions, std::size_t num_blocks) {
  if (decisions.size() != num_blocks) {
    throw ConfigError("select_layers: " + std::to_string(decisions.size()) + " decisions for " +
                      std::to_string(num_blocks) + " gated blocks");
  }
  std::vector<bool> mask(num_blocks);
  for (std::size_t b = 0; b < num_blocks; ++b) {
    if (decisions[b].block_index != b) throw ConfigError("select_layers: decisions out of block order");
    mask[b] = decisions[b].keep;
  }
  return mask;
}

SluLossParts slu_total_loss(double task_loss, const std::vector<bool>& mask,
                            const std::vector<std::uint64_t>& block_flops, double alpha) {
  if (alpha < 0.0) throw ConfigError("slu: alpha must be >= 0");
  if (mask.size() != block_flops.size()) throw ConfigError("slu: mask and block FLOPs differ in length");
  std::vector<double> probs(mask.size());
  for (std::size_t b = 0; b < mask.size(); ++b) probs[b] = mask[b] ? 1.0 : 0.0;
  return {task_loss, soft_complexity(probs, block_flops), alpha};
}

double soft_complexity(const std::vector<double>& probs, const std::vector<std::uint64_t>& block_flops) {
  if (probs.size() != block_flops.size()) throw ConfigError("slu: probs and block FLOPs differ in length");
  const auto shares = complexity_shares(block_flops);
  double c = 0.0;
  for (std::size_t b = 0; b < probs.size(); ++b) c += probs[b] * shares[b];
  return c;
}

std::vector<double> complexity_shares(const std::vector<std::uint64_t>& block_flops) {
  const double total = static_cast<double>(std::accumulate(block_flops.begin(), block_flops.end(), std::uint64_t{0}));
  std::vector<double> s(block_flops.size(), 0.0);
  if (total == 0.0) return s;
  for (std::size_t b = 0; b < s.size(); ++b) s[b] = static_cast<double>(block_flops[b]) / total;
  return s;
}

}  // namespace e2t
