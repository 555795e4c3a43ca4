#include "e2t/optim.hpp"

#include <algorithm>
#include <cmath>

#include "e2t/errors.hpp"

namespace e2t {

double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void sgd_step(Tensor& w, const Tensor& g, Tensor& velocity, double lr, double momentum, double wd) {
  require_same_shape(w, g, "sgd_step");
  if (velocity.shape() != w.shape()) velocity = Tensor(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    velocity[i] = momentum * velocity[i] + g[i] + wd * w[i];
    w[i] -= lr * velocity[i];
  }
}

void signsgd_step(Tensor& w, const Tensor& g, double lr, double wd) {
  require_same_shape(w, g, "signsgd_step");
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (sgn(g[i]) + wd * w[i]);
}

PsgResult psg_weight_grad(const Tensor& x, const Tensor& g_y, const InnerProduct& inner,
                          const PrecisionConfig& precision, double beta) {
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("psg: beta must lie in (0, 1)");
  const FixedPointFormat fx(precision.act_bits), fx_msb(precision.act_msb_bits);
  const FixedPointFormat fg(precision.grad_bits), fg_msb(precision.grad_msb_bits);
  const double sx = dynamic_scale(x), sg = dynamic_scale(g_y);
  const Tensor xq = quantize(x, fx, sx).values;
  const Tensor gq = quantize(g_y, fg, sg).values;
  const Tensor x_msb = msb_split(xq, fx, fx_msb, sx).msb.values;
  const Tensor g_msb = msb_split(gq, fg, fg_msb, sg).msb.values;

  PsgResult r;
  r.g_w = inner(xq, gq);
  r.g_w_msb = inner(x_msb, g_msb);
  r.tau = beta * r.g_w_msb.max_abs();
  r.signs = Tensor(r.g_w.shape());
  r.stats.total = r.g_w.size();
  for (std::size_t i = 0; i < r.g_w.size(); ++i) {
    const double m = r.g_w_msb[i];
    double s;
    if (std::abs(m) >= r.tau) {
      s = sgn(m);
      ++r.stats.predicted;
    } else {
      s = sgn(r.g_w[i]);
    }
    r.signs[i] = s;
    if (s != sgn(r.g_w[i])) ++r.stats.flips;
  }
  return r;
}

PsgWeightGrad::PsgWeightGrad(double beta) : beta_(beta) {
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("psg: beta must lie in (0, 1)");
}

Tensor PsgWeightGrad::compute(const WeightGradRequest& req, const PrecisionConfig& precision,
                              EnergyLedger* ledger) {
  PsgResult r = psg_weight_grad(req.x, req.g_y, req.inner_product, precision, beta_);
  const std::uint64_t per_entry = req.macs / std::max<std::uint64_t>(r.stats.total, 1);
  OpMeter{ledger, Phase::weight_grad, precision.act_msb_bits, precision.grad_msb_bits}.macs(req.macs);
  OpMeter{ledger, Phase::weight_grad, precision.act_bits, precision.grad_bits}.macs(
      per_entry * (r.stats.total - r.stats.predicted));
  stats_.merge(r.stats);
  tau_[std::string(req.layer)] = r.tau;
  return std::move(r.signs);
}

void swa_update(Tensor& avg, const Tensor& w, std::uint64_t& n) {
  if (n == 0 || avg.shape() != w.shape()) {
    if (n != 0) require_same_shape(avg, w, "swa_update");
    avg = w;
    n = 1;
    return;
  }
  const double k = static_cast<double>(n);
  for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = (avg[i] * k + w[i]) / (k + 1.0);
  ++n;
}

void SwaAverager::update(const std::vector<Param*>& params) {
  for (const Param* p : params) {
    std::uint64_t n = n_;
    swa_update(avg_[p->name], p->value, n);
  }
  ++n_;
}

void SwaAverager::apply(const std::vector<Param*>& params) const {
  if (n_ == 0) throw StateError("swa: no checkpoints averaged");
  for (Param* p : params) {
    auto it = avg_.find(p->name);
    if (it == avg_.end()) throw StateError("swa: no average for parameter '" + p->name + "'");
    p->value = it->second;
  }
}

OptimKind optim_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimKind::sgd;
  if (s == "signsgd") return OptimKind::signsgd;
  if (s == "psg") return OptimKind::psg;
  throw ConfigError("optim.kind must be sgd, signsgd or psg, got '" + s + "'");
}

std::string to_string(OptimKind k) {
  switch (k) {
    case OptimKind::sgd: return "sgd";
    case OptimKind::signsgd: return "signsgd";
    case OptimKind::psg: return "psg";
  }
  return "?";
}

LrSchedule::LrSchedule(double base, std::vector<std::uint64_t> decay_points, double factor)
    : base_(base), points_(std::move(decay_points)), factor_(factor) {
  if (!(base > 0.0)) throw ConfigError("learning rate must be > 0");
  for (std::size_t i = 1; i < points_.size(); ++i) {
    if (points_[i] <= points_[i - 1]) throw ConfigError("lr decay points must be strictly increasing");
  }
}

double LrSchedule::at(std::uint64_t step) const {
  double lr = base_;
  for (auto p : points_) {
    if (step >= p) lr *= factor_;
  }
  return lr;
}

Optimizer::Optimizer(OptimConfig cfg) : cfg_(cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("optim.lr must be > 0");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) throw ConfigError("optim.momentum must be in [0, 1)");
  if (cfg.wd < 0.0) throw ConfigError("optim.wd must be >= 0");
}

void Optimizer::step(const std::vector<Param*>& params, double lr, EnergyLedger* ledger) {
  std::uint64_t touched = 0;
  for (Param* p : params) {
    if (!p->active) continue;
    touched += p->value.size();
    if (cfg_.kind == OptimKind::sgd) {
      sgd_step(p->value, p->grad, velocity_[p->name], lr, cfg_.momentum, cfg_.wd);
    } else {
      signsgd_step(p->value, p->grad, lr, cfg_.wd);
    }
  }
  // sgd: 3 multiplies, 3 adds, loads of w, g, v; sign rules: 2, 2, loads of w, g
  const bool sgd = cfg_.kind == OptimKind::sgd;
  OpMeter{ledger, Phase::update, 32, 32}.elementwise((sgd ? 3 : 2) * touched, (sgd ? 3 : 2) * touched,
                                                     (sgd ? 3 : 2) * touched);
}

}  // namespace e2t
