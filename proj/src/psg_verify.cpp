#include "e2t/psg_verify.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "e2t/errors.hpp"

namespace e2t {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapR = Eigen::Map<const MatR>;

Tensor transpose2(const Tensor& t) {
  Tensor out({t.dim(1), t.dim(0)});
  for (std::size_t r = 0; r < t.dim(0); ++r)
    for (std::size_t c = 0; c < t.dim(1); ++c) out[c * t.dim(0) + r] = t[r * t.dim(1) + c];
  return out;
}

// value truncated to `bits` then, if narrower, its `msb_bits` prefix; both in
// units of the dynamic scale
struct Operand {
  Tensor full;
  Tensor msb;
};

Operand normalised(const Tensor& t, int bits, int msb_bits) {
  const double s = dynamic_scale(t);
  const FixedPointFormat f(bits);
  Tensor full = quantize(t, f, s).values;
  full *= 1.0 / s;
  if (msb_bits >= bits) return {full, full};
  Tensor msb = msb_split(full, f, FixedPointFormat(msb_bits)).msb.values;
  return {std::move(full), std::move(msb)};
}

MatR product(const Tensor& g, const Tensor& x) {
  const CMapR G(g.data().data(), static_cast<Eigen::Index>(g.dim(0)), static_cast<Eigen::Index>(g.dim(1)));
  const CMapR X(x.data().data(), static_cast<Eigen::Index>(x.dim(0)), static_cast<Eigen::Index>(x.dim(1)));
  return G * X.transpose();
}

}  // namespace

std::string_view to_string(EventKind e) {
  switch (e) {
    case EventKind::none: return "none";
    case EventKind::h0: return "H0";
    case EventKind::hp: return "Hp";
    case EventKind::hn: return "Hn";
  }
  return "?";
}

EventKind classify_event(double g_w, double g_w_msb, double tau) {
  if (!(tau > 0.0)) throw ConfigError("classify_event: tau must be > 0");
  if (g_w == 0.0 && std::abs(g_w_msb) > tau) return EventKind::h0;
  if (g_w > 0.0 && g_w_msb < -tau) return EventKind::hp;
  if (g_w < 0.0 && g_w_msb > tau) return EventKind::hn;
  return EventKind::none;
}

LayerDraw layer_draw(const WeightGradRequest& req) {
  if (req.kind == LayerKind::conv2d) return {im2col(req.x, req.w_shape, req.geometry), channels_major(req.g_y)};
  if (req.kind == LayerKind::dense) return {transpose2(req.x), transpose2(req.g_y)};
  throw ConfigError("snapshot: layer kind has no weight-gradient inner product");
}

GaussianSampler::GaussianSampler(std::size_t m_in, std::size_t m_out, std::size_t length, double sigma_x,
                                 double sigma_g)
    : m_in_(m_in), m_out_(m_out), length_(length), sigma_x_(sigma_x), sigma_g_(sigma_g) {}

LayerDraw GaussianSampler::draw(Rng& rng) {
  LayerDraw d{Tensor({m_in_, length_}), Tensor({m_out_, length_})};
  for (double& v : d.x.data()) v = rng.normal(0.0, sigma_x_);
  for (double& v : d.g.data()) v = rng.normal(0.0, sigma_g_);
  return d;
}

SparseSampler::SparseSampler(std::size_t m_in, std::size_t m_out, std::size_t length, double zero_prob)
    : m_in_(m_in), m_out_(m_out), length_(length), zero_prob_(zero_prob) {}

LayerDraw SparseSampler::draw(Rng& rng) {
  // x on multiples of 1/16 (odd multiples lose their last bit at 4 bits),
  // g on multiples of 1/8
  LayerDraw d{Tensor({m_in_, length_}), Tensor({m_out_, length_})};
  for (double& v : d.x.data()) v = rng.bernoulli(zero_prob_) ? 0.0 : (static_cast<double>(rng.below(31)) - 15.0) / 16.0;
  for (double& v : d.g.data()) v = rng.bernoulli(zero_prob_) ? 0.0 : (static_cast<double>(rng.below(15)) - 7.0) / 8.0;
  return d;
}

SnapshotSampler::SnapshotSampler(std::vector<Snapshot> snaps) : snaps_(std::move(snaps)) {}

LayerDraw SnapshotSampler::draw(Rng&) {
  if (snaps_.empty()) throw StateError("snapshot sampler is empty");
  const LayerDraw& d = snaps_[next_].draw;
  next_ = (next_ + 1) % snaps_.size();
  return d;
}

SnapshotRecorder::SnapshotRecorder(std::vector<std::string> layers, std::uint64_t every_k)
    : layers_(std::move(layers)), every_k_(every_k) {
  if (every_k == 0) throw ConfigError("snapshot interval must be positive");
}

ObservedWeightGrad::Observer SnapshotRecorder::observer() {
  return [this](const WeightGradRequest& req) {
    if (step_ % every_k_ != 0) return;
    if (std::find(layers_.begin(), layers_.end(), req.layer) == layers_.end()) return;
    snaps_.push_back({std::string(req.layer), step_, layer_draw(req)});
  };
}

namespace {

constexpr char kMagic[8] = {'E', '2', 'T', 'S', 'N', 'A', 'P', '1'};

template <typename T>
void put(std::ostream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& ctx) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError(ctx + ": truncated");
  return v;
}

void put_tensor(std::ostream& o, const Tensor& t) {
  put<std::uint64_t>(o, t.dim(0));
  put<std::uint64_t>(o, t.dim(1));
  o.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor get_tensor(std::istream& in, const std::string& ctx) {
  const auto r = get<std::uint64_t>(in, ctx), c = get<std::uint64_t>(in, ctx);
  if (r == 0 || c == 0 || r * c > (std::uint64_t{1} << 32)) throw FormatError(ctx + ": bad matrix size");
  Tensor t({r, c});
  if (!in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)))) {
    throw FormatError(ctx + ": truncated matrix");
  }
  return t;
}

}  // namespace

void write_snapshots(const std::string& path, const std::vector<Snapshot>& snaps) {
  std::ofstream o(path, std::ios::binary);
  if (!o) throw FormatError(path + ": cannot open for writing");
  o.write(kMagic, sizeof kMagic);
  put<std::uint64_t>(o, snaps.size());
  for (const auto& s : snaps) {
    put<std::uint64_t>(o, s.layer.size());
    o.write(s.layer.data(), static_cast<std::streamsize>(s.layer.size()));
    put<std::uint64_t>(o, s.step);
    put_tensor(o, s.draw.x);
    put_tensor(o, s.draw.g);
    if (!o) throw FormatError(path + ": write failed at layer " + s.layer + " step " + std::to_string(s.step));
  }
}

std::vector<Snapshot> read_snapshots(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw FormatError(path + ": not a snapshot file");
  }
  const auto n = get<std::uint64_t>(in, path);
  std::vector<Snapshot> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string ctx = path + " snapshot " + std::to_string(i);
    Snapshot s;
    const auto len = get<std::uint64_t>(in, ctx);
    if (len > 4096) throw FormatError(ctx + ": bad layer name length");
    s.layer.resize(len);
    if (!in.read(s.layer.data(), static_cast<std::streamsize>(len))) throw FormatError(ctx + ": truncated");
    s.step = get<std::uint64_t>(in, ctx);
    s.draw.x = get_tensor(in, ctx + " (" + s.layer + ", step " + std::to_string(s.step) + ")");
    s.draw.g = get_tensor(in, ctx + " (" + s.layer + ", step " + std::to_string(s.step) + ")");
    if (s.draw.x.dim(1) != s.draw.g.dim(1)) throw FormatError(ctx + ": operand lengths differ");
    out.push_back(std::move(s));
  }
  return out;
}

BoundEstimate monte_carlo_failure_rate(DrawSampler& sampler, const VerifyConfig& cfg, Rng& rng) {
  if (!(cfg.beta > 0.0 && cfg.beta < 1.0) && !(cfg.tau > 0.0)) throw ConfigError("verify: beta must lie in (0, 1)");
  if (cfg.act_msb_bits > cfg.act_bits || cfg.grad_msb_bits > cfg.grad_bits) {
    throw ConfigError("verify: predictor bits exceed full bits");
  }
  BoundEstimate b;
  b.delta_x = std::ldexp(1.0, -(cfg.act_msb_bits - 1));
  b.delta_g = std::ldexp(1.0, -(cfg.grad_msb_bits - 1));
  const double dx2 = b.delta_x * b.delta_x, dg2 = b.delta_g * b.delta_g;
  // running sums of per-entry terms for means and variances
  double s1 = 0, s2 = 0, s2l = 0, sb = 0, sbb = 0, sbl = 0, sbbl = 0, tau_sum = 0;
  std::uint64_t predicted = 0, draws = 0;
  std::uint64_t attempts = 0;
  const std::uint64_t max_attempts = 1000000;

  while (b.samples < cfg.n_samples && attempts < max_attempts) {
    ++attempts;
    LayerDraw d = sampler.draw(rng);
    if (d.x.dim(1) != d.g.dim(1)) throw DimensionError("verify: operand lengths differ (axis 1)");
    const Operand x = normalised(d.x, cfg.act_bits, cfg.act_msb_bits);
    const Operand g = normalised(d.g, cfg.grad_bits, cfg.grad_msb_bits);
    const MatR gw = product(g.full, x.full);
    const MatR gm = product(g.msb, x.msb);
    const double tau = cfg.tau > 0.0 ? cfg.tau : cfg.beta * gm.cwiseAbs().maxCoeff();
    if (!(tau > 0.0)) {
      ++b.skipped_draws;
      if (b.skipped_draws == attempts && attempts >= 1000) break;
      continue;
    }
    ++draws;
    tau_sum += tau;
    const std::size_t m_out = d.g.dim(0), m_in = d.x.dim(0), len = d.x.dim(1);
    std::vector<double> sx(m_in, 0.0), sg(m_out, 0.0);
    for (std::size_t i = 0; i < m_in; ++i)
      for (std::size_t l = 0; l < len; ++l) sx[i] += x.full[i * len + l] * x.full[i * len + l];
    for (std::size_t o = 0; o < m_out; ++o)
      for (std::size_t l = 0; l < len; ++l) sg[o] += g.full[o * len + l] * g.full[o * len + l];
    for (std::size_t o = 0; o < m_out; ++o)
      for (std::size_t i = 0; i < m_in; ++i) {
        const double w = gw(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i));
        const double m = gm(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i));
        switch (classify_event(w, m, tau)) {
          case EventKind::h0: ++b.h0; break;
          case EventKind::hp: ++b.hp; break;
          case EventKind::hn: ++b.hn; break;
          case EventKind::none: break;
        }
        predicted += std::abs(m) >= tau;
        double t1, t2, t2l;
        if (w == 0.0) {
          const double den = 12.0 * tau * tau;
          t1 = sg[o] / den;
          t2 = sx[i] / den;
          t2l = sg[o] / den;
        } else {
          const double den = 24.0 * (std::abs(w) + tau) * (std::abs(w) + tau);
          t1 = sg[o] / den;
          t2 = sx[i] / den;
          t2l = t2;
        }
        s1 += t1;
        s2 += t2;
        s2l += t2l;
        const double v = dx2 * t1 + dg2 * t2, vl = dx2 * t1 + dg2 * t2l;
        sb += v;
        sbb += v * v;
        sbl += vl;
        sbbl += vl * vl;
        ++b.samples;
      }
  }
  if (b.samples == 0) {
    b.degenerate = true;
    b.rate_ci = {0.0, 0.0};
    return b;
  }
  const double n = static_cast<double>(b.samples);
  const double z = normal_quantile_two_sided(cfg.confidence);
  b.rate = static_cast<double>(b.failures()) / n;
  b.rate_ci = wilson_interval(b.failures(), b.samples, z);
  b.predicted_fraction = static_cast<double>(predicted) / n;
  b.mean_tau = tau_sum / static_cast<double>(draws);
  b.e1 = s1 / n;
  b.e2 = s2 / n;
  b.e2_literal = s2l / n;
  b.bound = sb / n;
  b.bound_literal = sbl / n;
  auto half = [&](double sum, double sq) {
    const double mean = sum / n;
    const double var = n > 1 ? std::max(sq / n - mean * mean, 0.0) * n / (n - 1.0) : 0.0;
    return z * std::sqrt(var / n);
  };
  b.bound_ci = half(sb, sbb);
  b.bound_literal_ci = half(sbl, sbbl);
  return b;
}

void write_bound_csv_header(std::ostream& out) {
  out << "bits,tau,rate,rate_ci,bound,bound_ci,grad_bits,sampler,samples,h0,hp,hn,rate_ci_lo,"
         "bound_literal,bound_literal_ci,e1,e2,e2_literal,predicted_fraction,beta\n";
}

void write_bound_csv_row(std::ostream& out, const std::string& sampler, const VerifyConfig& cfg,
                         const BoundEstimate& b) {
  out.precision(10);
  out << cfg.act_msb_bits << ',' << b.mean_tau << ',' << b.rate << ',' << b.rate_ci.hi << ',' << b.bound << ','
      << b.bound_ci << ',' << cfg.grad_msb_bits << ',' << sampler << ',' << b.samples << ',' << b.h0 << ','
      << b.hp << ',' << b.hn << ',' << b.rate_ci.lo << ',' << b.bound_literal << ',' << b.bound_literal_ci << ','
      << b.e1 << ',' << b.e2 << ',' << b.e2_literal << ',' << b.predicted_fraction << ',' << cfg.beta << '\n';
}

}  // namespace e2t
