#pragma once

#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "e2t/context.hpp"
#include "e2t/stats.hpp"

namespace e2t {

enum class EventKind { none, h0, hp, hn };
std::string_view to_string(EventKind e);

/// Sign-prediction failure cases of the predictor branch:
///   h0: g_w = 0 and |g_w_msb| > tau
///   hp: g_w > 0 and g_w_msb < -tau
///   hn: g_w < 0 and g_w_msb > tau
/// ConfigError unless tau > 0.
EventKind classify_event(double g_w, double g_w_msb, double tau);

/// One layer's weight-gradient operands: g_w = g * x^T, i.e. entry (o, i) is
/// the inner product of row o of g (M_out x L) with row i of x (M_in x L).
struct LayerDraw {
  Tensor x;
  Tensor g;
};

/// Operand matrices of a captured weight-gradient request (im2col for conv,
/// transposes for dense).
LayerDraw layer_draw(const WeightGradRequest& req);

class DrawSampler {
 public:
  virtual ~DrawSampler() = default;
  virtual LayerDraw draw(Rng& rng) = 0;
  virtual std::string name() const = 0;
};

/// i.i.d. normal operands.
class GaussianSampler final : public DrawSampler {
 public:
  GaussianSampler(std::size_t m_in, std::size_t m_out, std::size_t length, double sigma_x = 1.0,
                  double sigma_g = 1.0);
  LayerDraw draw(Rng& rng) override;
  std::string name() const override { return "gaussian"; }

 private:
  std::size_t m_in_, m_out_, length_;
  double sigma_x_, sigma_g_;
};

/// Short inner products of coarse integer levels with many zeros, so exact
/// cancellations (g_w = 0) occur and the h0 case is exercised.
class SparseSampler final : public DrawSampler {
 public:
  SparseSampler(std::size_t m_in, std::size_t m_out, std::size_t length = 3, double zero_prob = 0.3);
  LayerDraw draw(Rng& rng) override;
  std::string name() const override { return "sparse"; }

 private:
  std::size_t m_in_, m_out_, length_;
  double zero_prob_;
};

struct Snapshot {
  std::string layer;
  std::uint64_t step = 0;
  LayerDraw draw;
};

/// Replays captured snapshots in order, cycling.
class SnapshotSampler final : public DrawSampler {
 public:
  explicit SnapshotSampler(std::vector<Snapshot> snaps);
  LayerDraw draw(Rng& rng) override;
  std::string name() const override { return "snapshot"; }
  bool empty() const { return snaps_.empty(); }
  std::size_t size() const { return snaps_.size(); }

 private:
  std::vector<Snapshot> snaps_;
  std::size_t next_ = 0;
};

/// Collects operands of chosen layers every k-th step; plug observer() into
/// an ObservedWeightGrad.
class SnapshotRecorder {
 public:
  SnapshotRecorder(std::vector<std::string> layers, std::uint64_t every_k);
  ObservedWeightGrad::Observer observer();
  void set_step(std::uint64_t step) { step_ = step; }
  const std::vector<Snapshot>& snapshots() const { return snaps_; }
  std::vector<Snapshot> take() { return std::move(snaps_); }

 private:
  std::vector<std::string> layers_;
  std::uint64_t every_k_;
  std::uint64_t step_ = 0;
  std::vector<Snapshot> snaps_;
};

/// Binary snapshot files; FormatError naming the file and snapshot on
/// malformed input or I/O failure.
void write_snapshots(const std::string& path, const std::vector<Snapshot>& snaps);
std::vector<Snapshot> read_snapshots(const std::string& path);

struct VerifyConfig {
  int act_bits = 8;
  int grad_bits = 16;
  int act_msb_bits = 4;
  int grad_msb_bits = 10;
  double beta = 0.05;
  double tau = 0.0;  // > 0: fixed threshold in normalised units instead of beta
  std::uint64_t n_samples = 100000;
  double confidence = 0.95;
};

struct BoundEstimate {
  std::uint64_t samples = 0;
  std::uint64_t h0 = 0, hp = 0, hn = 0;
  std::uint64_t skipped_draws = 0;  // draws whose threshold was zero
  bool degenerate = false;          // no usable draw at all
  double rate = 0.0;
  Interval rate_ci;
  double predicted_fraction = 0.0;
  double mean_tau = 0.0;  // normalised units
  double delta_x = 0.0, delta_g = 0.0;
  double e1 = 0.0;
  double e2 = 0.0;          // h0 term weighted by ||x||^2
  double e2_literal = 0.0;  // h0 term weighted by ||g_y||^2, as printed
  double bound = 0.0, bound_ci = 0.0;
  double bound_literal = 0.0, bound_literal_ci = 0.0;

  std::uint64_t failures() const { return h0 + hp + hn; }
};

/// Monte-Carlo estimate of the predictor failure rate and of the Chebyshev
/// bound Delta_x^2 E1 + Delta_g^2 E2 over at least cfg.n_samples gradient
/// entries. Operands are normalised by their dynamic scales and truncated to
/// the full widths; their MSB prefixes give g_w_msb. Per entry the
/// expectation terms are
///   g_w = 0:  S / (12 tau^2)
///   g_w != 0: S / (24 (|g_w| + tau)^2)
/// with S = ||g row||^2 for E1 and ||x row||^2 for E2.
BoundEstimate monte_carlo_failure_rate(DrawSampler& sampler, const VerifyConfig& cfg, Rng& rng);

void write_bound_csv_header(std::ostream& out);
void write_bound_csv_row(std::ostream& out, const std::string& sampler, const VerifyConfig& cfg,
                         const BoundEstimate& b);

}  // namespace e2t
