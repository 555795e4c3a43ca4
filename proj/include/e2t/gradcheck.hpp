#pragma once

#include <functional>
#include <string>
#include <vector>

#include "e2t/network.hpp"

namespace e2t {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // entries whose +-eps probes crossed a ReLU kink
  std::string worst;  // "param[index]" of the largest error
};

/// Compares analytic gradients against central differences.
///
/// `compute_grads` must leave d loss / d param in each Param::grad; `loss`
/// evaluates the scalar loss at the current parameter values. Up to
/// `per_param` entries of each parameter are sampled. The error per entry is
/// |analytic - cd| / max(|analytic|, |cd|, 1e-8). ConfigError unless eps is
/// in [1e-6, 1e-2].
///
/// When `signature` is given it must return a hash of the piecewise-linear
/// branch taken by the latest loss evaluation; entries whose probes land on a
/// different branch than the unperturbed point are skipped, since a central
/// difference across a kink does not estimate the derivative.
GradCheckResult finite_difference_check(const std::vector<Param*>& params, const std::function<double()>& loss,
                                        const std::function<void()>& compute_grads, double eps,
                                        std::size_t per_param, Rng& rng,
                                        const std::function<std::uint64_t()>& signature = {});

/// Softmax cross-entropy of `net` on (x, labels) under `ctx`, plus
/// ctx.alpha times the soft complexity when the gate runs in soft mode.
double network_loss(Network& net, const Tensor& x, const std::vector<int>& labels, const StepContext& ctx);

/// Checks every parameter of `net` (gate parameters included when the gate
/// drives the forward pass) on one batch.
GradCheckResult finite_difference_check(Network& net, const Tensor& x, const std::vector<int>& labels,
                                        const StepContext& ctx, double eps, std::size_t per_param, Rng& rng);

}  // namespace e2t
