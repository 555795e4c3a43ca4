#include "e2t/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "e2t/errors.hpp"

namespace e2t {

GradCheckResult finite_difference_check(const std::vector<Param*>& params, const std::function<double()>& loss,
                                        const std::function<void()>& compute_grads, double eps,
                                        std::size_t per_param, Rng& rng,
                                        const std::function<std::uint64_t()>& signature) {
  if (!(eps >= 1e-6 && eps <= 1e-2)) throw ConfigError("finite_difference_check: eps must be in [1e-6, 1e-2]");
  for (Param* p : params) p->grad.fill(0.0);
  compute_grads();
  std::vector<Tensor> analytic;
  for (Param* p : params) analytic.push_back(p->grad);

  std::uint64_t base_sig = 0;
  if (signature) {
    loss();
    base_sig = signature();
  }
  GradCheckResult r;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > per_param) {
      rng.shuffle(idx);
      idx.resize(per_param);
    }
    for (std::size_t i : idx) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = loss();
      const bool up_same = !signature || signature() == base_sig;
      p.value[i] = saved - eps;
      const double down = loss();
      const bool down_same = !signature || signature() == base_sig;
      p.value[i] = saved;
      if (!up_same || !down_same) {
        ++r.skipped_kinks;
        continue;
      }
      const double cd = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-8});
      ++r.checked;
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

double network_loss(Network& net, const Tensor& x, const std::vector<int>& labels, const StepContext& ctx) {
  auto out = net.forward(x, ctx);
  double l = softmax_cross_entropy(out.logits, labels).loss;
  if (net.has_gate() && !ctx.forced_mask && ctx.gate_mode == GateMode::soft) {
    std::vector<double> probs;
    for (const auto& d : out.decisions) probs.push_back(d.prob);
    l += ctx.alpha * soft_complexity(probs, net.block_flops(x.dim(0)));
  }
  return l;
}

GradCheckResult finite_difference_check(Network& net, const Tensor& x, const std::vector<int>& labels,
                                        const StepContext& ctx, double eps, std::size_t per_param, Rng& rng) {
  auto params = net.parameters();
  if (net.has_gate() && !ctx.forced_mask) {
    for (Param* p : net.gate_parameters()) params.push_back(p);
  }
  auto grads = [&] {
    net.zero_grad();
    auto out = net.forward(x, ctx);
    auto loss = softmax_cross_entropy(out.logits, labels);
    net.backward(loss.g_logits, ctx);
  };
  std::uint64_t sig = 0;
  StepContext probe = ctx;
  probe.relu_signature = &sig;
  auto loss = [&] {
    sig = 14695981039346656037ull;
    return network_loss(net, x, labels, probe);
  };
  return finite_difference_check(params, loss, grads, eps, per_param, rng, [&] { return sig; });
}

}  // namespace e2t
