#pragma once

#include <cstdint>
#include <vector>

namespace e2t {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Wilson score interval for k successes in n trials at normal quantile z.
Interval wilson_interval(std::uint64_t k, std::uint64_t n, double z = 1.959963984540054);

/// Normal quantile for a two-sided confidence level (0.95 -> 1.96).
double normal_quantile_two_sided(double level);

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

/// Pearson goodness of fit of observed counts against expected probabilities.
ChiSquareResult chi_square_gof(const std::vector<std::uint64_t>& observed, const std::vector<double>& probs);

struct SpearmanResult {
  double rho = 0.0;
  double t = 0.0;
  double p_one_sided_negative = 1.0;  // H1: rho < 0
  double p_two_sided = 1.0;
};

/// Spearman rank correlation (average ranks for ties) with the Student-t
/// approximation on n - 2 degrees of freedom.
SpearmanResult spearman(const std::vector<double>& x, const std::vector<double>& y);

struct MeanCi {
  double mean = 0.0;
  double half_width = 0.0;
};

/// Sample mean and normal-approximation half width.
MeanCi mean_ci(const std::vector<double>& v, double z = 1.959963984540054);

double median(std::vector<double> v);

}  // namespace e2t
