#include "e2t/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "e2t/errors.hpp"

namespace e2t {

FixedPointFormat::FixedPointFormat(int b, double r) : bits(b), range_max(r) {
  if (bits < 1 || bits > 32) throw ConfigError("fixed-point bits must be in [1, 32]");
  if (!(range_max > 0.0) || !std::isfinite(range_max)) {
    throw ConfigError("fixed-point range must be positive");
  }
}

double FixedPointFormat::step() const { return range_max * std::ldexp(1.0, -(bits - 1)); }

long long FixedPointFormat::max_level() const { return (1LL << (bits - 1)) - 1; }

double quantize_value(double x, const FixedPointFormat& fmt, double scale) {
  const double unit = fmt.step() * scale;
  double level = std::trunc(x / unit);
  level = std::clamp(level, static_cast<double>(fmt.min_level()),
                     static_cast<double>(fmt.max_level()));
  return level * unit;
}

QuantizedTensor quantize(const Tensor& x, const FixedPointFormat& fmt, double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("quantize: scale must be > 0");
  if (!x.all_finite()) throw NumericError("quantize: non-finite input");
  QuantizedTensor q{x, fmt, scale};
  for (double& v : q.values.data()) v = quantize_value(v, fmt, scale);
  return q;
}

MsbSplit msb_split(const Tensor& x, const FixedPointFormat& full_fmt,
                   const FixedPointFormat& msb_fmt, double scale) {
  if (msb_fmt.bits >= full_fmt.bits) {
    throw ConfigError("msb_split: msb bits (" + std::to_string(msb_fmt.bits) +
                      ") must be below full bits (" + std::to_string(full_fmt.bits) + ")");
  }
  if (msb_fmt.range_max != full_fmt.range_max) {
    throw ConfigError("msb_split: msb and full formats must share a range");
  }
  MsbSplit s{quantize(x, msb_fmt, scale), x};
  s.residual -= s.msb.values;
  return s;
}

double dynamic_scale(const Tensor& x) {
  const double m = x.max_abs();
  if (m == 0.0) return 1.0;
  int exp = 0;
  std::frexp(m, &exp);  // m = f * 2^exp, f in [0.5, 1)
  return std::ldexp(1.0, exp);
}

}  // namespace e2t
