#pragma once

#include "e2t/tensor.hpp"

namespace e2t {

/// Symmetric B-bit fixed point on [-R, R) with step R * 2^-(B-1).
struct FixedPointFormat {
  int bits = 8;
  double range_max = 1.0;

  FixedPointFormat() = default;
  /// Throws ConfigError unless 1 <= bits <= 32 and range_max > 0.
  FixedPointFormat(int bits, double range_max = 1.0);

  double step() const;
  /// Largest positive integer level, 2^(B-1) - 1.
  long long max_level() const;
  long long min_level() const { return -max_level() - 1; }

  friend bool operator==(const FixedPointFormat&, const FixedPointFormat&) = default;
};

/// Values that are integer multiples of format.step() * scale, clipped to
/// [-R*scale, (R-step)*scale].
struct QuantizedTensor {
  Tensor values;
  FixedPointFormat format;
  double scale = 1.0;
};

/// Truncation toward zero onto the format grid, then clipping.
double quantize_value(double x, const FixedPointFormat& fmt, double scale);

/// Throws NumericError on non-finite input and ConfigError on scale <= 0.
QuantizedTensor quantize(const Tensor& x, const FixedPointFormat& fmt, double scale = 1.0);

struct MsbSplit {
  QuantizedTensor msb;
  Tensor residual;  // x - msb.values, exact
};

/// Splits x into its most-significant-bits prefix (truncated to msb_fmt) and
/// the remainder. msb_fmt must be strictly narrower than full_fmt with the
/// same range; otherwise ConfigError.
MsbSplit msb_split(const Tensor& x, const FixedPointFormat& full_fmt,
                   const FixedPointFormat& msb_fmt, double scale = 1.0);

/// Smallest power of two strictly above max|x|; 1 for an all-zero tensor.
double dynamic_scale(const Tensor& x);

}  // namespace e2t
