#pragma once

#include <cstdint>
#include <vector>

#include "e2t/energy.hpp"
#include "e2t/tensor.hpp"

namespace e2t {

/// floor((in + 2*pad - kernel) / stride) + 1; throws DimensionError if the
/// window does not fit.
std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Multiply-accumulates of one conv forward pass.
std::uint64_t conv2d_macs(const Shape& x_shape, const Shape& w_shape, ConvGeometry g);

/// x: N x Cin x H x W, w: Cout x Cin x K x K. Records 2*N*Cout*Cin*K^2*Hout*Wout
/// FLOPs on the meter.
Tensor conv2d_forward(const Tensor& x, const Tensor& w, ConvGeometry g, const OpMeter& meter = {});

/// g_w[co, ci, ky, kx] = sum over batch and output positions of
/// x[n, ci, iy, ix] * g_y[n, co, oy, ox]. The mini-batch inner product that
/// the sign predictor intercepts.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g_y, const Shape& w_shape, ConvGeometry g,
                          const OpMeter& meter = {});

Tensor conv2d_input_grad(const Tensor& g_y, const Tensor& w, const Shape& x_shape, ConvGeometry g,
                         const OpMeter& meter = {});

/// Rows (ci, ky, kx), columns (n, oy, ox): the operand matrix whose product
/// with the output gradient gives the weight gradient.
Tensor im2col(const Tensor& x, const Shape& w_shape, ConvGeometry g);
/// N x C x H x W -> C x (N*H*W).
Tensor channels_major(const Tensor& t);

struct GradBundle {
  Tensor g_x;
  std::vector<Tensor> g_params;
};

/// g_params = {g_w}.
GradBundle conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& g_y, ConvGeometry g,
                           const OpMeter& meter = {});

/// y = x W^T + b with x: N x In, W: Out x In, b: Out (may be empty).
Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor* b, const OpMeter& meter = {});
/// g_w[o, i] = sum_n g_y[n, o] x[n, i]
Tensor dense_weight_grad(const Tensor& x, const Tensor& g_y, const OpMeter& meter = {});
Tensor dense_input_grad(const Tensor& g_y, const Tensor& w, const OpMeter& meter = {});
Tensor dense_bias_grad(const Tensor& g_y, const OpMeter& meter = {});
/// g_params = {g_w, g_b}.
GradBundle dense_backward(const Tensor& x, const Tensor& w, const Tensor& g_y,
                          const OpMeter& meter = {});

Tensor relu_forward(const Tensor& x, const OpMeter& meter = {});
/// Folds the on/off pattern of relu(x) into `hash`.
void relu_signature(const Tensor& x, std::uint64_t& hash);
Tensor relu_backward(const Tensor& x, const Tensor& g_y, const OpMeter& meter = {});

/// N x C x H x W -> N x C
Tensor global_avg_pool_forward(const Tensor& x, const OpMeter& meter = {});
Tensor global_avg_pool_backward(const Tensor& g_y, const Shape& x_shape, const OpMeter& meter = {});

struct BatchNormCache {
  Tensor x_hat;
  std::vector<double> inv_std;
};

struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
};

/// Normalises per channel over (N, H, W) using batch statistics. Fills
/// cache/stats when given.
Tensor batchnorm_forward_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                               BatchNormCache* cache, BatchNormStats* stats,
                               const OpMeter& meter = {});
/// Normalises with fixed statistics.
Tensor batchnorm_forward_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              const std::vector<double>& mean, const std::vector<double>& var,
                              double eps, const OpMeter& meter = {});
/// g_params = {g_gamma, g_beta}.
GradBundle batchnorm_backward(const Tensor& g_y, const Tensor& gamma, const BatchNormCache& cache,
                              const OpMeter& meter = {});

struct LossResult {
  double loss = 0.0;
  Tensor g_logits;  // d(mean loss)/d(logits)
  std::size_t correct = 0;
};

/// Mean softmax cross-entropy over the batch.
LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                 const OpMeter& meter = {});

}  // namespace e2t
