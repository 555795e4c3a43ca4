#include "e2t/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "e2t/errors.hpp"

namespace e2t {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

struct ConvDims {
  std::size_t n, cin, h, w, cout, k, hout, wout;
};

ConvDims conv_dims(const Shape& x, const Shape& w, ConvGeometry g) {
  if (x.size() != 4) throw DimensionError("conv2d: input must be N x Cin x H x W, got " + shape_str(x));
  if (w.size() != 4) throw DimensionError("conv2d: kernel must be Cout x Cin x K x K, got " + shape_str(w));
  if (g.stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (x[1] != w[1]) {
    throw DimensionError("conv2d: channel axis (1) mismatch, input has " + std::to_string(x[1]) +
                         " channels, kernel expects " + std::to_string(w[1]));
  }
  if (w[2] != w[3]) throw DimensionError("conv2d: kernel axes 2 and 3 must be square");
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], 0, 0};
  d.hout = conv_out_size(d.h, d.k, g.stride, g.pad);
  d.wout = conv_out_size(d.w, d.k, g.stride, g.pad);
  return d;
}

// Rows: (ci, ky, kx); columns: (n, oy, ox). Padding reads as zero.
MatR im2col(const Tensor& x, const ConvDims& d, ConvGeometry g) {
  const std::size_t cols = d.n * d.hout * d.wout;
  MatR col = MatR::Zero(static_cast<Eigen::Index>(d.cin * d.k * d.k), static_cast<Eigen::Index>(cols));
  const double* xp = x.data().data();
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        double* row = col.row(static_cast<Eigen::Index>((ci * d.k + ky) * d.k + kx)).data();
        for (std::size_t n = 0; n < d.n; ++n) {
          const double* plane = xp + (n * d.cin + ci) * d.h * d.w;
          double* out = row + n * d.hout * d.wout;
          for (std::size_t oy = 0; oy < d.hout; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
            for (std::size_t ox = 0; ox < d.wout; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
              out[oy * d.wout + ox] = plane[static_cast<std::size_t>(iy) * d.w + static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
  return col;
}

void col2im(const MatR& col, const ConvDims& d, ConvGeometry g, Tensor& x) {
  double* xp = x.data().data();
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const double* row = col.row(static_cast<Eigen::Index>((ci * d.k + ky) * d.k + kx)).data();
        for (std::size_t n = 0; n < d.n; ++n) {
          double* plane = xp + (n * d.cin + ci) * d.h * d.w;
          const double* in = row + n * d.hout * d.wout;
          for (std::size_t oy = 0; oy < d.hout; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
            for (std::size_t ox = 0; ox < d.wout; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
              plane[static_cast<std::size_t>(iy) * d.w + static_cast<std::size_t>(ix)] += in[oy * d.wout + ox];
            }
          }
        }
      }
    }
  }
}

// N x C x P  <->  C x (N*P)
MatR channels_major(const Tensor& t, std::size_t n, std::size_t c, std::size_t p) {
  MatR m(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n * p));
  const double* src = t.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      std::copy_n(src + (i * c + j) * p, p, m.row(static_cast<Eigen::Index>(j)).data() + i * p);
  return m;
}

Tensor batch_major(const MatR& m, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  Tensor t({n, c, h, w});
  const std::size_t p = h * w;
  double* dst = t.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      std::copy_n(m.row(static_cast<Eigen::Index>(j)).data() + i * p, p, dst + (i * c + j) * p);
  return t;
}

void require_conv_grad_shape(const Tensor& g_y, const ConvDims& d) {
  const Shape expect{d.n, d.cout, d.hout, d.wout};
  if (g_y.shape() != expect) {
    throw DimensionError("conv2d backward: output gradient " + shape_str(g_y.shape()) +
                         " does not match forward output " + shape_str(expect));
  }
}

}  // namespace

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride < 1) throw DimensionError("stride must be >= 1");
  if (in + 2 * pad < kernel) {
    throw DimensionError("kernel " + std::to_string(kernel) + " larger than padded input " +
                         std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

Tensor im2col(const Tensor& x, const Shape& w_shape, ConvGeometry g) {
  const auto d = conv_dims(x.shape(), w_shape, g);
  const MatR m = im2col(x, d, g);
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  MapR(t.data().data(), m.rows(), m.cols()) = m;
  return t;
}

Tensor channels_major(const Tensor& t) {
  require_rank(t, 4, "channels_major");
  const std::size_t n = t.dim(0), c = t.dim(1), p = t.dim(2) * t.dim(3);
  const MatR m = channels_major(t, n, c, p);
  Tensor out({c, n * p});
  MapR(out.data().data(), m.rows(), m.cols()) = m;
  return out;
}

std::uint64_t conv2d_macs(const Shape& x_shape, const Shape& w_shape, ConvGeometry g) {
  const auto d = conv_dims(x_shape, w_shape, g);
  return static_cast<std::uint64_t>(d.n) * d.cout * d.cin * d.k * d.k * d.hout * d.wout;
}

Tensor conv2d_forward(const Tensor& x, const Tensor& w, ConvGeometry g, const OpMeter& meter) {
  const auto d = conv_dims(x.shape(), w.shape(), g);
  const MatR col = im2col(x, d, g);
  CMapR wm(w.data().data(), static_cast<Eigen::Index>(d.cout), static_cast<Eigen::Index>(d.cin * d.k * d.k));
  const MatR y = wm * col;
  meter.macs(static_cast<std::uint64_t>(d.n) * d.cout * d.cin * d.k * d.k * d.hout * d.wout);
  return batch_major(y, d.n, d.cout, d.hout, d.wout);
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g_y, const Shape& w_shape, ConvGeometry g,
                          const OpMeter& meter) {
  const auto d = conv_dims(x.shape(), w_shape, g);
  require_conv_grad_shape(g_y, d);
  const MatR col = im2col(x, d, g);
  const MatR gm = channels_major(g_y, d.n, d.cout, d.hout * d.wout);
  Tensor g_w(w_shape);
  MapR(g_w.data().data(), static_cast<Eigen::Index>(d.cout), static_cast<Eigen::Index>(d.cin * d.k * d.k)).noalias() =
      gm * col.transpose();
  meter.macs(static_cast<std::uint64_t>(d.n) * d.cout * d.cin * d.k * d.k * d.hout * d.wout);
  return g_w;
}

Tensor conv2d_input_grad(const Tensor& g_y, const Tensor& w, const Shape& x_shape, ConvGeometry g,
                         const OpMeter& meter) {
  const auto d = conv_dims(x_shape, w.shape(), g);
  require_conv_grad_shape(g_y, d);
  const MatR gm = channels_major(g_y, d.n, d.cout, d.hout * d.wout);
  CMapR wm(w.data().data(), static_cast<Eigen::Index>(d.cout), static_cast<Eigen::Index>(d.cin * d.k * d.k));
  const MatR dcol = wm.transpose() * gm;
  Tensor g_x(x_shape);
  col2im(dcol, d, g, g_x);
  meter.macs(static_cast<std::uint64_t>(d.n) * d.cout * d.cin * d.k * d.k * d.hout * d.wout);
  return g_x;
}

GradBundle conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& g_y, ConvGeometry g,
                           const OpMeter& meter) {
  GradBundle b;
  b.g_x = conv2d_input_grad(g_y, w, x.shape(), g, meter);
  b.g_params.push_back(conv2d_weight_grad(x, g_y, w.shape(), g, meter.with_phase(Phase::weight_grad)));
  return b;
}

Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor* b, const OpMeter& meter) {
  require_rank(x, 2, "dense input");
  require_rank(w, 2, "dense weight");
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("dense: feature axis (1) mismatch, input has " + std::to_string(x.dim(1)) +
                         ", weight expects " + std::to_string(w.dim(1)));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y({n, out});
  MapR ym(y.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out));
  ym.noalias() = CMapR(x.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in)) *
                 CMapR(w.data().data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)).transpose();
  meter.macs(static_cast<std::uint64_t>(n) * out * in);
  if (b) {
    if (b->size() != out) throw DimensionError("dense: bias length does not match output axis");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out; ++o) y[i * out + o] += (*b)[o];
    meter.elementwise(0, n * out, n * out);
  }
  return y;
}

Tensor dense_weight_grad(const Tensor& x, const Tensor& g_y, const OpMeter& meter) {
  require_rank(x, 2, "dense input");
  require_rank(g_y, 2, "dense output gradient");
  if (x.dim(0) != g_y.dim(0)) throw DimensionError("dense backward: batch axis (0) mismatch");
  const std::size_t n = x.dim(0), in = x.dim(1), out = g_y.dim(1);
  Tensor g_w({out, in});
  MapR(g_w.data().data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)).noalias() =
      CMapR(g_y.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out)).transpose() *
      CMapR(x.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in));
  meter.macs(static_cast<std::uint64_t>(n) * out * in);
  return g_w;
}

Tensor dense_input_grad(const Tensor& g_y, const Tensor& w, const OpMeter& meter) {
  require_rank(g_y, 2, "dense output gradient");
  if (g_y.dim(1) != w.dim(0)) throw DimensionError("dense backward: output axis (1) mismatch");
  const std::size_t n = g_y.dim(0), in = w.dim(1), out = w.dim(0);
  Tensor g_x({n, in});
  MapR(g_x.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(in)).noalias() =
      CMapR(g_y.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(out)) *
      CMapR(w.data().data(), static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
  meter.macs(static_cast<std::uint64_t>(n) * out * in);
  return g_x;
}

Tensor dense_bias_grad(const Tensor& g_y, const OpMeter& meter) {
  require_rank(g_y, 2, "dense output gradient");
  const std::size_t n = g_y.dim(0), out = g_y.dim(1);
  Tensor g_b({out});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < out; ++o) g_b[o] += g_y[i * out + o];
  meter.elementwise(0, n * out, n * out);
  return g_b;
}

GradBundle dense_backward(const Tensor& x, const Tensor& w, const Tensor& g_y, const OpMeter& meter) {
  GradBundle b;
  b.g_x = dense_input_grad(g_y, w, meter);
  b.g_params.push_back(dense_weight_grad(x, g_y, meter.with_phase(Phase::weight_grad)));
  b.g_params.push_back(dense_bias_grad(g_y, meter));
  return b;
}

Tensor relu_forward(const Tensor& x, const OpMeter& meter) {
  Tensor y = x;
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  meter.elementwise(0, x.size(), x.size());
  return y;
}

void relu_signature(const Tensor& x, std::uint64_t& hash) {
  for (double v : x.data()) {
    hash ^= v > 0.0 ? 1u : 0u;
    hash *= 1099511628211ull;
  }
}

Tensor relu_backward(const Tensor& x, const Tensor& g_y, const OpMeter& meter) {
  require_same_shape(x, g_y, "relu backward");
  Tensor g = g_y;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > 0.0)) g[i] = 0.0;
  meter.elementwise(0, x.size(), 2 * x.size());
  return g;
}

Tensor global_avg_pool_forward(const Tensor& x, const OpMeter& meter) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
  Tensor y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) s += x[i * p + j];
    y[i] = s / static_cast<double>(p);
  }
  meter.elementwise(n * c, x.size(), x.size());
  return y;
}

Tensor global_avg_pool_backward(const Tensor& g_y, const Shape& x_shape, const OpMeter& meter) {
  if (x_shape.size() != 4 || g_y.shape() != Shape{x_shape[0], x_shape[1]}) {
    throw DimensionError("global_avg_pool backward: gradient " + shape_str(g_y.shape()) +
                         " does not match input " + shape_str(x_shape));
  }
  const std::size_t p = x_shape[2] * x_shape[3];
  Tensor g_x(x_shape);
  for (std::size_t i = 0; i < g_y.size(); ++i) {
    const double v = g_y[i] / static_cast<double>(p);
    std::fill_n(g_x.data().begin() + static_cast<std::ptrdiff_t>(i * p), p, v);
  }
  meter.elementwise(g_y.size(), 0, g_x.size());
  return g_x;
}

namespace {
void check_bn_params(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  require_rank(x, 4, "batchnorm");
  if (gamma.size() != x.dim(1) || beta.size() != x.dim(1)) {
    throw DimensionError("batchnorm: channel axis (1) has " + std::to_string(x.dim(1)) +
                         " channels, parameters have " + std::to_string(gamma.size()));
  }
}
}  // namespace

Tensor batchnorm_forward_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                               BatchNormCache* cache, BatchNormStats* stats, const OpMeter& meter) {
  check_bn_params(x, gamma, beta);
  const std::size_t n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(n * p);
  Tensor y(x.shape());
  Tensor x_hat(x.shape());
  std::vector<double> inv_std(c), means(c), vars(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = x.data().data() + (i * c + ch) * p;
      for (std::size_t j = 0; j < p; ++j) s += src[j];
    }
    const double mean = s / m;
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* src = x.data().data() + (i * c + ch) * p;
      for (std::size_t j = 0; j < p; ++j) v += (src[j] - mean) * (src[j] - mean);
    }
    v /= m;
    const double is = 1.0 / std::sqrt(v + eps);
    means[ch] = mean;
    vars[ch] = v;
    inv_std[ch] = is;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * p;
      for (std::size_t j = 0; j < p; ++j) {
        const double xh = (x[off + j] - mean) * is;
        x_hat[off + j] = xh;
        y[off + j] = gamma[ch] * xh + beta[ch];
      }
    }
  }
  meter.elementwise(3 * x.size(), 5 * x.size(), x.size());
  if (cache) *cache = BatchNormCache{std::move(x_hat), std::move(inv_std)};
  if (stats) *stats = BatchNormStats{std::move(means), std::move(vars)};
  return y;
}

Tensor batchnorm_forward_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              const std::vector<double>& mean, const std::vector<double>& var,
                              double eps, const OpMeter& meter) {
  check_bn_params(x, gamma, beta);
  const std::size_t n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double is = 1.0 / std::sqrt(var[ch] + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * p;
      for (std::size_t j = 0; j < p; ++j) y[off + j] = gamma[ch] * (x[off + j] - mean[ch]) * is + beta[ch];
    }
  }
  meter.elementwise(2 * x.size(), 2 * x.size(), x.size());
  return y;
}

GradBundle batchnorm_backward(const Tensor& g_y, const Tensor& gamma, const BatchNormCache& cache,
                              const OpMeter& meter) {
  require_same_shape(g_y, cache.x_hat, "batchnorm backward");
  const std::size_t n = g_y.dim(0), c = g_y.dim(1), p = g_y.dim(2) * g_y.dim(3);
  const double m = static_cast<double>(n * p);
  GradBundle b;
  b.g_x = Tensor(g_y.shape());
  Tensor g_gamma({c}), g_beta({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sg = 0.0, sgx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * p;
      for (std::size_t j = 0; j < p; ++j) {
        sg += g_y[off + j];
        sgx += g_y[off + j] * cache.x_hat[off + j];
      }
    }
    g_gamma[ch] = sgx;
    g_beta[ch] = sg;
    const double k = gamma[ch] * cache.inv_std[ch] / m;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * p;
      for (std::size_t j = 0; j < p; ++j) {
        b.g_x[off + j] = k * (m * g_y[off + j] - sg - cache.x_hat[off + j] * sgx);
      }
    }
  }
  meter.elementwise(3 * g_y.size(), 5 * g_y.size(), 2 * g_y.size());
  b.g_params.push_back(std::move(g_gamma));
  b.g_params.push_back(std::move(g_beta));
  return b;
}

LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                 const OpMeter& meter) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw DimensionError("softmax_cross_entropy: label count != batch axis (0)");
  LossResult r;
  r.g_logits = Tensor(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * k;
    const auto label = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || label >= k) throw DimensionError("softmax_cross_entropy: label out of range");
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    r.loss += -(row[label] - mx - std::log(z));
    std::size_t argmax = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (row[j] > row[argmax]) argmax = j;
      r.g_logits[i * k + j] = std::exp(row[j] - mx) / z / static_cast<double>(n);
    }
    r.g_logits[i * k + label] -= 1.0 / static_cast<double>(n);
    if (argmax == label) ++r.correct;
  }
  r.loss /= static_cast<double>(n);
  if (!std::isfinite(r.loss)) throw NumericError("softmax_cross_entropy: non-finite loss");
  meter.elementwise(2 * logits.size(), 2 * logits.size(), logits.size());
  return r;
}

}  // namespace e2t
