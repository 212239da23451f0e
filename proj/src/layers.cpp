#include "xcvae/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace xcvae::nn {
namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using ConstMapRM = Eigen::Map<const MatRM>;
using ConstVec = Eigen::Map<const Eigen::VectorXd>;
using Vec = Eigen::Map<Eigen::VectorXd>;

ConstMapRM as_matrix(const Tensor& t, std::size_t rows) {
  return ConstMapRM(t.data(), static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(t.size() / rows));
}

MapRM as_matrix(Tensor& t, std::size_t rows) {
  return MapRM(t.data(), static_cast<Eigen::Index>(rows),
               static_cast<Eigen::Index>(t.size() / rows));
}

void require_chw(const Tensor& t, const char* what) {
  if (t.rank() != 3) {
    throw ValidationError(std::string(what) + ": expected (C, H, W), got " +
                          to_string(t.shape()));
  }
}

void uniform_fill(Tensor& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng);
}

}  // namespace

Conv2d::Conv2d(std::size_t out_channels, std::size_t in_channels, std::size_t kernel)
    : weight({out_channels, in_channels, kernel, kernel}), bias({out_channels}) {}

ConvTranspose2d::ConvTranspose2d(std::size_t in_channels, std::size_t out_channels,
                                 std::size_t kernel)
    : weight({in_channels, out_channels, kernel, kernel}), bias({out_channels}) {}

Dense::Dense(std::size_t out_features, std::size_t in_features)
    : weight({out_features, in_features}), bias({out_features}) {}

void init_he(Conv2d& conv, Rng& rng) {
  const double fan_in = double(conv.in_channels() * conv.kernel() * conv.kernel());
  uniform_fill(conv.weight, std::sqrt(6.0 / fan_in), rng);
  conv.bias.fill(0.0);
}

void init_he(ConvTranspose2d& conv, Rng& rng) {
  const double fan_in = double(conv.in_channels() * conv.kernel() * conv.kernel());
  uniform_fill(conv.weight, std::sqrt(6.0 / fan_in), rng);
  conv.bias.fill(0.0);
}

void init_he(Dense& dense, Rng& rng) {
  uniform_fill(dense.weight, std::sqrt(6.0 / double(dense.in_features())), rng);
  dense.bias.fill(0.0);
}

void init_glorot(Dense& dense, Rng& rng) {
  const double fan = double(dense.in_features() + dense.out_features());
  uniform_fill(dense.weight, std::sqrt(6.0 / fan), rng);
  dense.bias.fill(0.0);
}

Tensor im2col(const Tensor& input, std::size_t kernel) {
  require_chw(input, "im2col");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::ptrdiff_t pad = std::ptrdiff_t(kernel - 1) / 2;
  Tensor cols({C * kernel * kernel, H * W});
  double* out = cols.data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t sy = std::ptrdiff_t(y) + std::ptrdiff_t(ky) - pad;
          if (sy < 0 || sy >= std::ptrdiff_t(H)) {
            std::fill(out, out + W, 0.0);
            out += W;
            continue;
          }
          const double* row = input.data() + (c * H + std::size_t(sy)) * W;
          for (std::size_t x = 0; x < W; ++x) {
            const std::ptrdiff_t sx = std::ptrdiff_t(x) + std::ptrdiff_t(kx) - pad;
            *out++ = (sx < 0 || sx >= std::ptrdiff_t(W)) ? 0.0 : row[sx];
          }
        }
      }
    }
  }
  return cols;
}

Tensor col2im(const Tensor& cols, std::size_t channels, std::size_t height,
              std::size_t width, std::size_t kernel) {
  const std::ptrdiff_t pad = std::ptrdiff_t(kernel - 1) / 2;
  Tensor image({channels, height, width});
  const double* in = cols.data();
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        for (std::size_t y = 0; y < height; ++y) {
          const std::ptrdiff_t sy = std::ptrdiff_t(y) + std::ptrdiff_t(ky) - pad;
          if (sy < 0 || sy >= std::ptrdiff_t(height)) {
            in += width;
            continue;
          }
          double* row = image.data() + (c * height + std::size_t(sy)) * width;
          for (std::size_t x = 0; x < width; ++x, ++in) {
            const std::ptrdiff_t sx = std::ptrdiff_t(x) + std::ptrdiff_t(kx) - pad;
            if (sx >= 0 && sx < std::ptrdiff_t(width)) row[sx] += *in;
          }
        }
      }
    }
  }
  return image;
}

Tensor conv2d_no_bias(const Tensor& input, const Tensor& weight) {
  require_chw(input, "conv2d");
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2);
  if (input.dim(0) != cin) {
    throw ValidationError("conv2d: input has " + std::to_string(input.dim(0)) +
                          " channels, kernel expects " + std::to_string(cin));
  }
  const std::size_t H = input.dim(1), W = input.dim(2);
  const Tensor cols = im2col(input, k);
  Tensor out({cout, H, W});
  as_matrix(out, cout).noalias() = as_matrix(weight, cout) * as_matrix(cols, cin * k * k);
  return out;
}

Tensor conv2d_input_adjoint(const Tensor& grad_out, const Tensor& weight,
                            std::size_t height, std::size_t width) {
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2);
  Tensor dcols({cin * k * k, height * width});
  as_matrix(dcols, cin * k * k).noalias() =
      as_matrix(weight, cout).transpose() * as_matrix(grad_out, cout);
  return col2im(dcols, cin, height, width, k);
}

Tensor conv2d_forward(const Tensor& input, const Conv2d& conv) {
  Tensor out = conv2d_no_bias(input, conv.weight);
  const std::size_t plane = out.dim(1) * out.dim(2);
  for (std::size_t o = 0; o < conv.out_channels(); ++o) {
    double* p = out.data() + o * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += conv.bias[o];
  }
  return out;
}

void conv2d_backward(const Tensor& input, const Conv2d& conv, const Tensor& grad_out,
                     Conv2d& grad, Tensor* grad_input) {
  const std::size_t cout = conv.out_channels(), cin = conv.in_channels(), k = conv.kernel();
  const std::size_t H = input.dim(1), W = input.dim(2);
  const Tensor cols = im2col(input, k);
  const auto dout = as_matrix(grad_out, cout);
  as_matrix(grad.weight, cout).noalias() += dout * as_matrix(cols, cin * k * k).transpose();
  Vec(grad.bias.data(), Eigen::Index(cout)) += dout.rowwise().sum();
  if (grad_input) *grad_input = conv2d_input_adjoint(grad_out, conv.weight, H, W);
}

Tensor conv_transpose2d_forward(const Tensor& input, const ConvTranspose2d& conv) {
  require_chw(input, "conv_transpose2d");
  const std::size_t cin = conv.in_channels(), cout = conv.out_channels(), k = conv.kernel();
  if (input.dim(0) != cin) {
    throw ValidationError("conv_transpose2d: channel mismatch");
  }
  const std::size_t H = input.dim(1), W = input.dim(2);
  Tensor cols({cout * k * k, H * W});
  as_matrix(cols, cout * k * k).noalias() =
      as_matrix(conv.weight, cin).transpose() * as_matrix(input, cin);
  Tensor out = col2im(cols, cout, H, W, k);
  const std::size_t plane = H * W;
  for (std::size_t o = 0; o < cout; ++o) {
    double* p = out.data() + o * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += conv.bias[o];
  }
  return out;
}

void conv_transpose2d_backward(const Tensor& input, const ConvTranspose2d& conv,
                               const Tensor& grad_out, ConvTranspose2d& grad,
                               Tensor* grad_input) {
  const std::size_t cin = conv.in_channels(), cout = conv.out_channels(), k = conv.kernel();
  const std::size_t H = input.dim(1), W = input.dim(2);
  const Tensor dcols = im2col(grad_out, k);
  const auto dc = as_matrix(dcols, cout * k * k);
  as_matrix(grad.weight, cin).noalias() += as_matrix(input, cin) * dc.transpose();
  Vec(grad.bias.data(), Eigen::Index(cout)) += as_matrix(grad_out, cout).rowwise().sum();
  if (grad_input) {
    Tensor din({cin, H, W});
    as_matrix(din, cin).noalias() = as_matrix(conv.weight, cin) * dc;
    *grad_input = std::move(din);
  }
}

Tensor dense_forward(const Tensor& input, const Dense& dense) {
  if (input.size() != dense.in_features()) {
    throw ValidationError("dense: input of size " + std::to_string(input.size()) +
                          " for layer expecting " + std::to_string(dense.in_features()));
  }
  Tensor out({dense.out_features()});
  Vec(out.data(), Eigen::Index(out.size())).noalias() =
      as_matrix(dense.weight, dense.out_features()) *
          ConstVec(input.data(), Eigen::Index(input.size())) +
      ConstVec(dense.bias.data(), Eigen::Index(dense.bias.size()));
  return out;
}

void dense_backward(const Tensor& input, const Dense& dense, const Tensor& grad_out,
                    Dense& grad, Tensor* grad_input) {
  const ConstVec x(input.data(), Eigen::Index(input.size()));
  const ConstVec dy(grad_out.data(), Eigen::Index(grad_out.size()));
  as_matrix(grad.weight, dense.out_features()).noalias() += dy * x.transpose();
  Vec(grad.bias.data(), Eigen::Index(grad.bias.size())) += dy;
  if (grad_input) {
    Tensor dx(input.shape());
    Vec(dx.data(), Eigen::Index(dx.size())).noalias() =
        as_matrix(dense.weight, dense.out_features()).transpose() * dy;
    *grad_input = std::move(dx);
  }
}

PoolRecord max_pool2(const Tensor& input) {
  require_chw(input, "max_pool2");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (H < 2 || W < 2) throw ValidationError("max_pool2: input smaller than 2x2");
  const std::size_t oh = H / 2, ow = W / 2;
  PoolRecord rec{Tensor({C, oh, ow}), std::vector<std::size_t>(C * oh * ow), input.shape()};
  std::size_t o = 0;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        std::size_t best = (c * H + 2 * y) * W + 2 * x;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (c * H + 2 * y + dy) * W + 2 * x + dx;
            if (input[idx] > input[best]) best = idx;
          }
        }
        rec.output[o] = input[best];
        rec.argmax[o] = best;
      }
    }
  }
  return rec;
}

namespace {

void adaptive_pool_into(const Tensor& input, std::size_t gh, std::size_t gw, double* out,
                        std::size_t* arg) {
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t by = 0; by < gh; ++by) {
      const std::size_t y0 = (by * H) / gh;
      const std::size_t y1 = ((by + 1) * H + gh - 1) / gh;
      for (std::size_t bx = 0; bx < gw; ++bx) {
        const std::size_t x0 = (bx * W) / gw;
        const std::size_t x1 = ((bx + 1) * W + gw - 1) / gw;
        std::size_t best = (c * H + y0) * W + x0;
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t x = x0; x < x1; ++x) {
            const std::size_t idx = (c * H + y) * W + x;
            if (input[idx] > input[best]) best = idx;
          }
        }
        *out++ = input[best];
        *arg++ = best;
      }
    }
  }
}

}  // namespace

PoolRecord adaptive_max_pool(const Tensor& input, std::size_t grid_h, std::size_t grid_w) {
  require_chw(input, "adaptive_max_pool");
  if (input.dim(1) < grid_h || input.dim(2) < grid_w) {
    throw ValidationError("adaptive_max_pool: input " + to_string(input.shape()) +
                          " smaller than the " + std::to_string(grid_h) + "x" +
                          std::to_string(grid_w) + " grid");
  }
  const std::size_t C = input.dim(0);
  PoolRecord rec{Tensor({C, grid_h, grid_w}), std::vector<std::size_t>(C * grid_h * grid_w),
                 input.shape()};
  adaptive_pool_into(input, grid_h, grid_w, rec.output.data(), rec.argmax.data());
  return rec;
}

PoolRecord spatial_pyramid_pool(const Tensor& input, std::span<const std::size_t> levels) {
  require_chw(input, "spatial_pyramid_pool");
  const std::size_t C = input.dim(0);
  std::size_t total = 0;
  for (std::size_t g : levels) {
    if (input.dim(1) < g || input.dim(2) < g) {
      throw ValidationError("spatial_pyramid_pool: feature map " + to_string(input.shape()) +
                            " smaller than the " + std::to_string(g) + "x" +
                            std::to_string(g) + " level");
    }
    total += C * g * g;
  }
  PoolRecord rec{Tensor({total}), std::vector<std::size_t>(total), input.shape()};
  std::size_t offset = 0;
  for (std::size_t g : levels) {
    adaptive_pool_into(input, g, g, rec.output.data() + offset, rec.argmax.data() + offset);
    offset += C * g * g;
  }
  return rec;
}

Tensor pool_scatter(const PoolRecord& record, const Tensor& values) {
  if (values.size() != record.argmax.size()) {
    throw ValidationError("pool_scatter: " + std::to_string(values.size()) +
                          " values for a record of " + std::to_string(record.argmax.size()));
  }
  Tensor out(record.input_shape);
  for (std::size_t i = 0; i < record.argmax.size(); ++i) out[record.argmax[i]] += values[i];
  return out;
}

namespace {

struct Tap {
  std::size_t lo, hi;
  double w_hi;
};

std::vector<Tap> bilinear_taps(std::size_t in_size) {
  std::vector<Tap> taps(2 * in_size);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (double(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    const std::size_t lo = std::min(std::size_t(src), in_size - 1);
    const std::size_t hi = std::min(lo + 1, in_size - 1);
    taps[o] = {lo, hi, src - double(lo)};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear2x(const Tensor& input) {
  require_chw(input, "upsample_bilinear2x");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const auto ty = bilinear_taps(H), tx = bilinear_taps(W);
  Tensor out({C, 2 * H, 2 * W});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < 2 * H; ++y) {
      const Tap& a = ty[y];
      for (std::size_t x = 0; x < 2 * W; ++x) {
        const Tap& b = tx[x];
        const double top = (1 - b.w_hi) * input.at(c, a.lo, b.lo) + b.w_hi * input.at(c, a.lo, b.hi);
        const double bot = (1 - b.w_hi) * input.at(c, a.hi, b.lo) + b.w_hi * input.at(c, a.hi, b.hi);
        out.at(c, y, x) = (1 - a.w_hi) * top + a.w_hi * bot;
      }
    }
  }
  return out;
}

Tensor upsample_bilinear2x_backward(const Tensor& grad_out, const Shape& input_shape) {
  const std::size_t C = input_shape[0], H = input_shape[1], W = input_shape[2];
  const auto ty = bilinear_taps(H), tx = bilinear_taps(W);
  Tensor din(input_shape);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < 2 * H; ++y) {
      const Tap& a = ty[y];
      for (std::size_t x = 0; x < 2 * W; ++x) {
        const Tap& b = tx[x];
        const double g = grad_out.at(c, y, x);
        din.at(c, a.lo, b.lo) += g * (1 - a.w_hi) * (1 - b.w_hi);
        din.at(c, a.lo, b.hi) += g * (1 - a.w_hi) * b.w_hi;
        din.at(c, a.hi, b.lo) += g * a.w_hi * (1 - b.w_hi);
        din.at(c, a.hi, b.hi) += g * a.w_hi * b.w_hi;
      }
    }
  }
  return din;
}

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0 ? v : 0.0;
  return y;
}

Tensor leaky_relu(const Tensor& x, double slope) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0 ? v : slope * v;
  return y;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = logistic(v);
  return y;
}

Tensor relu_backward(const Tensor& pre, const Tensor& grad) {
  Tensor d = grad;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(pre[i] > 0)) d[i] = 0.0;
  }
  return d;
}

Tensor leaky_relu_backward(const Tensor& pre, const Tensor& grad, double slope) {
  Tensor d = grad;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(pre[i] > 0)) d[i] *= slope;
  }
  return d;
}

Tensor sigmoid_backward_from_output(const Tensor& s, const Tensor& grad) {
  Tensor d = grad;
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= s[i] * (1.0 - s[i]);
  return d;
}

}  // namespace xcvae::nn
