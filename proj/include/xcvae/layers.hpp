#pragma once

// Building blocks shared by the encoder, the CVAE decoder and the classifier.
// Every layer is a plain parameter struct plus free forward/backward
// functions. Backward functions accumulate (+=) into the gradient struct so a
// minibatch can be summed by repeated calls.

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "xcvae/tensor.hpp"

namespace xcvae::nn {

using Rng = std::mt19937_64;

inline constexpr double kLeakySlope = 0.01;

/// Stride-1 convolution with "same" padding. weight: (out, in, k, k).
struct Conv2d {
  Tensor weight;
  Tensor bias;

  Conv2d() = default;
  Conv2d(std::size_t out_channels, std::size_t in_channels, std::size_t kernel);

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel() const { return weight.dim(2); }
};

/// Stride-1 transposed convolution whose output has the input's spatial
/// size. weight: (in, out, k, k).
struct ConvTranspose2d {
  Tensor weight;
  Tensor bias;

  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);

  std::size_t in_channels() const { return weight.dim(0); }
  std::size_t out_channels() const { return weight.dim(1); }
  std::size_t kernel() const { return weight.dim(2); }
};

/// y = W x + b with W of shape (out, in); x is read flattened.
struct Dense {
  Tensor weight;
  Tensor bias;

  Dense() = default;
  Dense(std::size_t out_features, std::size_t in_features);

  std::size_t out_features() const { return weight.dim(0); }
  std::size_t in_features() const { return weight.dim(1); }
};

// He-uniform weights, zero biases.
void init_he(Conv2d& conv, Rng& rng);
void init_he(ConvTranspose2d& conv, Rng& rng);
void init_he(Dense& dense, Rng& rng);
/// Glorot-uniform weights, zero biases.
void init_glorot(Dense& dense, Rng& rng);

/// Unrolls a (C, H, W) map into (C*k*k, H*W) patch columns for a "same"
/// stride-1 window of size k. Padding is (k-1)/2 before and the remainder
/// after.
Tensor im2col(const Tensor& input, std::size_t kernel);
/// Adjoint of im2col: scatters columns back into a (C, H, W) map.
Tensor col2im(const Tensor& cols, std::size_t channels, std::size_t height,
              std::size_t width, std::size_t kernel);

Tensor conv2d_forward(const Tensor& input, const Conv2d& conv);
void conv2d_backward(const Tensor& input, const Conv2d& conv, const Tensor& grad_out,
                     Conv2d& grad, Tensor* grad_input);
/// Convolution that ignores the bias. Used by the relevance rules.
Tensor conv2d_no_bias(const Tensor& input, const Tensor& weight);
/// Adjoint of conv2d_no_bias with respect to its input.
Tensor conv2d_input_adjoint(const Tensor& grad_out, const Tensor& weight,
                            std::size_t height, std::size_t width);

Tensor conv_transpose2d_forward(const Tensor& input, const ConvTranspose2d& conv);
void conv_transpose2d_backward(const Tensor& input, const ConvTranspose2d& conv,
                               const Tensor& grad_out, ConvTranspose2d& grad,
                               Tensor* grad_input);

Tensor dense_forward(const Tensor& input, const Dense& dense);
void dense_backward(const Tensor& input, const Dense& dense, const Tensor& grad_out,
                    Dense& grad, Tensor* grad_input);

/// Max pooling result with the flat input index that won each output cell.
struct PoolRecord {
  Tensor output;
  std::vector<std::size_t> argmax;
  Shape input_shape;
};

/// 2x2 stride-2 max pooling (floor). Ties go to the first index in scan order.
PoolRecord max_pool2(const Tensor& input);
/// Adaptive max pooling onto a (grid_h, grid_w) bin grid per channel. Bin i
/// spans [floor(i*H/g), ceil((i+1)*H/g)), so neighbouring bins may overlap.
PoolRecord adaptive_max_pool(const Tensor& input, std::size_t grid_h, std::size_t grid_w);
/// Concatenation of adaptive_max_pool over each level (levels[i] x levels[i]),
/// flattened channel-major per level.
PoolRecord spatial_pyramid_pool(const Tensor& input, std::span<const std::size_t> levels);
/// Routes each output value back to the input cell that won it. This is both
/// the pooling gradient and the winner-path relevance rule.
Tensor pool_scatter(const PoolRecord& record, const Tensor& values);

/// Bilinear 2x upsampling of (C, H, W) with half-pixel centres.
Tensor upsample_bilinear2x(const Tensor& input);
Tensor upsample_bilinear2x_backward(const Tensor& grad_out, const Shape& input_shape);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = kLeakySlope);
Tensor sigmoid(const Tensor& x);
/// grad * dact(pre)/dpre, evaluated at the pre-activation.
Tensor relu_backward(const Tensor& pre, const Tensor& grad);
Tensor leaky_relu_backward(const Tensor& pre, const Tensor& grad, double slope = kLeakySlope);
/// Gradient through sigmoid given its output s.
Tensor sigmoid_backward_from_output(const Tensor& s, const Tensor& grad);

double logistic(double x);

}  // namespace xcvae::nn
