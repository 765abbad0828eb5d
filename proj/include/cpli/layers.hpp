#pragma once

#include "cpli/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace cpli {

/// Binary channel indicator; an empty mask means every channel is kept.
using ChannelMask = std::vector<std::uint8_t>;

struct ConvGeometry {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad);

/// Unfolds a [c, h, w] input into a (c*kh*kw) x (h_out*w_out) matrix whose
/// column k holds the zero-padded receptive field of output location k.
MatrixXdR im2col(const Tensor& input, const ConvGeometry& geom);

/// Receptive field of a single output location, laid out as (c, ky, kx).
Eigen::VectorXd extract_patch(const Tensor& input, const ConvGeometry& geom, std::size_t out_y,
                              std::size_t out_x);

/// Y_i = sum_j mask_j (X_j * W_ij) + b_i with * the cross-correlation over the
/// zero-padded input. Masked channels are zeroed before the product, so
/// masking is exactly equivalent to zeroing the input channel.
Tensor conv2d_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                      std::span<const std::uint8_t> mask, std::size_t stride, std::size_t pad);

struct ConvGrads {
  Tensor d_input;
  Tensor d_weights;
  Tensor d_bias;
};

ConvGrads conv2d_backward(const Tensor& input, const Tensor& weights, const Tensor& d_output,
                          std::span<const std::uint8_t> mask, std::size_t stride, std::size_t pad);

Tensor relu_forward(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& d_output);

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// Max pooling without padding. Ties resolve to the lowest flat index.
PoolResult maxpool2d_forward(const Tensor& input, std::size_t window, std::size_t stride);
Tensor maxpool2d_backward(const Dims& input_dims, std::span<const std::size_t> argmax,
                          const Tensor& d_output);

Tensor flatten_forward(const Tensor& input);

/// y = W x + b for W [out, in].
Tensor linear_forward(const Tensor& input, const Tensor& weights, const Tensor& bias);

struct LinearGrads {
  Tensor d_input;
  Tensor d_weights;
  Tensor d_bias;
};

LinearGrads linear_backward(const Tensor& input, const Tensor& weights, const Tensor& d_output);

Tensor softmax(const Tensor& logits);
double cross_entropy(const Tensor& logits, std::size_t label);
/// d/dlogits of cross_entropy: softmax(logits) - onehot(label).
Tensor cross_entropy_grad(const Tensor& logits, std::size_t label);

}  // namespace cpli
