#pragma once

#include <cstddef>
#include <span>

#include "tap/tensor.hpp"

// Differentiable primitives. Every op checks shapes up front, rejects
// non-finite results, and records its local gradient rule on the current
// tape when any input requires a gradient.
namespace tap::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);

/// x: [C_in x H x W], w: [C_out x C_in], bias: [C_out].
Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Row-wise affine map: x [R x in] * w [in x out] + bias [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Binary ops take equal shapes, or one side with a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
/// Throws DomainError on any non-positive input.
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);
/// Gradient passes only where the input lies inside [lo, hi].
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Softmax over axis 0 of a [C x H x W] tensor, per pixel.
Tensor softmax_channels(const Tensor& x);
/// Softmax over the last axis of a [R x C] matrix.
Tensor softmax_rows(const Tensor& x);

/// Scales each column of a [D x n] matrix to unit L2 norm (norm floored at eps).
Tensor normalize_columns(const Tensor& x, double eps = 1e-12);

/// Nearest-neighbour upsampling of [C x h x w] by an integer factor.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);

/// Flat gather: out[j] = x.data[index[j]].
Tensor gather(const Tensor& x, std::span<const std::size_t> index);

/// 3x3 depthwise convolution, stride 1, zero padding. Differentiable with
/// respect to x only; w [C x 3 x 3] and bias [C] must be frozen.
Tensor depthwise_conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Dense 3x3 convolution with zero padding and the given stride. Not
/// differentiable: every input must be frozen.
/// x [C_in x H x W], w [C_out x C_in x 3 x 3], bias [C_out].
Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride);

}  // namespace tap::ops
