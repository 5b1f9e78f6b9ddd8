#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pem/tensor.hpp"

namespace pem {

// Dense product of [m,k] and [k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor reshape(const Tensor& x, Shape shape);

enum class Binary { add, sub, mul, div };

// Numpy-style broadcasting: trailing axes aligned, extents equal or 1.
Tensor elementwise(Binary op, const Tensor& a, const Tensor& b);
Tensor elementwise(Binary op, const Tensor& a, double b);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double b);
Tensor operator-(const Tensor& a, double b);
Tensor operator*(const Tensor& a, double b);
Tensor operator*(double a, const Tensor& b);
Tensor operator-(const Tensor& a);

enum class Unary { exp, log, sqrt, square };
Tensor unary(Unary op, const Tensor& x);

enum class Reduce { sum, mean, max, l2norm };

// max routes its gradient to the first maximal element; l2norm has zero
// gradient at the origin.
Tensor reduce(Reduce op, const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

enum class Activation { sigmoid, relu, gelu, softplus, softmax };

// `axis` is only read by softmax.
Tensor activation(Activation kind, const Tensor& x, std::size_t axis = 0);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);

// Softmax over the last axis of a 2-D tensor restricted to entries with
// keep != 0. Rows with nothing kept fall back to the unrestricted softmax.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// Cross-correlation of x[C_in,H,W] with w[C_out,C_in,k,k]; `bias` may be an
// undefined tensor.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              Conv2dOptions options = {});

// Samples x[C,H,W] at continuous (row, col) points[P,2]; neighbours outside
// the map read as zero. Returns [C,P].
Tensor bilinear_sample(const Tensor& x, const Tensor& points);

// Half-pixel-centre bilinear resize of x[C,H,W] (align_corners = false).
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor resize_nearest(const Tensor& x, std::size_t out_h, std::size_t out_w);

// Index of the maximum along `axis` for every position of the remaining
// axes (row-major over them). Ties resolve to the lowest index.
std::vector<std::size_t> argmax_axis(const Tensor& x, std::size_t axis);

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);

// y = x W + b for x[n,in], W[in,out], b[out] (b may be undefined).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Normalizes each row of a 2-D tensor to zero mean and unit variance
// (layer norm on [N,C], per-channel spatial norm on [C,HW]).
Tensor normalize_rows(const Tensor& x, double eps = 1e-5);

}  // namespace pem
