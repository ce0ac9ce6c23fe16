#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "fusedet/tape.hpp"

namespace fusedet {

// Elementwise binary ops. Operands must have equal shapes, or one of them must hold a
// single element (scalar broadcast).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// Throws DomainError if any divisor element is zero.
Var div(const Var& a, const Var& b);
/// Elementwise max; ties route the gradient to `a`.
Var maximum(const Var& a, const Var& b);

Var scale(const Var& x, double factor);
Var shift(const Var& x, double offset);

Var relu(const Var& x);
Var sigmoid(const Var& x);
Var abs(const Var& x);
Var square(const Var& x);
/// Throws DomainError on negative input.
Var sqrt(const Var& x);

/// Reductions to a shape-[1] scalar.
Var sum(const Var& x);
Var mean(const Var& x);

/// (m x k) * (k x n).
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);
/// Concatenation along axis 0; trailing dimensions must agree.
Var concat(const std::vector<Var>& parts);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x: C x H x W, weight: O x C x K x K, optional bias: [O]. Zero padding.
Var conv2d(const Var& x, const Var& weight, const Var* bias, Conv2dOptions options);
/// Padding k/2, stride 1: output keeps the spatial size for odd K.
Var conv2d_same(const Var& x, const Var& weight, const Var* bias = nullptr);

/// Adds bias[c] to every element of channel c (axis 0).
Var add_channel_bias(const Var& x, const Var& bias);

/// Separable fixed-kernel filter with replicated borders; same-size output.
/// Accepts H x W or C x H x W. The kernel is a constant.
Var blur(const Var& x, std::span<const double> kernel);
std::vector<double> gaussian_kernel(std::size_t size, double sigma);

/// Nearest-neighbour upsampling of the two trailing axes by an integer factor.
Var upsample_nearest(const Var& x, std::size_t factor);

/// Per-channel normalisation over spatial positions with learned affine:
/// y[c] = gamma[c] * (x[c] - mean_c) / sqrt(var_c + eps) + beta[c].
/// A single spatial position normalises to zero, leaving beta.
Var channel_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// mask: M x H x W, features: C x H x W -> (M*C) x H x W, block m is mask[m] * features.
Var channel_outer(const Var& mask, const Var& features);

enum class OpKind {
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatmul,
  kConv2d,
  kRelu,
  kSigmoid,
  kMaximum,
  kMean,
  kSum,
  kAbs,
  kSquare,
  kSqrt,
  kBlur,
  kBroadcastScale,
  kUpsampleNearest,
  kConcatChannel,
};

inline constexpr OpKind kAllOpKinds[] = {
    OpKind::kAdd,    OpKind::kSub,     OpKind::kMul,     OpKind::kDiv,   OpKind::kMatmul,         OpKind::kConv2d,
    OpKind::kRelu,   OpKind::kSigmoid, OpKind::kMaximum, OpKind::kMean,  OpKind::kSum,            OpKind::kAbs,
    OpKind::kSquare, OpKind::kSqrt,    OpKind::kBlur,    OpKind::kBroadcastScale, OpKind::kUpsampleNearest,
    OpKind::kConcatChannel,
};

std::string_view op_name(OpKind kind);

/// Uniform dispatch over the registered op kinds with their default settings:
/// conv2d is stride 1 with size-preserving padding (inputs x, weight[, bias]),
/// blur uses a 5-tap Gaussian (sigma 1), upsampling is by 2, broadcast-scale takes
/// (scalar, tensor), concat takes any number of inputs.
Var forward_op(OpKind kind, std::span<const Var> inputs);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }
inline Var operator*(const Var& x, double c) { return scale(x, c); }
inline Var operator+(const Var& x, double c) { return shift(x, c); }
inline Var operator-(const Var& x, double c) { return shift(x, -c); }
inline Var operator-(const Var& x) { return scale(x, -1.0); }

}  // namespace fusedet
