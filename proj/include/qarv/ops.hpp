#pragma once

// Differentiable operations over NCHW tensors. Every op validates shapes and
// throws std::invalid_argument on mismatch.

#include <cstddef>
#include <span>
#include <utility>

#include "qarv/tensor.hpp"

namespace qarv::nn {

enum class PadMode { kZero, kReplicate };

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);

// Clamp whose gradient still flows when the input sits outside [lo, hi] and
// the upstream gradient would move it back inside. Plain clamping would
// freeze a parameter that drifted past a bound.
template <typename T> Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
// (N, ...) -> (N)
template <typename T> Tensor<T> sum_per_sample(const Tensor<T>& a);
// (N, ...) x (N, ...) -> (N), mean squared difference per sample.
template <typename T> Tensor<T> mse_per_sample(const Tensor<T>& a, const Tensor<T>& b);
// sum_i weights[i] * a[i]
template <typename T> Tensor<T> weighted_sum(const Tensor<T>& a, std::span<const T> weights);

// x: (N, in), weight: (out, in), bias: (out) -> (N, out)
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// x: (N, Cin, H, W), weight: (Cout, Cin, k, k), bias: (Cout).
// Output extent is floor((H + 2*padding - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding, PadMode mode = PadMode::kZero);

// x: (N, C, H, W), weight: (C, k, k), bias: (C). Stride 1, "same" padding k/2.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           PadMode mode = PadMode::kZero);

inline constexpr double kNormEps = 1e-6;

// Normalization without affine. layer_norm reduces over channels at each
// position; group_norm over (C/groups channels x H x W); instance_norm over
// H x W per channel.
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x);
template <typename T> Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups);
template <typename T> Tensor<T> instance_norm(const Tensor<T>& x);

// y = x * weight[c] + bias[c]; weight, bias: (C)
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// y = x * (1 + ss[n, c]) + ss[n, C + c]; ss: (N, 2C)
template <typename T> Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& scale_shift);

// (N, C*r*r, H, W) -> (N, C, H*r, W*r) and its inverse.
template <typename T> Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r);
template <typename T> Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r);

template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
// Channels [begin, end) of an (N, C, ...) tensor; also works on (N, C).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t end);

// Repeat a (1, C, h, w) tile over an (n, C, H, W) grid; H, W multiples of h, w.
template <typename T>
Tensor<T> tile_spatial(const Tensor<T>& tile, std::size_t n, std::size_t height, std::size_t width);

// Edge-replicating pad on the bottom/right to (H', W'), and the matching crop.
template <typename T>
Tensor<T> pad_replicate(const Tensor<T>& x, std::size_t height, std::size_t width);
template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t height, std::size_t width);

}  // namespace qarv::nn
