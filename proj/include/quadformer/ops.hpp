#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "quadformer/tensor.hpp"

/// Differentiable operations. Every op records itself on the tape of its
/// tracked inputs (if any) and checks its output for non-finite values.
namespace qf {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
/// 2-D transpose.
Tensor transpose(const Tensor& a);

/// [...×m×k]·[...×k×n]; a rank-2 right operand broadcasts over the batch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[N×in]·w[in×out] + bias[out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

/// Concatenates rank-2 tensors with equal row counts along columns.
Tensor concat_cols(std::span<const Tensor> parts);

Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
/// x·Φ(x) with the exact Gaussian CDF.
Tensor gelu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Cross-correlation of x[Cin×H×W] with w[Cout×Cin×kh×kw] plus bias[Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions opt = {});
/// Per-channel cross-correlation of x[C×H×W] with w[C×kh×kw] plus bias[C].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dOptions opt = {});

/// Half-pixel-centre bilinear resize of x[C×H×W]; out sizes must not shrink.
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// [h·w × C] token grid to [C×h×w] and back.
Tensor tokens_to_chw(const Tensor& x, std::size_t h, std::size_t w);
Tensor chw_to_tokens(const Tensor& x);

/// Folds non-overlapping r×r cells of a [h·w × C] grid into
/// [(h/r)·(w/r) × r²C]; features ordered (dy, dx, c).
Tensor space_to_depth(const Tensor& x, std::size_t h, std::size_t w, std::size_t r);

/// Multi-head scaled dot-product attention: softmax(Q_h K_hᵀ/√d) V_h per head,
/// heads concatenated. q[N×C], k and v [M×C].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

/// Softmax over dim 0 of [C×H×W].
Tensor softmax_channels(const Tensor& x);

/// Mean over valid pixels of −w_y·log softmax(logits)_y for logits[C×H×W].
/// `valid` and `class_weights` may be empty (all valid, unit weights).
/// Returns 0 when no pixel is valid.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                             std::span<const std::uint8_t> valid = {},
                             std::span<const double> class_weights = {});

/// Mean binary cross-entropy of logits against a constant target in [0, 1].
Tensor bce_with_logits(const Tensor& logits, double target);

/// Test hook: deliberately corrupts a backward rule so verification suites
/// can prove they detect it.
enum class Fault { kNone, kGeluBackward, kLinearBackward };
void inject_fault(Fault f);
Fault active_fault();

}  // namespace qf
