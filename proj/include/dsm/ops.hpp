#pragma once

#include "dsm/tape.hpp"
#include "dsm/tensor.hpp"

// Differentiable operation set. Every op validates shapes, computes the
// forward value, and (when a tape is active and an input requires grad)
// records a backward closure. Layout conventions:
//   - matrices are [rows, cols], row-major
//   - feature maps are [C, D, H, W]
//   - token matrices are [L, C] with l = (d*H + h)*W + w
//   - sequence batches for SSM layers are [rows, L], one sequence per row
namespace dsm::ops {

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);

// ---- elementwise / broadcast ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor add_rowvec(const Tensor& a, const Tensor& v); // a:[m,n] + v:[n] per row
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);

// ---- softmax family ----
// Row-wise softmax with an optional additive mask whose entries are 0 or
// -inf. The mask may match logits exactly or be a single row [1, n]
// broadcast over all rows. A fully masked row is a contract error.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);
Tensor softmax_rows(const Tensor& logits);
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);
Tensor rmsnorm_rows(const Tensor& a, double eps = 1e-6); // row / sqrt(mean(row^2) + eps)

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- structural ----
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1); // half-open [r0, r1)
Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1);
Tensor reverse_cols(const Tensor& a); // reverse each row's sequence order
Tensor reshape(const Tensor& a, Shape shape);
Tensor take_diag(const Tensor& a); // main diagonal of [m,n] -> [min(m,n)]

// Feature-map <-> token-matrix conversion. cdhw_to_lc([C,D,H,W]) -> [DHW, C].
Tensor cdhw_to_lc(const Tensor& x);
Tensor lc_to_cdhw(const Tensor& x, int64_t C, int64_t D, int64_t H, int64_t W);
Tensor concat_channels(const Tensor& a, const Tensor& b); // [Ca+Cb, D, H, W]

// ---- spatial ----
// 3x3x3 cross-correlation, stride 1, zero padding 1; spatial extents kept.
Tensor conv3(const Tensor& x, const Tensor& kernel, const Tensor& bias);
// 1x1x1 pointwise convolution (channel mixing).
Tensor conv1(const Tensor& x, const Tensor& kernel, const Tensor& bias);
Tensor avgpool2x(const Tensor& x);             // even extents required
Tensor upsample_trilinear2x(const Tensor& x);  // align_corners = false

} // namespace dsm::ops
