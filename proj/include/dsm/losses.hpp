#pragma once

#include <vector>

#include "dsm/ops.hpp"

// Training losses over [K, V] mask matrices (K classes, V voxels). `labeled`
// lists the class rows that carry supervision for the sample; every other row
// is excluded from the loss value and receives zero gradient. Gradients flow
// to the predictions (and to p_diag for the weighted variant); ground-truth
// labels are treated as constants.
namespace dsm::losses {

// Per-voxel Dice written as sum_k sum_j [1 - 2*Y*Yhat / (Y + Yhat + eps)],
// eps = 1e-6. Note the per-voxel form charges 1 for every true-negative
// voxel; `aggregated` switches to the conventional per-class form
// 1 - 2*sum(Y*Yhat) / (sum(Y) + sum(Yhat) + eps), which is the better
// training signal. Both are exposed on purpose.
Tensor dice_loss(const Tensor& Y, const Tensor& Yhat, const std::vector<int64_t>& labeled,
                 bool aggregated = false);

// Per-voxel binary cross-entropy; predictions clamped to [1e-7, 1-1e-7].
Tensor bce_loss(const Tensor& Y, const Tensor& Yhat, const std::vector<int64_t>& labeled);

// BCE against targets diag(p)·Y: row k's targets are scaled by the class
// probability p_diag[k] in [0,1]. Differentiable in Yhat and p_diag.
Tensor stage2_bce(const Tensor& Y, const Tensor& Yhat, const Tensor& p_diag,
                  const std::vector<int64_t>& labeled);

// The same cross-entropies evaluated from mask logits Z (Yhat = sigmoid(Z))
// via the log-sum-exp identity CE = max(z,0) - z*t + log(1 + exp(-|z|)).
// Unlike the clamped probability forms, the gradient sigmoid(z) - t never
// plateaus, which the training loop relies on once masks saturate.
Tensor bce_logits_loss(const Tensor& Y, const Tensor& Z, const std::vector<int64_t>& labeled);
Tensor stage2_bce_logits(const Tensor& Y, const Tensor& Z, const Tensor& p_diag,
                         const std::vector<int64_t>& labeled);

} // namespace dsm::losses
