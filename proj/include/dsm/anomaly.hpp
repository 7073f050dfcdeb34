#pragma once

#include "dsm/tensor.hpp"

// Anomaly Mask Visual Prompt: negative maximal query response -> min-max
// normalized anomaly score -> {0, -inf} additive attention mask. All outputs
// are detached constants (the prompt path carries no gradient).
namespace dsm::anomaly {

// A[j] = -max over rows of Z[., j]. Z is the pre-argmax affinity [N_o, L];
// low maximal response to every query marks a token as anomalous.
Tensor anomaly_score(const Tensor& Z);

// (A - min)/(max - min) into [0,1]. Degenerate range (< 1e-8) falls back to
// all ones: every position stays a candidate region.
Tensor normalize_minmax(const Tensor& A);

// M[j] = 0 where A[j] > 0.5 (strict), else -inf. If no entry clears the
// threshold the mask opens fully (all zeros) so downstream softmax stays
// defined.
Tensor mask_prompt(const Tensor& A_norm);

} // namespace dsm::anomaly
