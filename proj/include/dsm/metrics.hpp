#pragma once

#include <cstdint>
#include <vector>

#include "dsm/tensor.hpp"

// Evaluation metrics. All inputs are plain values (no autodiff involvement).
namespace dsm::metrics {

// Dice similarity 2|P∩T| / (|P|+|T|) over binary masks; both masks empty
// scores 1.0 by convention.
double dsc(const Tensor& pred, const Tensor& truth);

// Area under the ROC curve via the rank-sum (Mann-Whitney) formulation;
// tied scores contribute 1/2. Throws DataError unless both classes appear.
double auroc(const std::vector<double>& scores, const std::vector<uint8_t>& labels);

// Minimum false-positive rate over all thresholds whose true-positive rate
// reaches `tpr_target`, sweeping every unique score exactly (no binning);
// the decision rule is score >= threshold.
double fpr_at_tpr(const std::vector<double>& scores, const std::vector<uint8_t>& labels,
                  double tpr_target = 0.95);

} // namespace dsm::metrics
