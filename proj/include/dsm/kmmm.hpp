#pragma once

#include "dsm/ssm.hpp"

// k-Means Mask Mamba decoder block: SSM-filtered query/feature affinity,
// query-wise hard assignment with a straight-through surrogate gradient,
// cluster aggregation, and residual query update.
namespace dsm::kmmm {

// Query-wise assignment over affinity Z [N_o, L]: column j receives a single
// 1 at the row with maximal Z[.,j], ties broken by lowest row index.
//
// hard=true : one-hot forward, straight-through backward through the
//             column-wise softmax(Z/tau_st) surrogate.
// hard=false: the surrogate itself is the forward (soft assignment); used by
//             finite-difference verification. Both modes share one backward.
Tensor querywise_assign(const Tensor& Z, bool hard = true, double tau_st = 1.0);

// Affinity logits Z = SSM_spatial(O F^T). O: [N_o, C], F: [L, C]; the spatial
// layer runs each query row as an independent sequence with one shared
// parameter set (row equivariance).
Tensor affinity(const Tensor& O, const Tensor& F, const ssm::SsmLayer& spatial);

// Cluster aggregation: row r of the result sums the feature vectors assigned
// to query r (empty cluster -> zero row). Equals R*F as a matrix product.
Tensor aggregate(const Tensor& R, const Tensor& F);

struct KmmmBlock {
    ssm::SsmLayer spatial;    // shared-parameter filter along the token axis
    ssm::SsmLayer query_axis; // per-channel filter along the query axis
    Tensor proj_w;            // [C, C], zero-init: block is identity at init
    Tensor proj_b;            // [C]
    bool classic_attention = false; // ablation: O + argmax(Q K^T) V, no SSM
    bool use_query_ssm = true;

    static KmmmBlock init(Rng& rng, int64_t channels, int64_t n_state, Dtype dt,
                          bool classic = false);

    struct Out {
        Tensor O_out; // [N_o, C]
        Tensor Z;     // [N_o, L] pre-argmax affinity (feeds anomaly scoring)
    };
    // surrogate_assign=true swaps the hard assignment for its soft surrogate
    // (finite-difference verification path).
    Out forward(const Tensor& O, const Tensor& F, bool surrogate_assign = false) const;

    void collect(const std::string& prefix, ParamMap& out) const;
};

} // namespace dsm::kmmm
