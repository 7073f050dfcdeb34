#pragma once

#include "dsm/ops.hpp"
#include "dsm/params.hpp"

namespace dsm::attn {

// Multi-head scaled dot-product attention. Queries [Nq, C_q] attend over a
// key/value token matrix [L, C_kv]; the optional additive mask is a single
// {0,-inf} row [1, L] broadcast across queries and heads. The output
// projection is zero-initialized so `x + mha(x, ...)` starts as identity.
struct Mha {
    Tensor wq, bq; // [C_q, C], [C]
    Tensor wk, bk; // [C_kv, C], [C]
    Tensor wv, bv; // [C_kv, C], [C]
    Tensor wo, bo; // [C, C] zero-init, [C]
    int64_t heads = 1;

    static Mha init(Rng& rng, int64_t c_q, int64_t c_kv, int64_t c_model, int64_t heads,
                    Dtype dt);

    // Returns the attention update [Nq, C] (caller adds the residual).
    Tensor forward(const Tensor& queries, const Tensor& kv, const Tensor& mask = Tensor{}) const;

    void collect(const std::string& prefix, ParamMap& out) const;
};

} // namespace dsm::attn
