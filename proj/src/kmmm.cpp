#include "dsm/kmmm.hpp"

#include <cmath>

namespace dsm::kmmm {

Tensor querywise_assign(const Tensor& Z, bool hard, double tau_st) {
    if (Z.ndim() != 2) throw ContractError("querywise_assign: Z must be [N_o, L]");
    if (!(tau_st > 0)) throw ContractError("querywise_assign: tau_st must be positive");
    int64_t m = Z.dim(0), n = Z.dim(1);
    Tensor out = Tensor::zeros(Z.shape(), Z.dtype());

    dispatch_dtype(Z.dtype(), [&]<typename T>() {
        const T* zp = Z.cdata<T>();
        T* op = out.data<T>();
        if (hard) {
            for (int64_t j = 0; j < n; ++j) {
                int64_t best = 0;
                T bv = zp[j];
                for (int64_t i = 1; i < m; ++i) {
                    if (zp[i * n + j] > bv) { // strict: ties keep the lowest row
                        bv = zp[i * n + j];
                        best = i;
                    }
                }
                op[best * n + j] = T(1);
            }
        } else {
            T tau = static_cast<T>(tau_st);
            for (int64_t j = 0; j < n; ++j) {
                T mx = zp[j];
                for (int64_t i = 1; i < m; ++i) mx = std::max(mx, zp[i * n + j]);
                T sum = 0;
                for (int64_t i = 0; i < m; ++i) {
                    T e = std::exp((zp[i * n + j] - mx) / tau);
                    op[i * n + j] = e;
                    sum += e;
                }
                for (int64_t i = 0; i < m; ++i) op[i * n + j] /= sum;
            }
        }
    });

    if (Tape::recording() && Z.requires_grad()) {
        out.set_requires_grad(true);
        Tensor zc = Z, oc = out;
        // One backward for both modes: the column-wise softmax(Z/tau)
        // Jacobian, recomputed from Z.
        Tape::active()->record("querywise_assign", [zc, oc, m, n, tau_st]() mutable {
            if (!oc.has_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                const T* zp = zc.cdata<T>();
                T* gz = zc.ensure_grad().data<T>();
                T tau = static_cast<T>(tau_st);
                std::vector<T> s(static_cast<size_t>(m));
                for (int64_t j = 0; j < n; ++j) {
                    T mx = zp[j];
                    for (int64_t i = 1; i < m; ++i) mx = std::max(mx, zp[i * n + j]);
                    T sum = 0;
                    for (int64_t i = 0; i < m; ++i) {
                        T e = std::exp((zp[i * n + j] - mx) / tau);
                        s[static_cast<size_t>(i)] = e;
                        sum += e;
                    }
                    T dot = 0;
                    for (int64_t i = 0; i < m; ++i) {
                        s[static_cast<size_t>(i)] /= sum;
                        dot += gp[i * n + j] * s[static_cast<size_t>(i)];
                    }
                    for (int64_t i = 0; i < m; ++i) {
                        gz[i * n + j] += s[static_cast<size_t>(i)] * (gp[i * n + j] - dot) / tau;
                    }
                }
            });
        });
    }
    return out;
}

Tensor affinity(const Tensor& O, const Tensor& F, const ssm::SsmLayer& spatial) {
    if (O.ndim() != 2 || F.ndim() != 2 || O.dim(1) != F.dim(1)) {
        throw ContractError("affinity: need O [N_o,C] and F [L,C] with matching C");
    }
    if (spatial.a_log.dim(0) != 1) {
        throw ContractError("affinity: spatial SSM must have one shared parameter row");
    }
    Tensor raw = ops::matmul(O, ops::transpose2d(F));
    return spatial.forward(raw);
}

Tensor aggregate(const Tensor& R, const Tensor& F) {
    if (R.ndim() != 2 || F.ndim() != 2 || R.dim(1) != F.dim(0)) {
        throw ContractError("aggregate: R columns must match F rows");
    }
    return ops::matmul(R, F);
}

KmmmBlock KmmmBlock::init(Rng& rng, int64_t channels, int64_t n_state, Dtype dt, bool classic) {
    KmmmBlock b;
    b.spatial = ssm::SsmLayer::init(rng, 1, n_state, dt);
    b.query_axis = ssm::SsmLayer::init(rng, channels, n_state, dt);
    b.proj_w = Tensor::zeros({channels, channels}, dt);
    b.proj_b = Tensor::zeros({channels}, dt);
    b.proj_w.set_requires_grad(true);
    b.proj_b.set_requires_grad(true);
    b.classic_attention = classic;
    return b;
}

KmmmBlock::Out KmmmBlock::forward(const Tensor& O, const Tensor& F, bool surrogate_assign) const {
    if (classic_attention) {
        // Traditional cross-attention with the spatial-softmax replaced by
        // query-wise argmax: O + argmax(Q K^T) V with Q=O, K=V=F.
        Tensor Z = ops::matmul(O, ops::transpose2d(F));
        Tensor R = querywise_assign(Z, !surrogate_assign);
        Tensor O_out = ops::add(O, aggregate(R, F));
        return {O_out, Z};
    }
    Tensor Z = affinity(O, F, spatial);
    Tensor R = querywise_assign(Z, !surrogate_assign);
    Tensor U = ops::silu(aggregate(R, F));
    if (use_query_ssm) {
        // Sequence along the query axis, one channel per feature column.
        Tensor Ut = ops::transpose2d(U); // [C, N_o]
        U = ops::transpose2d(query_axis.forward(Ut));
    }
    Tensor O_out = ops::add(O, ops::add_rowvec(ops::matmul(U, proj_w), proj_b));
    return {O_out, Z};
}

void KmmmBlock::collect(const std::string& prefix, ParamMap& out) const {
    spatial.collect(prefix + ".spatial", out);
    query_axis.collect(prefix + ".query_axis", out);
    out.add(prefix + ".proj_w", proj_w);
    out.add(prefix + ".proj_b", proj_b);
}

} // namespace dsm::kmmm
