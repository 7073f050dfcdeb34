#include "dsm/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dsm::anomaly {

Tensor anomaly_score(const Tensor& Z) {
    if (Z.ndim() != 2) throw ContractError("anomaly_score: Z must be [N_o, L]");
    int64_t m = Z.dim(0), n = Z.dim(1);
    Tensor out = Tensor::zeros({n}, Z.dtype());
    dispatch_dtype(Z.dtype(), [&]<typename T>() {
        const T* zp = Z.cdata<T>();
        T* op = out.data<T>();
        for (int64_t j = 0; j < n; ++j) {
            T mx = zp[j];
            for (int64_t i = 1; i < m; ++i) mx = std::max(mx, zp[i * n + j]);
            op[j] = -mx;
        }
    });
    return out;
}

Tensor normalize_minmax(const Tensor& A) {
    if (A.ndim() != 1) throw ContractError("normalize_minmax: expected a flat score map");
    int64_t n = A.dim(0);
    Tensor out = Tensor::zeros(A.shape(), A.dtype());
    dispatch_dtype(A.dtype(), [&]<typename T>() {
        const T* ap = A.cdata<T>();
        T* op = out.data<T>();
        T lo = ap[0], hi = ap[0];
        for (int64_t i = 1; i < n; ++i) {
            lo = std::min(lo, ap[i]);
            hi = std::max(hi, ap[i]);
        }
        if (static_cast<double>(hi - lo) < 1e-8) {
            std::fill(op, op + n, T(1));
            return;
        }
        for (int64_t i = 0; i < n; ++i) op[i] = (ap[i] - lo) / (hi - lo);
    });
    return out;
}

Tensor mask_prompt(const Tensor& A_norm) {
    if (A_norm.ndim() != 1) throw ContractError("mask_prompt: expected a flat score map");
    int64_t n = A_norm.dim(0);
    Tensor out = Tensor::zeros(A_norm.shape(), A_norm.dtype());
    bool any_open = false;
    dispatch_dtype(A_norm.dtype(), [&]<typename T>() {
        const T* ap = A_norm.cdata<T>();
        T* op = out.data<T>();
        T ninf = -std::numeric_limits<T>::infinity();
        for (int64_t i = 0; i < n; ++i) {
            if (ap[i] > T(0.5)) {
                op[i] = T(0);
                any_open = true;
            } else {
                op[i] = ninf;
            }
        }
        if (!any_open) std::fill(op, op + n, T(0)); // degenerate fallback: fully open
    });
    return out;
}

} // namespace dsm::anomaly
