#include "dsm/tape.hpp"

namespace dsm {

thread_local Tape* Tape::active_ = nullptr;

void Tape::backward(Tensor loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward() must be seeded from a scalar loss");
    }
    Tensor g = loss.ensure_grad();
    g.set(0, 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        it->backward();
    }
}

void accumulate_grad(Tensor t, const Tensor& delta) {
    if (t.shape() != delta.shape()) {
        throw ContractError("gradient shape mismatch: param " + shape_str(t.shape()) +
                            " vs delta " + shape_str(delta.shape()));
    }
    Tensor g = t.ensure_grad();
    dispatch_dtype(t.dtype(), [&]<typename T>() {
        T* gp = g.data<T>();
        const T* dp = delta.cdata<T>();
        for (int64_t i = 0; i < g.numel(); ++i) gp[i] += dp[i];
    });
}

} // namespace dsm
