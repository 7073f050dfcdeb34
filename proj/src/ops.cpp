#include "dsm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dsm::ops {

namespace {

bool tape_wants(std::initializer_list<const Tensor*> ins) {
    if (!Tape::recording()) return false;
    for (const Tensor* t : ins) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

void check_matrix(const Tensor& t, const char* who) {
    if (t.ndim() != 2) {
        throw ContractError(std::string(who) + ": expected a matrix, got shape " + shape_str(t.shape()));
    }
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* who) {
    if (a.dtype() != b.dtype()) {
        throw ContractError(std::string(who) + ": dtype mismatch");
    }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape()) {
        throw ContractError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
    }
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void mm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            T a = A[i * k + p];
            const T* brow = B + p * n;
            T* crow = C + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

// C[m,k] += G[m,n] * B[k,n]^T
template <typename T>
void mm_nt(const T* G, const T* B, T* C, int64_t m, int64_t n, int64_t k) {
    for (int64_t i = 0; i < m; ++i) {
        const T* grow = G + i * n;
        for (int64_t j = 0; j < k; ++j) {
            const T* brow = B + j * n;
            T acc = 0;
            for (int64_t p = 0; p < n; ++p) acc += grow[p] * brow[p];
            C[i * k + j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * G[m,n]
template <typename T>
void mm_tn(const T* A, const T* G, T* C, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < m; ++p) {
        const T* arow = A + p * k;
        const T* grow = G + p * n;
        for (int64_t i = 0; i < k; ++i) {
            T a = arow[i];
            if (a == T(0)) continue;
            T* crow = C + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += a * grow[j];
        }
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_matrix(a, "matmul lhs");
    check_matrix(b, "matmul rhs");
    check_same_dtype(a, b, "matmul");
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ContractError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({m, n}, a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        mm_nn<T>(a.cdata<T>(), b.cdata<T>(), out.data<T>(), m, k, n);
    });
    if (tape_wants({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("matmul", [ac, bc, oc, m, k, n]() mutable {
            if (!oc.has_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                if (ac.requires_grad()) {
                    Tensor ga = ac.ensure_grad();
                    mm_nt<T>(gp, bc.cdata<T>(), ga.data<T>(), m, n, k);
                }
                if (bc.requires_grad()) {
                    Tensor gb = bc.ensure_grad();
                    mm_tn<T>(ac.cdata<T>(), gp, gb.data<T>(), m, k, n);
                }
            });
        });
    }
    return out;
}

Tensor transpose2d(const Tensor& a) {
    check_matrix(a, "transpose2d");
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m}, a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        T* op = out.data<T>();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) op[j * m + i] = ap[i * n + j];
    });
    if (tape_wants({&a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("transpose2d", [ac, oc, m, n]() mutable {
            if (!oc.has_grad() || !ac.requires_grad()) return;
            Tensor g = oc.grad();
            Tensor ga = ac.ensure_grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                T* gap = ga.data<T>();
                for (int64_t j = 0; j < n; ++j)
                    for (int64_t i = 0; i < m; ++i) gap[i * n + j] += gp[j * m + i];
            });
        });
    }
    return out;
}

namespace {

enum class BinKind { Add, Sub, Mul };

Tensor binary_elementwise(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    check_same_shape(a, b, name);
    check_same_dtype(a, b, name);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        const T* bp = b.cdata<T>();
        T* op = out.data<T>();
        int64_t n = a.numel();
        switch (kind) {
            case BinKind::Add: for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i]; break;
            case BinKind::Sub: for (int64_t i = 0; i < n; ++i) op[i] = ap[i] - bp[i]; break;
            case BinKind::Mul: for (int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i]; break;
        }
    });
    if (tape_wants({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record(name, [ac, bc, oc, kind]() mutable {
            if (!oc.has_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                int64_t n = g.numel();
                if (ac.requires_grad()) {
                    T* gap = ac.ensure_grad().data<T>();
                    if (kind == BinKind::Mul) {
                        const T* bp = bc.cdata<T>();
                        for (int64_t i = 0; i < n; ++i) gap[i] += gp[i] * bp[i];
                    } else {
                        for (int64_t i = 0; i < n; ++i) gap[i] += gp[i];
                    }
                }
                if (bc.requires_grad()) {
                    T* gbp = bc.ensure_grad().data<T>();
                    switch (kind) {
                        case BinKind::Add: for (int64_t i = 0; i < n; ++i) gbp[i] += gp[i]; break;
                        case BinKind::Sub: for (int64_t i = 0; i < n; ++i) gbp[i] -= gp[i]; break;
                        case BinKind::Mul: {
                            const T* ap = ac.cdata<T>();
                            for (int64_t i = 0; i < n; ++i) gbp[i] += gp[i] * ap[i];
                            break;
                        }
                    }
                }
            });
        });
    }
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, BinKind::Mul, "mul"); }

Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        T* op = out.data<T>();
        T sv = static_cast<T>(s);
        for (int64_t i = 0; i < a.numel(); ++i) op[i] = ap[i] * sv;
    });
    if (tape_wants({&a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("scale", [ac, oc, s]() mutable {
            if (!oc.has_grad() || !ac.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                T* gap = ac.ensure_grad().data<T>();
                T sv = static_cast<T>(s);
                for (int64_t i = 0; i < g.numel(); ++i) gap[i] += gp[i] * sv;
            });
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        T* op = out.data<T>();
        T sv = static_cast<T>(s);
        for (int64_t i = 0; i < a.numel(); ++i) op[i] = ap[i] + sv;
    });
    if (tape_wants({&a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record("add_scalar", [ac, oc]() mutable {
            if (!oc.has_grad() || !ac.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                T* gap = ac.ensure_grad().data<T>();
                for (int64_t i = 0; i < g.numel(); ++i) gap[i] += gp[i];
            });
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    check_matrix(a, "add_rowvec");
    check_same_dtype(a, v, "add_rowvec");
    if (v.ndim() != 1 || v.dim(0) != a.dim(1)) {
        throw ContractError("add_rowvec: vector shape " + shape_str(v.shape()) +
                            " does not match matrix columns of " + shape_str(a.shape()));
    }
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        const T* vp = v.cdata<T>();
        T* op = out.data<T>();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) op[i * n + j] = ap[i * n + j] + vp[j];
    });
    if (tape_wants({&a, &v})) {
        out.set_requires_grad(true);
        Tensor ac = a, vc = v, oc = out;
        Tape::active()->record("add_rowvec", [ac, vc, oc, m, n]() mutable {
            if (!oc.has_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                if (ac.requires_grad()) {
                    T* gap = ac.ensure_grad().data<T>();
                    for (int64_t i = 0; i < m * n; ++i) gap[i] += gp[i];
                }
                if (vc.requires_grad()) {
                    T* gvp = vc.ensure_grad().data<T>();
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j) gvp[j] += gp[i * n + j];
                }
            });
        });
    }
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&]<typename T>() {
        const T* xp = x.cdata<T>();
        T* op = out.data<T>();
        for (int64_t i = 0; i < x.numel(); ++i) {
            T s = T(1) / (T(1) + std::exp(-xp[i]));
            op[i] = xp[i] * s;
        }
    });
    if (tape_wants({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("silu", [xc, oc]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                const T* xp = xc.cdata<T>();
                T* gxp = xc.ensure_grad().data<T>();
                for (int64_t i = 0; i < g.numel(); ++i) {
                    T s = T(1) / (T(1) + std::exp(-xp[i]));
                    gxp[i] += gp[i] * s * (T(1) + xp[i] * (T(1) - s));
                }
            });
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&]<typename T>() {
        const T* xp = x.cdata<T>();
        T* op = out.data<T>();
        for (int64_t i = 0; i < x.numel(); ++i) op[i] = T(1) / (T(1) + std::exp(-xp[i]));
    });
    if (tape_wants({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("sigmoid", [xc, oc]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                const T* op = oc.cdata<T>();
                T* gxp = xc.ensure_grad().data<T>();
                for (int64_t i = 0; i < g.numel(); ++i) gxp[i] += gp[i] * op[i] * (T(1) - op[i]);
            });
        });
    }
    return out;
}

Tensor exp(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&]<typename T>() {
        const T* xp = x.cdata<T>();
        T* op = out.data<T>();
        for (int64_t i = 0; i < x.numel(); ++i) op[i] = std::exp(xp[i]);
    });
    if (tape_wants({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("exp", [xc, oc]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                const T* op = oc.cdata<T>();
                T* gxp = xc.ensure_grad().data<T>();
                for (int64_t i = 0; i < g.numel(); ++i) gxp[i] += gp[i] * op[i];
            });
        });
    }
    return out;
}

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
    check_matrix(logits, "masked_softmax");
    int64_t m = logits.dim(0), n = logits.dim(1);
    bool broadcast = false;
    if (mask.defined()) {
        check_same_dtype(logits, mask, "masked_softmax");
        if (mask.ndim() != 2 || mask.dim(1) != n || (mask.dim(0) != m && mask.dim(0) != 1)) {
            throw ContractError("masked_softmax: mask shape " + shape_str(mask.shape()) +
                                " incompatible with logits " + shape_str(logits.shape()));
        }
        broadcast = mask.dim(0) == 1;
    }
    Tensor out = Tensor::zeros(logits.shape(), logits.dtype());
    dispatch_dtype(logits.dtype(), [&]<typename T>() {
        const T* lp = logits.cdata<T>();
        const T* mp = mask.defined() ? mask.cdata<T>() : nullptr;
        T* op = out.data<T>();
        for (int64_t i = 0; i < m; ++i) {
            const T* mrow = mp ? (broadcast ? mp : mp + i * n) : nullptr;
            const T* lrow = lp + i * n;
            T* orow = op + i * n;
            T mx = -std::numeric_limits<T>::infinity();
            int64_t alive = 0;
            for (int64_t j = 0; j < n; ++j) {
                if (mrow) {
                    T mv = mrow[j];
                    if (std::isinf(static_cast<double>(mv)) && mv < T(0)) continue;
                    if (mv != T(0)) {
                        throw ContractError("masked_softmax: mask entries must be 0 or -inf");
                    }
                }
                ++alive;
                mx = std::max(mx, lrow[j]);
            }
            if (alive == 0) {
                throw ContractError("masked_softmax: fully masked row " + std::to_string(i));
            }
            T sum = 0;
            for (int64_t j = 0; j < n; ++j) {
                bool dead = mrow && mrow[j] < T(0);
                T e = dead ? T(0) : std::exp(lrow[j] - mx);
                orow[j] = e;
                sum += e;
            }
            for (int64_t j = 0; j < n; ++j) orow[j] /= sum;
        }
    });
    if (tape_wants({&logits})) {
        out.set_requires_grad(true);
        Tensor lc = logits, oc = out;
        Tape::active()->record("masked_softmax", [lc, oc, m, n]() mutable {
            if (!oc.has_grad() || !lc.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                const T* sp = oc.cdata<T>();
                T* glp = lc.ensure_grad().data<T>();
                for (int64_t i = 0; i < m; ++i) {
                    const T* grow = gp + i * n;
                    const T* srow = sp + i * n;
                    T dot = 0;
                    for (int64_t j = 0; j < n; ++j) dot += grow[j] * srow[j];
                    T* grad_row = glp + i * n;
                    for (int64_t j = 0; j < n; ++j) grad_row[j] += srow[j] * (grow[j] - dot);
                }
            });
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& logits) { return masked_softmax(logits, Tensor{}); }

Tensor l2_normalize_rows(const Tensor& a, double eps) {
    check_matrix(a, "l2_normalize_rows");
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    Tensor norms = Tensor::zeros({m}, a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        T* op = out.data<T>();
        T* np = norms.data<T>();
        for (int64_t i = 0; i < m; ++i) {
            const T* arow = ap + i * n;
            T sq = 0;
            for (int64_t j = 0; j < n; ++j) sq += arow[j] * arow[j];
            if (static_cast<double>(sq) < 1e-30) {
                throw ContractError("l2_normalize_rows: zero-norm row " + std::to_string(i));
            }
            T nu = std::sqrt(sq + static_cast<T>(eps));
            np[i] = nu;
            for (int64_t j = 0; j < n; ++j) op[i * n + j] = arow[j] / nu;
        }
    });
    if (tape_wants({&a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out, nc = norms;
        Tape::active()->record("l2_normalize_rows", [ac, oc, nc, m, n]() mutable {
            if (!oc.has_grad() || !ac.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                const T* ap = ac.cdata<T>();
                const T* np = nc.cdata<T>();
                T* gap = ac.ensure_grad().data<T>();
                for (int64_t i = 0; i < m; ++i) {
                    const T* grow = gp + i * n;
                    const T* arow = ap + i * n;
                    T nu = np[i];
                    T dot = 0;
                    for (int64_t j = 0; j < n; ++j) dot += grow[j] * arow[j];
                    T nu3 = nu * nu * nu;
                    for (int64_t j = 0; j < n; ++j) {
                        gap[i * n + j] += grow[j] / nu - arow[j] * dot / nu3;
                    }
                }
            });
        });
    }
    return out;
}

Tensor rmsnorm_rows(const Tensor& a, double eps) {
    check_matrix(a, "rmsnorm_rows");
    if (!(eps > 0)) throw ContractError("rmsnorm_rows: eps must be positive");
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    Tensor rms = Tensor::zeros({m}, a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        T* op = out.data<T>();
        T* rp = rms.data<T>();
        for (int64_t i = 0; i < m; ++i) {
            const T* arow = ap + i * n;
            double sq = 0;
            for (int64_t j = 0; j < n; ++j) {
                sq += static_cast<double>(arow[j]) * static_cast<double>(arow[j]);
            }
            T r = static_cast<T>(std::sqrt(sq / static_cast<double>(n) + eps));
            rp[i] = r;
            for (int64_t j = 0; j < n; ++j) op[i * n + j] = arow[j] / r;
        }
    });
    if (tape_wants({&a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out, rc = rms;
        Tape::active()->record("rmsnorm_rows", [ac, oc, rc, m, n]() mutable {
            if (!oc.has_grad() || !ac.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                const T* ap = ac.cdata<T>();
                const T* rp = rc.cdata<T>();
                T* gap = ac.ensure_grad().data<T>();
                for (int64_t i = 0; i < m; ++i) {
                    const T* grow = gp + i * n;
                    const T* arow = ap + i * n;
                    double r = rp[i];
                    double dot = 0;
                    for (int64_t j = 0; j < n; ++j) {
                        dot += static_cast<double>(grow[j]) * static_cast<double>(arow[j]);
                    }
                    double r3n = r * r * r * static_cast<double>(n);
                    for (int64_t j = 0; j < n; ++j) {
                        gap[i * n + j] += static_cast<T>(grow[j] / r - arow[j] * dot / r3n);
                    }
                }
            });
        });
    }
    return out;
}

namespace {

Tensor reduce_all(const Tensor& a, bool mean, const char* name) {
    Tensor out = Tensor::zeros({1}, a.dtype());
    double denom = mean ? static_cast<double>(a.numel()) : 1.0;
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        T acc = 0;
        for (int64_t i = 0; i < a.numel(); ++i) acc += ap[i];
        out.data<T>()[0] = static_cast<T>(acc / static_cast<T>(denom));
    });
    if (tape_wants({&a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record(name, [ac, oc, denom]() mutable {
            if (!oc.has_grad() || !ac.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                T gv = g.cdata<T>()[0] / static_cast<T>(denom);
                T* gap = ac.ensure_grad().data<T>();
                for (int64_t i = 0; i < ac.numel(); ++i) gap[i] += gv;
            });
        });
    }
    return out;
}

} // namespace

Tensor sum_all(const Tensor& a) { return reduce_all(a, false, "sum_all"); }
Tensor mean_all(const Tensor& a) { return reduce_all(a, true, "mean_all"); }

namespace {

// Shared scaffolding for ops that are pure index permutations/selections:
// forward copies src[src_index(i)] -> out[i]; backward scatters back.
template <typename IndexFn>
Tensor gather_op(const Tensor& a, Shape out_shape, const char* name, IndexFn src_index) {
    Tensor out = Tensor::zeros(std::move(out_shape), a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        T* op = out.data<T>();
        for (int64_t i = 0; i < out.numel(); ++i) op[i] = ap[src_index(i)];
    });
    if (tape_wants({&a})) {
        out.set_requires_grad(true);
        Tensor ac = a, oc = out;
        Tape::active()->record(name, [ac, oc, src_index]() mutable {
            if (!oc.has_grad() || !ac.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                T* gap = ac.ensure_grad().data<T>();
                for (int64_t i = 0; i < g.numel(); ++i) gap[src_index(i)] += gp[i];
            });
        });
    }
    return out;
}

} // namespace

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    check_matrix(a, "concat_rows");
    check_matrix(b, "concat_rows");
    check_same_dtype(a, b, "concat_rows");
    if (a.dim(1) != b.dim(1)) throw ContractError("concat_rows: column counts differ");
    int64_t na = a.numel();
    Tensor out = Tensor::zeros({a.dim(0) + b.dim(0), a.dim(1)}, a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        T* op = out.data<T>();
        std::copy_n(a.cdata<T>(), a.numel(), op);
        std::copy_n(b.cdata<T>(), b.numel(), op + na);
    });
    if (tape_wants({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("concat_rows", [ac, bc, oc, na]() mutable {
            if (!oc.has_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                if (ac.requires_grad()) {
                    T* gap = ac.ensure_grad().data<T>();
                    for (int64_t i = 0; i < na; ++i) gap[i] += gp[i];
                }
                if (bc.requires_grad()) {
                    T* gbp = bc.ensure_grad().data<T>();
                    for (int64_t i = 0; i < bc.numel(); ++i) gbp[i] += gp[na + i];
                }
            });
        });
    }
    return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    check_matrix(a, "concat_cols");
    check_matrix(b, "concat_cols");
    check_same_dtype(a, b, "concat_cols");
    if (a.dim(0) != b.dim(0)) throw ContractError("concat_cols: row counts differ");
    int64_t m = a.dim(0), na = a.dim(1), nb = b.dim(1), n = na + nb;
    Tensor out = Tensor::zeros({m, n}, a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        const T* ap = a.cdata<T>();
        const T* bp = b.cdata<T>();
        T* op = out.data<T>();
        for (int64_t i = 0; i < m; ++i) {
            std::copy_n(ap + i * na, na, op + i * n);
            std::copy_n(bp + i * nb, nb, op + i * n + na);
        }
    });
    if (tape_wants({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("concat_cols", [ac, bc, oc, m, na, nb, n]() mutable {
            if (!oc.has_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                if (ac.requires_grad()) {
                    T* gap = ac.ensure_grad().data<T>();
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < na; ++j) gap[i * na + j] += gp[i * n + j];
                }
                if (bc.requires_grad()) {
                    T* gbp = bc.ensure_grad().data<T>();
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < nb; ++j) gbp[i * nb + j] += gp[i * n + na + j];
                }
            });
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1) {
    check_matrix(a, "slice_rows");
    if (r0 < 0 || r1 > a.dim(0) || r0 >= r1) throw ContractError("slice_rows: bad range");
    int64_t n = a.dim(1);
    return gather_op(a, {r1 - r0, n}, "slice_rows",
                     [r0, n](int64_t i) { return r0 * n + i; });
}

Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
    check_matrix(a, "slice_cols");
    if (c0 < 0 || c1 > a.dim(1) || c0 >= c1) throw ContractError("slice_cols: bad range");
    int64_t n = a.dim(1), w = c1 - c0;
    return gather_op(a, {a.dim(0), w}, "slice_cols",
                     [c0, n, w](int64_t i) { return (i / w) * n + c0 + i % w; });
}

Tensor take_diag(const Tensor& a) {
    check_matrix(a, "take_diag");
    int64_t n = a.dim(1), k = std::min(a.dim(0), n);
    return gather_op(a, {k}, "take_diag", [n](int64_t i) { return i * n + i; });
}

Tensor reverse_cols(const Tensor& a) {
    check_matrix(a, "reverse_cols");
    int64_t n = a.dim(1);
    return gather_op(a, a.shape(), "reverse_cols",
                     [n](int64_t i) { return (i / n) * n + (n - 1 - i % n); });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ContractError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                            shape_str(shape));
    }
    return gather_op(a, std::move(shape), "reshape", [](int64_t i) { return i; });
}

Tensor cdhw_to_lc(const Tensor& x) {
    if (x.ndim() != 4) throw ContractError("cdhw_to_lc: expected [C,D,H,W]");
    int64_t C = x.dim(0), L = x.dim(1) * x.dim(2) * x.dim(3);
    return gather_op(x, {L, C}, "cdhw_to_lc",
                     [C, L](int64_t i) { return (i % C) * L + i / C; });
}

Tensor lc_to_cdhw(const Tensor& x, int64_t C, int64_t D, int64_t H, int64_t W) {
    check_matrix(x, "lc_to_cdhw");
    int64_t L = D * H * W;
    if (x.dim(0) != L || x.dim(1) != C) {
        throw ContractError("lc_to_cdhw: token matrix " + shape_str(x.shape()) +
                            " does not match [C,D,H,W] request");
    }
    return gather_op(x, {C, D, H, W}, "lc_to_cdhw",
                     [C, L](int64_t i) { return (i % L) * C + i / L; });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 4 || b.ndim() != 4) throw ContractError("concat_channels: expected [C,D,H,W]");
    check_same_dtype(a, b, "concat_channels");
    for (int i = 1; i < 4; ++i) {
        if (a.dim(i) != b.dim(i)) throw ContractError("concat_channels: spatial extents differ");
    }
    // Channel is the outermost axis, so the output buffer is a||b verbatim.
    int64_t na = a.numel();
    Tensor out = Tensor::zeros({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)}, a.dtype());
    dispatch_dtype(a.dtype(), [&]<typename T>() {
        T* op = out.data<T>();
        std::copy_n(a.cdata<T>(), a.numel(), op);
        std::copy_n(b.cdata<T>(), b.numel(), op + na);
    });
    if (tape_wants({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record("concat_channels", [ac, bc, oc, na]() mutable {
            if (!oc.has_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                if (ac.requires_grad()) {
                    T* gap = ac.ensure_grad().data<T>();
                    for (int64_t i = 0; i < na; ++i) gap[i] += gp[i];
                }
                if (bc.requires_grad()) {
                    T* gbp = bc.ensure_grad().data<T>();
                    for (int64_t i = 0; i < bc.numel(); ++i) gbp[i] += gp[na + i];
                }
            });
        });
    }
    return out;
}

namespace {

void check_map4(const Tensor& x, const char* who) {
    if (x.ndim() != 4) {
        throw ContractError(std::string(who) + ": expected [C,D,H,W], got " + shape_str(x.shape()));
    }
}

} // namespace

Tensor conv3(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    check_map4(x, "conv3 input");
    if (kernel.ndim() != 5 || kernel.dim(2) != 3 || kernel.dim(3) != 3 || kernel.dim(4) != 3) {
        throw ContractError("conv3: kernel must be [C_out,C_in,3,3,3], got " + shape_str(kernel.shape()));
    }
    check_same_dtype(x, kernel, "conv3");
    check_same_dtype(x, bias, "conv3");
    int64_t Cin = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t Cout = kernel.dim(0);
    if (kernel.dim(1) != Cin) {
        throw ContractError("conv3: kernel expects " + std::to_string(kernel.dim(1)) +
                            " input channels, input has " + std::to_string(Cin));
    }
    if (bias.ndim() != 1 || bias.dim(0) != Cout) throw ContractError("conv3: bias shape mismatch");
    Tensor out = Tensor::zeros({Cout, D, H, W}, x.dtype());
    int64_t plane = D * H * W;
    dispatch_dtype(x.dtype(), [&]<typename T>() {
        const T* xp = x.cdata<T>();
        const T* kp = kernel.cdata<T>();
        const T* bp = bias.cdata<T>();
        T* op = out.data<T>();
        for (int64_t co = 0; co < Cout; ++co) {
            T* oc = op + co * plane;
            T bv = bp[co];
            for (int64_t i = 0; i < plane; ++i) oc[i] = bv;
            for (int64_t ci = 0; ci < Cin; ++ci) {
                const T* xc = xp + ci * plane;
                const T* kc = kp + (co * Cin + ci) * 27;
                for (int64_t kd = 0; kd < 3; ++kd)
                    for (int64_t kh = 0; kh < 3; ++kh)
                        for (int64_t kw = 0; kw < 3; ++kw) {
                            T wv = kc[(kd * 3 + kh) * 3 + kw];
                            if (wv == T(0)) continue;
                            int64_t d0 = std::max<int64_t>(0, 1 - kd), d1 = std::min(D, D + 1 - kd);
                            int64_t h0 = std::max<int64_t>(0, 1 - kh), h1 = std::min(H, H + 1 - kh);
                            int64_t w0 = std::max<int64_t>(0, 1 - kw), w1 = std::min(W, W + 1 - kw);
                            for (int64_t d = d0; d < d1; ++d)
                                for (int64_t h = h0; h < h1; ++h) {
                                    T* orow = oc + (d * H + h) * W;
                                    const T* xrow = xc + ((d + kd - 1) * H + (h + kh - 1)) * W + (kw - 1);
                                    for (int64_t w = w0; w < w1; ++w) orow[w] += wv * xrow[w];
                                }
                        }
            }
        }
    });
    if (tape_wants({&x, &kernel, &bias})) {
        out.set_requires_grad(true);
        Tensor xc = x, kc = kernel, bc = bias, oc = out;
        Tape::active()->record("conv3", [xc, kc, bc, oc, Cin, Cout, D, H, W, plane]() mutable {
            if (!oc.has_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                const T* xp = xc.cdata<T>();
                const T* kp = kc.cdata<T>();
                T* gxp = xc.requires_grad() ? xc.ensure_grad().data<T>() : nullptr;
                T* gkp = kc.requires_grad() ? kc.ensure_grad().data<T>() : nullptr;
                T* gbp = bc.requires_grad() ? bc.ensure_grad().data<T>() : nullptr;
                for (int64_t co = 0; co < Cout; ++co) {
                    const T* gc = gp + co * plane;
                    if (gbp) {
                        T acc = 0;
                        for (int64_t i = 0; i < plane; ++i) acc += gc[i];
                        gbp[co] += acc;
                    }
                    for (int64_t ci = 0; ci < Cin; ++ci) {
                        const T* xcp = xp + ci * plane;
                        const T* kcp = kp + (co * Cin + ci) * 27;
                        T* gxc = gxp ? gxp + ci * plane : nullptr;
                        T* gkc = gkp ? gkp + (co * Cin + ci) * 27 : nullptr;
                        for (int64_t kd = 0; kd < 3; ++kd)
                            for (int64_t kh = 0; kh < 3; ++kh)
                                for (int64_t kw = 0; kw < 3; ++kw) {
                                    T wv = kcp[(kd * 3 + kh) * 3 + kw];
                                    T kacc = 0;
                                    int64_t d0 = std::max<int64_t>(0, 1 - kd), d1 = std::min(D, D + 1 - kd);
                                    int64_t h0 = std::max<int64_t>(0, 1 - kh), h1 = std::min(H, H + 1 - kh);
                                    int64_t w0 = std::max<int64_t>(0, 1 - kw), w1 = std::min(W, W + 1 - kw);
                                    for (int64_t d = d0; d < d1; ++d)
                                        for (int64_t h = h0; h < h1; ++h) {
                                            const T* grow = gc + (d * H + h) * W;
                                            int64_t xoff = ((d + kd - 1) * H + (h + kh - 1)) * W + (kw - 1);
                                            const T* xrow = xcp + xoff;
                                            if (gxc) {
                                                T* gxrow = gxc + xoff;
                                                for (int64_t w = w0; w < w1; ++w) gxrow[w] += wv * grow[w];
                                            }
                                            if (gkc) {
                                                for (int64_t w = w0; w < w1; ++w) kacc += grow[w] * xrow[w];
                                            }
                                        }
                                    if (gkc) gkc[(kd * 3 + kh) * 3 + kw] += kacc;
                                }
                    }
                }
            });
        });
    }
    return out;
}

Tensor conv1(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    check_map4(x, "conv1 input");
    check_matrix(kernel, "conv1 kernel");
    check_same_dtype(x, kernel, "conv1");
    check_same_dtype(x, bias, "conv1");
    int64_t Cin = x.dim(0), Cout = kernel.dim(0);
    if (kernel.dim(1) != Cin) throw ContractError("conv1: channel mismatch");
    if (bias.ndim() != 1 || bias.dim(0) != Cout) throw ContractError("conv1: bias shape mismatch");
    int64_t plane = x.numel() / Cin;
    Tensor out = Tensor::zeros({Cout, x.dim(1), x.dim(2), x.dim(3)}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<typename T>() {
        const T* xp = x.cdata<T>();
        const T* kp = kernel.cdata<T>();
        const T* bp = bias.cdata<T>();
        T* op = out.data<T>();
        for (int64_t co = 0; co < Cout; ++co) {
            T* oc = op + co * plane;
            for (int64_t i = 0; i < plane; ++i) oc[i] = bp[co];
            for (int64_t ci = 0; ci < Cin; ++ci) {
                T wv = kp[co * Cin + ci];
                if (wv == T(0)) continue;
                const T* xcp = xp + ci * plane;
                for (int64_t i = 0; i < plane; ++i) oc[i] += wv * xcp[i];
            }
        }
    });
    if (tape_wants({&x, &kernel, &bias})) {
        out.set_requires_grad(true);
        Tensor xc = x, kc = kernel, bc = bias, oc = out;
        Tape::active()->record("conv1", [xc, kc, bc, oc, Cin, Cout, plane]() mutable {
            if (!oc.has_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                const T* xp = xc.cdata<T>();
                const T* kp = kc.cdata<T>();
                for (int64_t co = 0; co < Cout; ++co) {
                    const T* gc = gp + co * plane;
                    if (bc.requires_grad()) {
                        T* gbp = bc.ensure_grad().data<T>();
                        T acc = 0;
                        for (int64_t i = 0; i < plane; ++i) acc += gc[i];
                        gbp[co] += acc;
                    }
                    for (int64_t ci = 0; ci < Cin; ++ci) {
                        const T* xcp = xp + ci * plane;
                        if (xc.requires_grad()) {
                            T* gxc = xc.ensure_grad().data<T>() + ci * plane;
                            T wv = kp[co * Cin + ci];
                            for (int64_t i = 0; i < plane; ++i) gxc[i] += wv * gc[i];
                        }
                        if (kc.requires_grad()) {
                            T* gkp = kc.ensure_grad().data<T>();
                            T acc = 0;
                            for (int64_t i = 0; i < plane; ++i) acc += gc[i] * xcp[i];
                            gkp[co * Cin + ci] += acc;
                        }
                    }
                }
            });
        });
    }
    return out;
}

Tensor avgpool2x(const Tensor& x) {
    check_map4(x, "avgpool2x");
    int64_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (D % 2 || H % 2 || W % 2) throw ContractError("avgpool2x: extents must be even");
    int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
    Tensor out = Tensor::zeros({C, Do, Ho, Wo}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<typename T>() {
        const T* xp = x.cdata<T>();
        T* op = out.data<T>();
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < Do; ++d)
                for (int64_t h = 0; h < Ho; ++h)
                    for (int64_t w = 0; w < Wo; ++w) {
                        T acc = 0;
                        for (int64_t dd = 0; dd < 2; ++dd)
                            for (int64_t hh = 0; hh < 2; ++hh)
                                for (int64_t ww = 0; ww < 2; ++ww)
                                    acc += xp[((c * D + 2 * d + dd) * H + 2 * h + hh) * W + 2 * w + ww];
                        op[((c * Do + d) * Ho + h) * Wo + w] = acc / T(8);
                    }
    });
    if (tape_wants({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("avgpool2x", [xc, oc, C, D, H, W, Do, Ho, Wo]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                T* gxp = xc.ensure_grad().data<T>();
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t d = 0; d < Do; ++d)
                        for (int64_t h = 0; h < Ho; ++h)
                            for (int64_t w = 0; w < Wo; ++w) {
                                T gv = gp[((c * Do + d) * Ho + h) * Wo + w] / T(8);
                                for (int64_t dd = 0; dd < 2; ++dd)
                                    for (int64_t hh = 0; hh < 2; ++hh)
                                        for (int64_t ww = 0; ww < 2; ++ww)
                                            gxp[((c * D + 2 * d + dd) * H + 2 * h + hh) * W + 2 * w + ww] += gv;
                            }
            });
        });
    }
    return out;
}

namespace {

// 1-D taps for x2 trilinear upsampling, align_corners=false:
// src = o/2 - 0.25, linear interpolation between floor and floor+1, clamped.
struct Tap {
    int64_t i0, i1;
    double w0, w1;
};

std::vector<Tap> upsample_taps(int64_t in, int64_t outn) {
    std::vector<Tap> taps(static_cast<size_t>(outn));
    for (int64_t o = 0; o < outn; ++o) {
        double src = 0.5 * static_cast<double>(o) - 0.25;
        double fl = std::floor(src);
        double t = src - fl;
        int64_t i0 = static_cast<int64_t>(fl);
        int64_t i1 = i0 + 1;
        i0 = std::clamp<int64_t>(i0, 0, in - 1);
        i1 = std::clamp<int64_t>(i1, 0, in - 1);
        taps[static_cast<size_t>(o)] = {i0, i1, 1.0 - t, t};
    }
    return taps;
}

} // namespace

Tensor upsample_trilinear2x(const Tensor& x) {
    check_map4(x, "upsample_trilinear2x");
    int64_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t Do = 2 * D, Ho = 2 * H, Wo = 2 * W;
    auto td = upsample_taps(D, Do), th = upsample_taps(H, Ho), tw = upsample_taps(W, Wo);
    Tensor out = Tensor::zeros({C, Do, Ho, Wo}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<typename T>() {
        const T* xp = x.cdata<T>();
        T* op = out.data<T>();
        for (int64_t c = 0; c < C; ++c) {
            const T* xc = xp + c * D * H * W;
            T* oc = op + c * Do * Ho * Wo;
            for (int64_t d = 0; d < Do; ++d)
                for (int64_t h = 0; h < Ho; ++h)
                    for (int64_t w = 0; w < Wo; ++w) {
                        const Tap& a = td[static_cast<size_t>(d)];
                        const Tap& b = th[static_cast<size_t>(h)];
                        const Tap& e = tw[static_cast<size_t>(w)];
                        double acc = 0;
                        for (int pd = 0; pd < 2; ++pd)
                            for (int ph = 0; ph < 2; ++ph)
                                for (int pw = 0; pw < 2; ++pw) {
                                    int64_t id = pd ? a.i1 : a.i0;
                                    int64_t ih = ph ? b.i1 : b.i0;
                                    int64_t iw = pw ? e.i1 : e.i0;
                                    double wt = (pd ? a.w1 : a.w0) * (ph ? b.w1 : b.w0) * (pw ? e.w1 : e.w0);
                                    acc += wt * static_cast<double>(xc[(id * H + ih) * W + iw]);
                                }
                        oc[(d * Ho + h) * Wo + w] = static_cast<T>(acc);
                    }
        }
    });
    if (tape_wants({&x})) {
        out.set_requires_grad(true);
        Tensor xc = x, oc = out;
        Tape::active()->record("upsample_trilinear2x",
                               [xc, oc, C, D, H, W, Do, Ho, Wo, td, th, tw]() mutable {
            if (!oc.has_grad() || !xc.requires_grad()) return;
            Tensor g = oc.grad();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* gp = g.cdata<T>();
                T* gxp = xc.ensure_grad().data<T>();
                for (int64_t c = 0; c < C; ++c) {
                    T* gxc = gxp + c * D * H * W;
                    const T* gc = gp + c * Do * Ho * Wo;
                    for (int64_t d = 0; d < Do; ++d)
                        for (int64_t h = 0; h < Ho; ++h)
                            for (int64_t w = 0; w < Wo; ++w) {
                                const Tap& a = td[static_cast<size_t>(d)];
                                const Tap& b = th[static_cast<size_t>(h)];
                                const Tap& e = tw[static_cast<size_t>(w)];
                                double gv = static_cast<double>(gc[(d * Ho + h) * Wo + w]);
                                for (int pd = 0; pd < 2; ++pd)
                                    for (int ph = 0; ph < 2; ++ph)
                                        for (int pw = 0; pw < 2; ++pw) {
                                            int64_t id = pd ? a.i1 : a.i0;
                                            int64_t ih = ph ? b.i1 : b.i0;
                                            int64_t iw = pw ? e.i1 : e.i0;
                                            double wt = (pd ? a.w1 : a.w0) * (ph ? b.w1 : b.w0) *
                                                        (pw ? e.w1 : e.w0);
                                            gxc[(id * H + ih) * W + iw] += static_cast<T>(wt * gv);
                                        }
                            }
                }
            });
        });
    }
    return out;
}

} // namespace dsm::ops
