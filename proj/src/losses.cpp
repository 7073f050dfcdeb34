#include "dsm/losses.hpp"

#include <cmath>
#include <set>

namespace dsm::losses {

namespace {

constexpr double kDiceEps = 1e-6;
constexpr double kBceLo = 1e-7;
constexpr double kBceHi = 1.0 - 1e-7;

// validates the shared contract and returns a per-row labeled flag vector
std::vector<char> check_inputs(const Tensor& Y, const Tensor& Yhat,
                               const std::vector<int64_t>& labeled, const char* name) {
    if (Y.ndim() != 2 || Yhat.ndim() != 2 || Y.shape() != Yhat.shape()) {
        throw ContractError(std::string(name) + ": Y and Yhat must be matching [K,V] matrices");
    }
    if (Y.dtype() != Yhat.dtype()) throw ContractError(std::string(name) + ": mixed dtypes");
    int64_t K = Y.dim(0);
    std::vector<char> flag(static_cast<size_t>(K), 0);
    std::set<int64_t> uniq;
    for (int64_t k : labeled) {
        if (k < 0 || k >= K) throw ContractError(std::string(name) + ": labeled index out of range");
        if (!uniq.insert(k).second) {
            throw ContractError(std::string(name) + ": duplicate labeled index");
        }
        flag[static_cast<size_t>(k)] = 1;
    }
    for (int64_t i = 0; i < Y.numel(); ++i) {
        double y = Y.at(i);
        if (y != 0.0 && y != 1.0) throw ContractError(std::string(name) + ": Y must be one-hot");
    }
    for (int64_t i = 0; i < Yhat.numel(); ++i) {
        double v = Yhat.at(i);
        if (!(v >= 0.0 && v <= 1.0)) {
            throw ContractError(std::string(name) + ": Yhat must lie in [0,1]");
        }
    }
    return flag;
}

// same row/label validation but for unbounded logits instead of probabilities
std::vector<char> check_logits_inputs(const Tensor& Y, const Tensor& Z,
                                      const std::vector<int64_t>& labeled, const char* name) {
    if (Y.ndim() != 2 || Z.ndim() != 2 || Y.shape() != Z.shape()) {
        throw ContractError(std::string(name) + ": Y and Z must be matching [K,V] matrices");
    }
    if (Y.dtype() != Z.dtype()) throw ContractError(std::string(name) + ": mixed dtypes");
    int64_t K = Y.dim(0);
    std::vector<char> flag(static_cast<size_t>(K), 0);
    std::set<int64_t> uniq;
    for (int64_t k : labeled) {
        if (k < 0 || k >= K) throw ContractError(std::string(name) + ": labeled index out of range");
        if (!uniq.insert(k).second) {
            throw ContractError(std::string(name) + ": duplicate labeled index");
        }
        flag[static_cast<size_t>(k)] = 1;
    }
    for (int64_t i = 0; i < Y.numel(); ++i) {
        double y = Y.at(i);
        if (y != 0.0 && y != 1.0) throw ContractError(std::string(name) + ": Y must be one-hot");
    }
    for (int64_t i = 0; i < Z.numel(); ++i) {
        if (!std::isfinite(Z.at(i))) {
            throw ContractError(std::string(name) + ": Z must be finite");
        }
    }
    return flag;
}

double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double ez = std::exp(z);
    return ez / (1.0 + ez);
}

// cross-entropy of sigmoid(z) against target t without forming the probability:
// max(z,0) - z*t + log(1 + exp(-|z|))
double logits_ce(double z, double t) {
    return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
}

Tensor scalar_out(double value, Dtype dt) {
    Tensor t = Tensor::zeros({1}, dt);
    t.set(0, value);
    return t;
}

} // namespace

Tensor dice_loss(const Tensor& Y, const Tensor& Yhat, const std::vector<int64_t>& labeled,
                 bool aggregated) {
    std::vector<char> flag = check_inputs(Y, Yhat, labeled, "dice_loss");
    int64_t K = Y.dim(0), V = Y.dim(1);
    double loss = 0;
    if (aggregated) {
        for (int64_t k = 0; k < K; ++k) {
            if (!flag[static_cast<size_t>(k)]) continue;
            double num = 0, sy = 0, sp = 0;
            for (int64_t j = 0; j < V; ++j) {
                double y = Y.at(k * V + j), p = Yhat.at(k * V + j);
                num += y * p;
                sy += y;
                sp += p;
            }
            loss += 1.0 - 2.0 * num / (sy + sp + kDiceEps);
        }
    } else {
        for (int64_t k = 0; k < K; ++k) {
            if (!flag[static_cast<size_t>(k)]) continue;
            for (int64_t j = 0; j < V; ++j) {
                double y = Y.at(k * V + j), p = Yhat.at(k * V + j);
                loss += 1.0 - 2.0 * y * p / (y + p + kDiceEps);
            }
        }
    }
    Tensor out = scalar_out(loss, Y.dtype());
    if (Tape::recording() && Yhat.requires_grad()) {
        out.set_requires_grad(true);
        Tensor Yc = Y, Pc = Yhat, oc = out;
        Tape::active()->record("dice_loss", [Yc, Pc, oc, flag, K, V, aggregated]() mutable {
            if (!oc.has_grad()) return;
            double go = oc.grad().at(0);
            dispatch_dtype(Pc.dtype(), [&]<typename T>() {
                const T* yp = Yc.cdata<T>();
                const T* pp = Pc.cdata<T>();
                T* gp = Pc.ensure_grad().data<T>();
                for (int64_t k = 0; k < K; ++k) {
                    if (!flag[static_cast<size_t>(k)]) continue;
                    if (aggregated) {
                        double num = 0, den = kDiceEps;
                        for (int64_t j = 0; j < V; ++j) {
                            double y = yp[k * V + j], p = pp[k * V + j];
                            num += y * p;
                            den += y + p;
                        }
                        for (int64_t j = 0; j < V; ++j) {
                            double y = yp[k * V + j];
                            gp[k * V + j] +=
                                static_cast<T>(go * (-2.0) * (y * den - num) / (den * den));
                        }
                    } else {
                        for (int64_t j = 0; j < V; ++j) {
                            double y = yp[k * V + j], p = pp[k * V + j];
                            double den = y + p + kDiceEps;
                            gp[k * V + j] +=
                                static_cast<T>(go * (-2.0) * y * (y + kDiceEps) / (den * den));
                        }
                    }
                }
            });
        });
    }
    return out;
}

Tensor bce_loss(const Tensor& Y, const Tensor& Yhat, const std::vector<int64_t>& labeled) {
    std::vector<char> flag = check_inputs(Y, Yhat, labeled, "bce_loss");
    int64_t K = Y.dim(0), V = Y.dim(1);
    double loss = 0;
    for (int64_t k = 0; k < K; ++k) {
        if (!flag[static_cast<size_t>(k)]) continue;
        for (int64_t j = 0; j < V; ++j) {
            double y = Y.at(k * V + j);
            double c = std::clamp(Yhat.at(k * V + j), kBceLo, kBceHi);
            loss -= y * std::log(c) + (1.0 - y) * std::log(1.0 - c);
        }
    }
    Tensor out = scalar_out(loss, Y.dtype());
    if (Tape::recording() && Yhat.requires_grad()) {
        out.set_requires_grad(true);
        Tensor Yc = Y, Pc = Yhat, oc = out;
        Tape::active()->record("bce_loss", [Yc, Pc, oc, flag, K, V]() mutable {
            if (!oc.has_grad()) return;
            double go = oc.grad().at(0);
            dispatch_dtype(Pc.dtype(), [&]<typename T>() {
                const T* yp = Yc.cdata<T>();
                const T* pp = Pc.cdata<T>();
                T* gp = Pc.ensure_grad().data<T>();
                for (int64_t k = 0; k < K; ++k) {
                    if (!flag[static_cast<size_t>(k)]) continue;
                    for (int64_t j = 0; j < V; ++j) {
                        double p = pp[k * V + j];
                        if (p < kBceLo || p > kBceHi) continue; // clamp plateau
                        double y = yp[k * V + j];
                        gp[k * V + j] += static_cast<T>(go * (p - y) / (p * (1.0 - p)));
                    }
                }
            });
        });
    }
    return out;
}

Tensor stage2_bce(const Tensor& Y, const Tensor& Yhat, const Tensor& p_diag,
                  const std::vector<int64_t>& labeled) {
    std::vector<char> flag = check_inputs(Y, Yhat, labeled, "stage2_bce");
    int64_t K = Y.dim(0), V = Y.dim(1);
    if (p_diag.ndim() != 1 || p_diag.dim(0) != K) {
        throw ContractError("stage2_bce: p_diag must hold one probability per class row");
    }
    for (int64_t k = 0; k < K; ++k) {
        double v = p_diag.at(k);
        if (!(v >= 0.0 && v <= 1.0)) throw ContractError("stage2_bce: p_diag outside [0,1]");
    }
    double loss = 0;
    for (int64_t k = 0; k < K; ++k) {
        if (!flag[static_cast<size_t>(k)]) continue;
        double w = p_diag.at(k);
        for (int64_t j = 0; j < V; ++j) {
            double t = w * Y.at(k * V + j);
            double c = std::clamp(Yhat.at(k * V + j), kBceLo, kBceHi);
            loss -= t * std::log(c) + (1.0 - t) * std::log(1.0 - c);
        }
    }
    Tensor out = scalar_out(loss, Y.dtype());
    bool wants = Tape::recording() && (Yhat.requires_grad() || p_diag.requires_grad());
    if (wants) {
        out.set_requires_grad(true);
        Tensor Yc = Y, Pc = Yhat, wc = p_diag, oc = out;
        Tape::active()->record("stage2_bce", [Yc, Pc, wc, oc, flag, K, V]() mutable {
            if (!oc.has_grad()) return;
            double go = oc.grad().at(0);
            bool dp = Pc.requires_grad(), dw = wc.requires_grad();
            dispatch_dtype(Pc.dtype(), [&]<typename T>() {
                const T* yp = Yc.cdata<T>();
                const T* pp = Pc.cdata<T>();
                const T* wp = wc.cdata<T>();
                T* gp = dp ? Pc.ensure_grad().data<T>() : nullptr;
                T* gw = dw ? wc.ensure_grad().data<T>() : nullptr;
                for (int64_t k = 0; k < K; ++k) {
                    if (!flag[static_cast<size_t>(k)]) continue;
                    double w = wp[k];
                    for (int64_t j = 0; j < V; ++j) {
                        double y = yp[k * V + j];
                        double c = std::clamp(static_cast<double>(pp[k * V + j]), kBceLo, kBceHi);
                        if (dw && y != 0.0) {
                            gw[k] -= static_cast<T>(go * y * (std::log(c) - std::log(1.0 - c)));
                        }
                        if (!dp) continue;
                        double p = pp[k * V + j];
                        if (p < kBceLo || p > kBceHi) continue; // clamp plateau
                        double t = w * y;
                        gp[k * V + j] += static_cast<T>(go * (-t / p + (1.0 - t) / (1.0 - p)));
                    }
                }
            });
        });
    }
    return out;
}

Tensor bce_logits_loss(const Tensor& Y, const Tensor& Z, const std::vector<int64_t>& labeled) {
    std::vector<char> flag = check_logits_inputs(Y, Z, labeled, "bce_logits_loss");
    int64_t K = Y.dim(0), V = Y.dim(1);
    double loss = 0;
    for (int64_t k = 0; k < K; ++k) {
        if (!flag[static_cast<size_t>(k)]) continue;
        for (int64_t j = 0; j < V; ++j) {
            loss += logits_ce(Z.at(k * V + j), Y.at(k * V + j));
        }
    }
    Tensor out = scalar_out(loss, Y.dtype());
    if (Tape::recording() && Z.requires_grad()) {
        out.set_requires_grad(true);
        Tensor Yc = Y, Zc = Z, oc = out;
        Tape::active()->record("bce_logits_loss", [Yc, Zc, oc, flag, K, V]() mutable {
            if (!oc.has_grad()) return;
            double go = oc.grad().at(0);
            dispatch_dtype(Zc.dtype(), [&]<typename T>() {
                const T* yp = Yc.cdata<T>();
                const T* zp = Zc.cdata<T>();
                T* gz = Zc.ensure_grad().data<T>();
                for (int64_t k = 0; k < K; ++k) {
                    if (!flag[static_cast<size_t>(k)]) continue;
                    for (int64_t j = 0; j < V; ++j) {
                        double s = stable_sigmoid(zp[k * V + j]);
                        gz[k * V + j] += static_cast<T>(go * (s - yp[k * V + j]));
                    }
                }
            });
        });
    }
    return out;
}

Tensor stage2_bce_logits(const Tensor& Y, const Tensor& Z, const Tensor& p_diag,
                         const std::vector<int64_t>& labeled) {
    std::vector<char> flag = check_logits_inputs(Y, Z, labeled, "stage2_bce_logits");
    int64_t K = Y.dim(0), V = Y.dim(1);
    if (p_diag.ndim() != 1 || p_diag.dim(0) != K) {
        throw ContractError("stage2_bce_logits: p_diag must hold one probability per class row");
    }
    for (int64_t k = 0; k < K; ++k) {
        double v = p_diag.at(k);
        if (!(v >= 0.0 && v <= 1.0)) throw ContractError("stage2_bce_logits: p_diag outside [0,1]");
    }
    double loss = 0;
    for (int64_t k = 0; k < K; ++k) {
        if (!flag[static_cast<size_t>(k)]) continue;
        double w = p_diag.at(k);
        for (int64_t j = 0; j < V; ++j) {
            loss += logits_ce(Z.at(k * V + j), w * Y.at(k * V + j));
        }
    }
    Tensor out = scalar_out(loss, Y.dtype());
    bool wants = Tape::recording() && (Z.requires_grad() || p_diag.requires_grad());
    if (wants) {
        out.set_requires_grad(true);
        Tensor Yc = Y, Zc = Z, wc = p_diag, oc = out;
        Tape::active()->record("stage2_bce_logits", [Yc, Zc, wc, oc, flag, K, V]() mutable {
            if (!oc.has_grad()) return;
            double go = oc.grad().at(0);
            bool dz = Zc.requires_grad(), dw = wc.requires_grad();
            dispatch_dtype(Zc.dtype(), [&]<typename T>() {
                const T* yp = Yc.cdata<T>();
                const T* zp = Zc.cdata<T>();
                const T* wp = wc.cdata<T>();
                T* gz = dz ? Zc.ensure_grad().data<T>() : nullptr;
                T* gw = dw ? wc.ensure_grad().data<T>() : nullptr;
                for (int64_t k = 0; k < K; ++k) {
                    if (!flag[static_cast<size_t>(k)]) continue;
                    double w = wp[k];
                    for (int64_t j = 0; j < V; ++j) {
                        double y = yp[k * V + j];
                        double z = zp[k * V + j];
                        if (dz) gz[k * V + j] += static_cast<T>(go * (stable_sigmoid(z) - w * y));
                        if (dw && y != 0.0) gw[k] += static_cast<T>(go * (-z) * y);
                    }
                }
            });
        });
    }
    return out;
}

} // namespace dsm::losses
