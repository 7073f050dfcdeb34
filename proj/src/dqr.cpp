#include "dsm/dqr.hpp"

#include <array>
#include <cmath>

namespace dsm::dqr {

namespace {

constexpr double kLambda = 1.0 / 26.0;

struct Offset {
    int64_t dd, dh, dw;
};

const std::array<Offset, 26>& neighbor_offsets() {
    static const std::array<Offset, 26> offs = [] {
        std::array<Offset, 26> o{};
        int idx = 0;
        for (int64_t dd = -1; dd <= 1; ++dd)
            for (int64_t dh = -1; dh <= 1; ++dh)
                for (int64_t dw = -1; dw <= 1; ++dw) {
                    if (dd == 0 && dh == 0 && dw == 0) continue;
                    o[idx++] = {dd, dh, dw};
                }
        return o;
    }();
    return offs;
}

} // namespace

double diffusivity(double s, double kappa) {
    if (s < 0) throw ContractError("diffusivity: s must be non-negative");
    if (kappa <= 0) throw ContractError("diffusivity: kappa must be positive");
    return std::exp(-s / (kappa * kappa));
}

Tensor diffusion_step(const Tensor& F, const Tensor& G, const Tensor& log_kappa) {
    if (F.ndim() != 4 || G.ndim() != 4) {
        throw ContractError("diffusion_step: F and G must be [C,D,H,W] maps");
    }
    if (F.dim(1) != G.dim(1) || F.dim(2) != G.dim(2) || F.dim(3) != G.dim(3)) {
        throw ContractError("diffusion_step: F and G spatial extents differ");
    }
    if (F.dtype() != G.dtype() || F.dtype() != log_kappa.dtype()) {
        throw ContractError("diffusion_step: mixed dtypes");
    }
    int64_t C = F.dim(0), D = F.dim(1), H = F.dim(2), W = F.dim(3);
    int64_t M = G.dim(0);
    if (log_kappa.ndim() != 1 || log_kappa.dim(0) != C) {
        throw ContractError("diffusion_step: log_kappa must have one entry per feature channel");
    }
    int64_t plane = D * H * W;
    Tensor out = Tensor::zeros(F.shape(), F.dtype());
    const auto& offs = neighbor_offsets();
    dispatch_dtype(F.dtype(), [&]<typename T>() {
        const T* fp = F.cdata<T>();
        const T* gp = G.cdata<T>();
        const T* lkp = log_kappa.cdata<T>();
        T* op = out.data<T>();
        std::vector<double> inv_k2(static_cast<size_t>(C));
        for (int64_t c = 0; c < C; ++c) {
            inv_k2[c] = std::exp(-2.0 * static_cast<double>(lkp[c]));
        }
        std::vector<double> acc(static_cast<size_t>(C));
        for (int64_t d = 0; d < D; ++d)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) {
                    int64_t p = (d * H + h) * W + w;
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (const Offset& o : offs) {
                        int64_t qd = d + o.dd, qh = h + o.dh, qw = w + o.dw;
                        if (qd < 0 || qd >= D || qh < 0 || qh >= H || qw < 0 || qw >= W) continue;
                        int64_t q = (qd * H + qh) * W + qw;
                        double s = 0;
                        for (int64_t m = 0; m < M; ++m) {
                            double dg = static_cast<double>(gp[m * plane + q]) - gp[m * plane + p];
                            s += dg * dg;
                        }
                        for (int64_t c = 0; c < C; ++c) {
                            double gval = std::exp(-s * inv_k2[c]);
                            double df = static_cast<double>(fp[c * plane + q]) - fp[c * plane + p];
                            acc[c] += gval * df;
                        }
                    }
                    for (int64_t c = 0; c < C; ++c) {
                        op[c * plane + p] = static_cast<T>(kLambda * acc[c]);
                    }
                }
    });
    bool wants = Tape::recording() &&
                 (F.requires_grad() || G.requires_grad() || log_kappa.requires_grad());
    if (wants) {
        out.set_requires_grad(true);
        Tensor Fc = F, Gc = G, lk = log_kappa, oc = out;
        Tape::active()->record("diffusion_step", [Fc, Gc, lk, oc, C, D, H, W, M, plane]() mutable {
            if (!oc.has_grad()) return;
            bool wf = Fc.requires_grad(), wg = Gc.requires_grad(), wk = lk.requires_grad();
            if (!wf && !wg && !wk) return;
            Tensor gout = oc.grad();
            const auto& offs = neighbor_offsets();
            dispatch_dtype(oc.dtype(), [&]<typename T>() {
                const T* fp = Fc.cdata<T>();
                const T* gp = Gc.cdata<T>();
                const T* lkp = lk.cdata<T>();
                const T* ghp = gout.cdata<T>();
                T* gF = wf ? Fc.ensure_grad().data<T>() : nullptr;
                T* gG = wg ? Gc.ensure_grad().data<T>() : nullptr;
                T* gK = wk ? lk.ensure_grad().data<T>() : nullptr;
                std::vector<double> inv_k2(static_cast<size_t>(C));
                for (int64_t c = 0; c < C; ++c) {
                    inv_k2[c] = std::exp(-2.0 * static_cast<double>(lkp[c]));
                }
                for (int64_t d = 0; d < D; ++d)
                    for (int64_t h = 0; h < H; ++h)
                        for (int64_t w = 0; w < W; ++w) {
                            int64_t p = (d * H + h) * W + w;
                            for (const Offset& o : offs) {
                                int64_t qd = d + o.dd, qh = h + o.dh, qw = w + o.dw;
                                if (qd < 0 || qd >= D || qh < 0 || qh >= H || qw < 0 || qw >= W)
                                    continue;
                                int64_t q = (qd * H + qh) * W + qw;
                                double s = 0;
                                for (int64_t m = 0; m < M; ++m) {
                                    double dg =
                                        static_cast<double>(gp[m * plane + q]) - gp[m * plane + p];
                                    s += dg * dg;
                                }
                                double gs = 0;
                                for (int64_t c = 0; c < C; ++c) {
                                    double gval = std::exp(-s * inv_k2[c]);
                                    double df =
                                        static_cast<double>(fp[c * plane + q]) - fp[c * plane + p];
                                    double coef = kLambda * static_cast<double>(ghp[c * plane + p]);
                                    if (wf) {
                                        gF[c * plane + q] += static_cast<T>(coef * gval);
                                        gF[c * plane + p] -= static_cast<T>(coef * gval);
                                    }
                                    double wdf = coef * df * gval;
                                    if (wg) gs -= wdf * inv_k2[c];
                                    if (wk) gK[c] += static_cast<T>(wdf * 2.0 * s * inv_k2[c]);
                                }
                                if (wg && gs != 0.0) {
                                    for (int64_t m = 0; m < M; ++m) {
                                        double dg = static_cast<double>(gp[m * plane + q]) -
                                                    gp[m * plane + p];
                                        gG[m * plane + q] += static_cast<T>(gs * 2.0 * dg);
                                        gG[m * plane + p] -= static_cast<T>(gs * 2.0 * dg);
                                    }
                                }
                            }
                        }
            });
        });
    }
    return out;
}

Tensor fuse_features(const Tensor& F, const Tensor& Fhat, const Tensor& k3,
                     const Tensor& b3, const Tensor& kproj, const Tensor& bproj) {
    Tensor mixed = ops::conv3(ops::add(F, Fhat), k3, b3);
    return ops::conv1(ops::upsample_trilinear2x(mixed), kproj, bproj);
}

Tensor prompt_masked_attention(const Tensor& T, const Tensor& F, const Tensor& Fhat,
                               const Tensor& mask, const attn::Mha& mha) {
    Tensor tokens = ops::cdhw_to_lc(ops::concat_channels(F, Fhat));
    Tensor mrow;
    if (mask.defined()) {
        if (mask.ndim() != 1 || mask.dim(0) != tokens.dim(0)) {
            throw ContractError("prompt_masked_attention: mask must cover the flattened voxels");
        }
        mrow = ops::reshape(mask, {1, mask.dim(0)});
    }
    return ops::add(T, mha.forward(T, tokens, mrow));
}

Tensor joint_self_attention(const Tensor& O, const Tensor& T, const attn::Mha& mha) {
    Tensor X = ops::concat_rows(O, T);
    return ops::add(X, mha.forward(X, X));
}

DqrBlock DqrBlock::init(Rng& rng, int64_t channels, int64_t guide_channels,
                        int64_t heads, double kappa_init, bool with_fuse,
                        int64_t next_channels, Dtype dt) {
    if (kappa_init <= 0) throw ContractError("DqrBlock::init: kappa_init must be positive");
    DqrBlock b;
    b.guide_k = Tensor::randn(rng, {guide_channels, channels},
                              1.0 / std::sqrt(static_cast<double>(channels)), dt);
    b.guide_b = Tensor::zeros({guide_channels}, dt);
    b.log_kappa = Tensor::full({channels}, std::log(kappa_init), dt);
    b.cross = attn::Mha::init(rng, channels, 2 * channels, channels, heads, dt);
    b.has_fuse = with_fuse;
    if (with_fuse) {
        // Identity fusion at init: the block starts as pure trilinear
        // upsampling of F + Fhat, so the decoder is signal-preserving before
        // any training step.
        b.fuse_k3 = Tensor::zeros({channels, channels, 3, 3, 3}, dt);
        for (int64_t c = 0; c < channels; ++c) {
            b.fuse_k3.set((c * channels + c) * 27 + 13, 1.0); // center tap
        }
        b.fuse_b3 = Tensor::zeros({channels}, dt);
        if (next_channels == channels) {
            b.fuse_kp = Tensor::eye(channels, dt);
        } else {
            b.fuse_kp = Tensor::randn(rng, {next_channels, channels},
                                      1.0 / std::sqrt(static_cast<double>(channels)), dt);
        }
        b.fuse_bp = Tensor::zeros({next_channels}, dt);
    }
    for (Tensor* t : {&b.guide_k, &b.guide_b, &b.log_kappa}) t->set_requires_grad(true);
    if (with_fuse) {
        for (Tensor* t : {&b.fuse_k3, &b.fuse_b3, &b.fuse_kp, &b.fuse_bp}) {
            t->set_requires_grad(true);
        }
    }
    return b;
}

DqrBlock::Out DqrBlock::forward(const Tensor& T, const Tensor& F, const Tensor& mask) const {
    Tensor fhat;
    if (use_diffusion) {
        Tensor guide = ops::conv1(F, guide_k, guide_b);
        fhat = diffusion_step(F, guide, log_kappa);
    } else {
        fhat = Tensor::zeros(F.shape(), F.dtype());
    }
    Out o;
    o.Fhat = fhat;
    o.T_out = prompt_masked_attention(T, F, fhat, mask, cross);
    if (has_fuse) {
        o.F_next = fuse_features(F, fhat, fuse_k3, fuse_b3, fuse_kp, fuse_bp);
    }
    return o;
}

void DqrBlock::collect(const std::string& prefix, ParamMap& out) const {
    out.add(prefix + ".guide_k", guide_k);
    out.add(prefix + ".guide_b", guide_b);
    out.add(prefix + ".log_kappa", log_kappa);
    cross.collect(prefix + ".cross", out);
    if (has_fuse) {
        out.add(prefix + ".fuse_k3", fuse_k3);
        out.add(prefix + ".fuse_b3", fuse_b3);
        out.add(prefix + ".fuse_kp", fuse_kp);
        out.add(prefix + ".fuse_bp", fuse_bp);
    }
}

} // namespace dsm::dqr
