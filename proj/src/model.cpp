#include "dsm/model.hpp"

#include <cmath>

namespace dsm::model {

using ops::add;
using ops::avgpool2x;
using ops::cdhw_to_lc;
using ops::conv1;
using ops::conv3;
using ops::matmul;
using ops::silu;
using ops::transpose2d;
using ops::upsample_trilinear2x;

void ModelConfig::validate() const {
    if (patch <= 0 || patch % 8 != 0) {
        throw ContractError("ModelConfig: patch extent must be a positive multiple of 8");
    }
    for (int64_t w : widths) {
        if (w <= 0) throw ContractError("ModelConfig: widths must be positive");
    }
    if (embed <= 0 || guide <= 0 || n_state <= 0) {
        throw ContractError("ModelConfig: embed/guide/n_state must be positive");
    }
    if (heads <= 0 || embed % heads != 0 || (2 * embed) % heads != 0) {
        throw ContractError("ModelConfig: heads must divide the attention widths");
    }
    if (n_organ_queries < 2 || n_tumor_queries < 1) {
        throw ContractError("ModelConfig: need a background+organ query set and >= 1 tumor query");
    }
    if (text_dim < n_organ_queries + n_tumor_queries) {
        throw ContractError("ModelConfig: text_dim must cover all classes");
    }
    if (!(tau > 0) || !(kappa_init > 0)) {
        throw ContractError("ModelConfig: tau and kappa_init must be positive");
    }
}

namespace {

// 3x3x3 kernel [c_out, c_in, 3,3,3] with He-style scale.
Tensor conv3_kernel(Rng& rng, int64_t c_out, int64_t c_in, Dtype dt) {
    return Tensor::randn(rng, {c_out, c_in, 3, 3, 3},
                         1.0 / std::sqrt(static_cast<double>(c_in) * 27.0), dt)
        .set_requires_grad(true);
}

Tensor conv1_kernel(Rng& rng, int64_t c_out, int64_t c_in, Dtype dt) {
    return Tensor::randn(rng, {c_out, c_in}, 1.0 / std::sqrt(static_cast<double>(c_in)), dt)
        .set_requires_grad(true);
}

Tensor bias(int64_t c, Dtype dt) {
    return Tensor::zeros({c}, dt).set_requires_grad(true);
}

// Per-voxel channel RMS normalization. Without any normalization the stage
// outputs drift in scale as depth grows and the optimizer crawls; this keeps
// every stage's activations at unit RMS with no learned state.
Tensor norm_cdhw(const Tensor& x) {
    int64_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
    return ops::lc_to_cdhw(ops::rmsnorm_rows(cdhw_to_lc(x)), C, D, H, W);
}

} // namespace

ResBlock ResBlock::init(Rng& rng, int64_t channels, Dtype dt) {
    ResBlock b;
    b.k1 = conv3_kernel(rng, channels, channels, dt);
    b.b1 = bias(channels, dt);
    b.k2 = Tensor::zeros({channels, channels, 3, 3, 3}, dt).set_requires_grad(true);
    b.b2 = bias(channels, dt);
    return b;
}

Tensor ResBlock::forward(const Tensor& x) const {
    return add(x, conv3(silu(conv3(x, k1, b1)), k2, b2));
}

void ResBlock::collect(const std::string& prefix, ParamMap& out) const {
    out.add(prefix + ".k1", k1);
    out.add(prefix + ".b1", b1);
    out.add(prefix + ".k2", k2);
    out.add(prefix + ".b2", b2);
}

Backbone Backbone::init(Rng& rng, const ModelConfig& cfg, Dtype dt) {
    const auto& w = cfg.widths;
    Backbone b;
    b.stem_k = conv3_kernel(rng, w[0], 1, dt);
    b.stem_b = bias(w[0], dt);
    b.enc0 = ResBlock::init(rng, w[0], dt);
    b.down1_k = conv1_kernel(rng, w[1], w[0], dt);
    b.down1_b = bias(w[1], dt);
    b.enc1 = ResBlock::init(rng, w[1], dt);
    b.down2_k = conv1_kernel(rng, w[2], w[1], dt);
    b.down2_b = bias(w[2], dt);
    b.enc2 = ResBlock::init(rng, w[2], dt);
    b.down3_k = conv1_kernel(rng, w[3], w[2], dt);
    b.down3_b = bias(w[3], dt);
    b.enc3 = ResBlock::init(rng, w[3], dt);

    b.up2_k = conv1_kernel(rng, w[2], w[3], dt);
    b.up2_b = bias(w[2], dt);
    b.dec2 = ResBlock::init(rng, w[2], dt);
    b.up1_k = conv1_kernel(rng, w[1], w[2], dt);
    b.up1_b = bias(w[1], dt);
    b.dec1 = ResBlock::init(rng, w[1], dt);
    b.up0_k = conv1_kernel(rng, w[0], w[1], dt);
    b.up0_b = bias(w[0], dt);
    b.dec0 = ResBlock::init(rng, w[0], dt);

    const std::array<int64_t, 4> neck_in = {w[3], w[2], w[1], w[0]};
    for (int i = 0; i < 4; ++i) {
        b.neck_k[static_cast<size_t>(i)] = conv1_kernel(rng, cfg.embed, neck_in[static_cast<size_t>(i)], dt);
        b.neck_b[static_cast<size_t>(i)] = bias(cfg.embed, dt);
    }
    b.embed_k = conv3_kernel(rng, cfg.embed, w[0], dt);
    b.embed_b = bias(cfg.embed, dt);
    return b;
}

Backbone::Pyramid Backbone::forward(const Tensor& vol) const {
    if (vol.ndim() != 4 || vol.dim(0) != 1) {
        throw ContractError("Backbone: expected a [1, D, H, W] volume");
    }
    for (int i = 1; i < 4; ++i) {
        if (vol.dim(i) % 8 != 0) {
            throw ContractError("Backbone: extents must be divisible by 8");
        }
    }
    Tensor e0 = norm_cdhw(enc0.forward(silu(conv3(vol, stem_k, stem_b))));
    Tensor e1 = norm_cdhw(enc1.forward(silu(conv1(avgpool2x(e0), down1_k, down1_b))));
    Tensor e2 = norm_cdhw(enc2.forward(silu(conv1(avgpool2x(e1), down2_k, down2_b))));
    Tensor e3 = norm_cdhw(enc3.forward(silu(conv1(avgpool2x(e2), down3_k, down3_b))));

    Tensor d2 = norm_cdhw(dec2.forward(add(silu(conv1(upsample_trilinear2x(e3), up2_k, up2_b)), e2)));
    Tensor d1 = norm_cdhw(dec1.forward(add(silu(conv1(upsample_trilinear2x(d2), up1_k, up1_b)), e1)));
    Tensor d0 = norm_cdhw(dec0.forward(add(silu(conv1(upsample_trilinear2x(d1), up0_k, up0_b)), e0)));

    Pyramid p;
    p.F[0] = conv1(e3, neck_k[0], neck_b[0]);
    p.F[1] = conv1(d2, neck_k[1], neck_b[1]);
    p.F[2] = conv1(d1, neck_k[2], neck_b[2]);
    p.F[3] = conv1(d0, neck_k[3], neck_b[3]);
    p.Fhat = conv3(d0, embed_k, embed_b);
    return p;
}

void Backbone::collect(const std::string& prefix, ParamMap& out) const {
    out.add(prefix + ".stem_k", stem_k);
    out.add(prefix + ".stem_b", stem_b);
    enc0.collect(prefix + ".enc0", out);
    out.add(prefix + ".down1_k", down1_k);
    out.add(prefix + ".down1_b", down1_b);
    enc1.collect(prefix + ".enc1", out);
    out.add(prefix + ".down2_k", down2_k);
    out.add(prefix + ".down2_b", down2_b);
    enc2.collect(prefix + ".enc2", out);
    out.add(prefix + ".down3_k", down3_k);
    out.add(prefix + ".down3_b", down3_b);
    enc3.collect(prefix + ".enc3", out);
    out.add(prefix + ".up2_k", up2_k);
    out.add(prefix + ".up2_b", up2_b);
    dec2.collect(prefix + ".dec2", out);
    out.add(prefix + ".up1_k", up1_k);
    out.add(prefix + ".up1_b", up1_b);
    dec1.collect(prefix + ".dec1", out);
    out.add(prefix + ".up0_k", up0_k);
    out.add(prefix + ".up0_b", up0_b);
    dec0.collect(prefix + ".dec0", out);
    for (int i = 0; i < 4; ++i) {
        std::string n = prefix + ".neck" + std::to_string(i);
        out.add(n + "_k", neck_k[static_cast<size_t>(i)]);
        out.add(n + "_b", neck_b[static_cast<size_t>(i)]);
    }
    out.add(prefix + ".embed_k", embed_k);
    out.add(prefix + ".embed_b", embed_b);
}

DsmModel DsmModel::init(Rng& rng, const ModelConfig& cfg, Dtype dt) {
    cfg.validate();
    DsmModel m;
    m.cfg = cfg;
    m.backbone = Backbone::init(rng, cfg, dt);
    m.organ_q = Tensor::randn(rng, {cfg.n_organ_queries, cfg.embed},
                              1.0 / std::sqrt(static_cast<double>(cfg.embed)), dt)
                    .set_requires_grad(true);
    m.tumor_q = Tensor::randn(rng, {cfg.n_tumor_queries, cfg.embed},
                              1.0 / std::sqrt(static_cast<double>(cfg.embed)), dt)
                    .set_requires_grad(true);
    for (auto& blk : m.organ_blocks) {
        blk = kmmm::KmmmBlock::init(rng, cfg.embed, cfg.n_state, dt, !cfg.use_kmmm);
    }
    for (size_t i = 0; i < 4; ++i) {
        m.tumor_blocks[i] = dqr::DqrBlock::init(rng, cfg.embed, cfg.guide, cfg.heads,
                                                cfg.kappa_init, /*with_fuse=*/i < 3,
                                                cfg.embed, dt);
        m.tumor_blocks[i].use_diffusion = cfg.use_dqr;
    }
    m.joint = attn::Mha::init(rng, cfg.embed, cfg.embed, cfg.embed, cfg.heads, dt);
    m.head = align::ProjectionHead::init(rng, cfg.embed, cfg.text_dim, dt);
    return m;
}

DsmModel::Stage1Out DsmModel::stage1_forward(const Tensor& vol) const {
    Stage1Out out;
    out.pyr = backbone.forward(vol);
    Tensor O = organ_q;
    for (size_t i = 0; i < 4; ++i) {
        auto r = organ_blocks[i].forward(O, cdhw_to_lc(out.pyr.F[i]));
        O = r.O_out;
        out.Z[i] = r.Z;
    }
    out.O = O;
    out.logits = matmul(O, transpose2d(cdhw_to_lc(out.pyr.Fhat)));
    out.masks = ops::sigmoid(out.logits);
    return out;
}

DsmModel::Stage2Out DsmModel::stage2_forward(const Tensor& vol,
                                             const align::TextBank* bank) const {
    Stage2Out out;
    out.s1 = stage1_forward(vol);

    for (size_t i = 0; i < 4; ++i) {
        Tape::NoGrad ng;
        out.anomaly[i] = anomaly::normalize_minmax(anomaly::anomaly_score(out.s1.Z[i]));
    }

    Tensor T = tumor_q;
    Tensor carry; // fused features handed down from the previous level
    for (size_t i = 0; i < 4; ++i) {
        Tensor F_in = out.s1.pyr.F[i];
        if (carry.defined()) F_in = add(F_in, carry);
        Tensor mask;
        if (cfg.use_amvp) {
            Tape::NoGrad ng;
            mask = anomaly::mask_prompt(out.anomaly[i]);
        } else {
            mask = Tensor::zeros({out.anomaly[i].numel()}, F_in.dtype());
        }
        auto r = tumor_blocks[i].forward(T, F_in, mask);
        T = r.T_out;
        carry = r.F_next; // undefined on the last level
    }
    out.T = T;
    out.queries = dqr::joint_self_attention(out.s1.O, T, joint);
    out.logits = matmul(out.queries, transpose2d(cdhw_to_lc(out.s1.pyr.Fhat)));
    out.masks = ops::sigmoid(out.logits);
    if (bank) {
        out.p = align::classify_queries(out.queries, head, *bank, cfg.tau);
    }
    out.ood = out.anomaly[3];
    return out;
}

void DsmModel::collect_stage1(ParamMap& out) const {
    backbone.collect("backbone", out);
    out.add("organ_q", organ_q);
    for (size_t i = 0; i < 4; ++i) {
        organ_blocks[i].collect("organ_block" + std::to_string(i), out);
    }
}

void DsmModel::collect_all(ParamMap& out) const {
    collect_stage1(out);
    out.add("tumor_q", tumor_q);
    for (size_t i = 0; i < 4; ++i) {
        tumor_blocks[i].collect("tumor_block" + std::to_string(i), out);
    }
    joint.collect("joint", out);
    head.collect("align_head", out);
}

} // namespace dsm::model
