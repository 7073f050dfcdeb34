#pragma once

#include <array>

#include "dsm/align.hpp"
#include "dsm/anomaly.hpp"
#include "dsm/dqr.hpp"
#include "dsm/kmmm.hpp"

// End-to-end assembly: a small residual convolutional encoder-decoder
// produces a four-level feature pyramid at a common embedding width; organ
// queries are refined by one decoder block per level (stage 1); tumor queries
// add anomaly-prompted, diffusion-guided refinement and joint self-attention
// on top of the frozen-architecture stage-1 path (stage 2).
namespace dsm::model {

struct ModelConfig {
    int64_t patch = 32; // cubic input extent, divisible by 8
    std::array<int64_t, 4> widths{16, 32, 64, 128}; // encoder widths, fine->coarse
    int64_t embed = 16;          // pyramid / query embedding width
    int64_t guide = 8;           // diffusion guidance channels
    int64_t n_state = 8;         // SSM state size
    int64_t heads = 4;           // attention heads
    int64_t n_organ_queries = 5; // background query + one per organ
    int64_t n_tumor_queries = 2; // one per seen lesion class
    int64_t text_dim = 32;       // text-embedding width
    double tau = 0.01;           // cosine-softmax temperature
    double kappa_init = 1.0;     // initial diffusion contrast
    // component switches; all true = full model
    bool use_kmmm = true;       // false: classic hard attention, no SSM filtering
    bool use_amvp = true;       // false: prompt masks stay fully open
    bool use_dqr = true;        // false: diffusion update suppressed
    bool use_text_align = true; // false: no class-embedding alignment term

    void validate() const;
};

// Pre-activation residual unit: x + conv3(silu(conv3(x))), second kernel
// zero-initialized so the unit starts as the identity.
struct ResBlock {
    Tensor k1, b1, k2, b2;
    static ResBlock init(Rng& rng, int64_t channels, Dtype dt);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamMap& out) const;
};

// Four-level residual encoder-decoder with additive skips. The pyramid holds
// one feature map per decoder level at a shared embedding width (coarsest
// first, strides 8/4/2/1) plus a full-resolution embedding map for mask
// dot-products.
struct Backbone {
    Tensor stem_k, stem_b;
    ResBlock enc0, enc1, enc2, enc3;
    Tensor down1_k, down1_b, down2_k, down2_b, down3_k, down3_b;
    ResBlock dec2, dec1, dec0;
    Tensor up2_k, up2_b, up1_k, up1_b, up0_k, up0_b;
    std::array<Tensor, 4> neck_k, neck_b;
    Tensor embed_k, embed_b;

    static Backbone init(Rng& rng, const ModelConfig& cfg, Dtype dt);

    struct Pyramid {
        std::array<Tensor, 4> F; // F[0] stride 8 ... F[3] stride 1, width = embed
        Tensor Fhat;             // [embed, D, H, W] at input resolution
    };
    Pyramid forward(const Tensor& vol) const; // vol: [1, D, H, W]
    void collect(const std::string& prefix, ParamMap& out) const;
};

struct DsmModel {
    ModelConfig cfg;
    Backbone backbone;
    Tensor organ_q; // [N_o, embed] learned organ/background queries
    Tensor tumor_q; // [N_T, embed] learned tumor queries
    std::array<kmmm::KmmmBlock, 4> organ_blocks;
    std::array<dqr::DqrBlock, 4> tumor_blocks;
    attn::Mha joint;           // self-attention over the stacked query set
    align::ProjectionHead head; // query -> text embedding width

    static DsmModel init(Rng& rng, const ModelConfig& cfg, Dtype dt = Dtype::F32);

    struct Stage1Out {
        Backbone::Pyramid pyr;
        Tensor O;                 // refined organ queries [N_o, embed]
        Tensor logits;            // [N_o, V] mask logits
        Tensor masks;             // sigmoid(logits)
        std::array<Tensor, 4> Z;  // per-level affinities [N_o, L_i]
    };
    Stage1Out stage1_forward(const Tensor& vol) const;

    struct Stage2Out {
        Stage1Out s1;
        Tensor T;       // refined tumor queries [N_T, embed]
        Tensor queries; // [N_o+N_T, embed] after joint self-attention
        Tensor logits;  // [N_o+N_T, V]
        Tensor masks;
        Tensor p;                       // [N_o+N_T, |bank|]; undefined without a bank
        std::array<Tensor, 4> anomaly;  // normalized anomaly maps [L_i], detached
        Tensor ood;                     // finest anomaly map as [V], detached
    };
    Stage2Out stage2_forward(const Tensor& vol, const align::TextBank* bank) const;

    // Parameter registries: stage 1 covers the backbone and organ path;
    // stage 2 additionally trains the tumor path, joint attention, and the
    // alignment head.
    void collect_stage1(ParamMap& out) const;
    void collect_all(ParamMap& out) const;
};

} // namespace dsm::model
