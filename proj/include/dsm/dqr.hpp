#pragma once

#include "dsm/attention.hpp"
#include "dsm/ops.hpp"
#include "dsm/params.hpp"

// Diffusion-guided query refinement. A guidance map (1x1x1 projection of the
// feature map) drives one explicit step of edge-stopping nonlinear diffusion
// over the 26-neighborhood; the enhanced features then feed prompt-masked
// cross-attention for tumor queries and joint organ-tumor self-attention.
namespace dsm::dqr {

// Edge-stopping diffusivity g(s) = exp(-s / kappa^2), g(0) = 1, strictly
// decreasing in s. `s` is a sum of squared guidance differences (>= 0).
double diffusivity(double s, double kappa);

// One explicit diffusion step over the 26-neighborhood with zero-flux
// boundaries:
//   out[c,p] = lambda * sum_{q in N26(p)} g_c(s_pq) * (F[c,q] - F[c,p])
//   s_pq     = sum_m (G[m,q] - G[m,p])^2,   g_c(s) = exp(-s / kappa_c^2)
// lambda = 1/26 keeps F + out a convex combination of F's values (maximum
// principle). kappa is learnable per feature channel, stored as log_kappa.
// Differentiable in F, G, and log_kappa.
Tensor diffusion_step(const Tensor& F, const Tensor& G, const Tensor& log_kappa);

// F_next = conv1(upsample2x(conv3(F + Fhat, k3, b3)), kproj, bproj).
// With identity-initialized convolutions this is exactly upsample2x(F + Fhat).
Tensor fuse_features(const Tensor& F, const Tensor& Fhat, const Tensor& k3,
                     const Tensor& b3, const Tensor& kproj, const Tensor& bproj);

// Residual masked cross-attention: queries T [N_T, C], keys/values from the
// channel concatenation [F; Fhat] flattened to tokens, additive {0,-inf} mask
// broadcast over all queries. Returns T + MHA(T, tokens, mask).
Tensor prompt_masked_attention(const Tensor& T, const Tensor& F, const Tensor& Fhat,
                               const Tensor& mask, const attn::Mha& mha);

// Residual self-attention over the stacked query set [O; T].
Tensor joint_self_attention(const Tensor& O, const Tensor& T, const attn::Mha& mha);

// One decoder refinement block: guidance projection -> diffusion step ->
// prompt-masked cross-attention for the queries; blocks that feed a higher
// resolution also fuse F + Fhat and upsample to the next pyramid level.
struct DqrBlock {
    Tensor guide_k, guide_b; // 1x1x1 guidance projection [C_g, C], [C_g]
    Tensor log_kappa;        // per-channel contrast [C]
    attn::Mha cross;         // queries C wide, tokens 2C wide
    // Ablation switch: when false the diffusion update is replaced by zeros,
    // so attention and fusion see the unrefined features.
    bool use_diffusion = true;
    bool has_fuse = false;
    Tensor fuse_k3, fuse_b3; // [C, C, 3, 3, 3], [C]
    Tensor fuse_kp, fuse_bp; // [C_next, C], [C_next]

    static DqrBlock init(Rng& rng, int64_t channels, int64_t guide_channels,
                         int64_t heads, double kappa_init, bool with_fuse,
                         int64_t next_channels, Dtype dt);

    struct Out {
        Tensor T_out;  // refined queries [N_T, C]
        Tensor F_next; // fused upsampled features (undefined when !has_fuse)
        Tensor Fhat;   // diffusion update at this scale [C, D, H, W]
    };
    // mask: [L] additive prompt ({0,-inf}) over the flattened voxels of F.
    Out forward(const Tensor& T, const Tensor& F, const Tensor& mask) const;

    void collect(const std::string& prefix, ParamMap& out) const;
};

} // namespace dsm::dqr
