#include "dsm/gradsuite.hpp"

#include <limits>

#include "dsm/align.hpp"
#include "dsm/dqr.hpp"
#include "dsm/kmmm.hpp"
#include "dsm/losses.hpp"
#include "dsm/ssm.hpp"

namespace dsm::gradsuite {

namespace {

Tensor U(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(rng, std::move(s), lo, hi, Dtype::F64);
}

Tensor random_binary(Rng& rng, Shape s, double p_one) {
    Tensor t = Tensor::zeros(std::move(s), Dtype::F64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform() < p_one ? 1.0 : 0.0);
    return t;
}

GradcheckReport run_matmul(uint64_t seed) {
    Rng rng(seed);
    return gradcheck([](const std::vector<Tensor>& in) { return ops::matmul(in[0], in[1]); },
                     {U(rng, {3, 4}), U(rng, {4, 2})}, seed + 1000);
}

GradcheckReport run_masked_softmax(uint64_t seed) {
    Rng rng(seed);
    double ninf = -std::numeric_limits<double>::infinity();
    Tensor mask = Tensor::from_values({0, ninf, 0, 0, 0, ninf, ninf, 0, 0, 0, 0, ninf}, {3, 4},
                                      Dtype::F64);
    return gradcheck(
        [&](const std::vector<Tensor>& in) { return ops::masked_softmax(in[0], mask); },
        {U(rng, {3, 4}, -2, 2)}, seed + 1000);
}

GradcheckReport run_silu(uint64_t seed) {
    Rng rng(seed);
    return gradcheck([](const std::vector<Tensor>& in) { return ops::silu(in[0]); },
                     {U(rng, {3, 5}, -3, 3)}, seed + 1000);
}

GradcheckReport run_conv3(uint64_t seed) {
    Rng rng(seed);
    return gradcheck([](const std::vector<Tensor>& in) { return ops::conv3(in[0], in[1], in[2]); },
                     {U(rng, {2, 3, 3, 3}), U(rng, {2, 2, 3, 3, 3}), U(rng, {2})}, seed + 1000);
}

GradcheckReport run_dice(uint64_t seed) {
    Rng rng(seed);
    Tensor Y = random_binary(rng, {3, 12}, 0.4);
    return gradcheck(
        [&](const std::vector<Tensor>& in) {
            Tensor a = losses::dice_loss(Y, in[0], {0, 2});
            Tensor b = losses::dice_loss(Y, in[0], {0, 2}, /*aggregated=*/true);
            return ops::add(a, b);
        },
        {U(rng, {3, 12}, 0.15, 0.85)}, seed + 1000);
}

GradcheckReport run_bce(uint64_t seed) {
    Rng rng(seed);
    Tensor Y = random_binary(rng, {3, 12}, 0.4);
    return gradcheck(
        [&](const std::vector<Tensor>& in) { return losses::bce_loss(Y, in[0], {0, 2}); },
        {U(rng, {3, 12}, 0.15, 0.85)}, seed + 1000);
}

GradcheckReport run_stage2_bce(uint64_t seed) {
    Rng rng(seed);
    Tensor Y = random_binary(rng, {3, 12}, 0.4);
    return gradcheck(
        [&](const std::vector<Tensor>& in) {
            return losses::stage2_bce(Y, in[0], in[1], {0, 2});
        },
        {U(rng, {3, 12}, 0.15, 0.85), U(rng, {3}, 0.1, 0.9)}, seed + 1000);
}

GradcheckReport run_bce_logits(uint64_t seed) {
    Rng rng(seed);
    Tensor Y = random_binary(rng, {3, 12}, 0.4);
    return gradcheck(
        [&](const std::vector<Tensor>& in) { return losses::bce_logits_loss(Y, in[0], {0, 2}); },
        {U(rng, {3, 12}, -3, 3)}, seed + 1000);
}

GradcheckReport run_stage2_bce_logits(uint64_t seed) {
    Rng rng(seed);
    Tensor Y = random_binary(rng, {3, 12}, 0.4);
    return gradcheck(
        [&](const std::vector<Tensor>& in) {
            return losses::stage2_bce_logits(Y, in[0], in[1], {0, 2});
        },
        {U(rng, {3, 12}, -3, 3), U(rng, {3}, 0.1, 0.9)}, seed + 1000);
}

GradcheckReport run_ssm_layer(uint64_t seed) {
    Rng rng(seed);
    auto layer = ssm::SsmLayer::init(rng, 3, 4, Dtype::F64);
    return gradcheck(
        [](const std::vector<Tensor>& in) {
            ssm::SsmLayer l{in[1], in[2], in[3], in[4]};
            return l.forward(in[0], /*bidirectional=*/true);
        },
        {U(rng, {3, 6}), layer.a_log, layer.delta_log, layer.B, layer.Cp}, seed + 1000);
}

GradcheckReport run_kmmm_block(uint64_t seed) {
    Rng rng(seed);
    auto block = kmmm::KmmmBlock::init(rng, 3, 2, Dtype::F64);
    block.proj_w.copy_from(U(rng, {3, 3}, -0.3, 0.3));
    return gradcheck(
        [&](const std::vector<Tensor>& in) {
            kmmm::KmmmBlock b = block;
            b.spatial.a_log = in[2];
            b.spatial.Cp = in[3];
            b.proj_w = in[4];
            return b.forward(in[0], in[1], /*surrogate_assign=*/true).O_out;
        },
        {U(rng, {2, 3}), U(rng, {4, 3}), block.spatial.a_log, block.spatial.Cp, block.proj_w},
        seed + 1000);
}

GradcheckReport run_diffusion_fuse(uint64_t seed) {
    Rng rng(seed);
    return gradcheck(
        [](const std::vector<Tensor>& in) {
            Tensor guide = ops::conv1(in[0], in[1], in[2]);
            Tensor fhat = dqr::diffusion_step(in[0], guide, in[3]);
            return dqr::fuse_features(in[0], fhat, in[4], in[5], in[6], in[7]);
        },
        {U(rng, {2, 2, 2, 2}), U(rng, {2, 2}, -0.7, 0.7), U(rng, {2}, -0.1, 0.1),
         U(rng, {2}, -0.3, 0.3), U(rng, {2, 2, 3, 3, 3}, -0.3, 0.3), U(rng, {2}, -0.1, 0.1),
         U(rng, {2, 2}, -0.7, 0.7), U(rng, {2}, -0.1, 0.1)},
        seed + 1000);
}

GradcheckReport run_prompt_masked_attention(uint64_t seed) {
    Rng rng(seed);
    attn::Mha m = attn::Mha::init(rng, 4, 8, 4, 2, Dtype::F64);
    for (Tensor* t : {&m.wq, &m.bq, &m.wk, &m.bk, &m.wv, &m.bv, &m.wo, &m.bo}) {
        t->copy_from(Tensor::uniform(rng, t->shape(), -0.5, 0.5, Dtype::F64));
    }
    double ninf = -std::numeric_limits<double>::infinity();
    Tensor mask = Tensor::from_values({0, ninf, 0, 0, ninf, 0, 0, ninf}, {8}, Dtype::F64);
    return gradcheck(
        [&](const std::vector<Tensor>& in) {
            attn::Mha w{in[3], in[4], in[5], in[6], in[7], in[8], in[9], in[10], m.heads};
            return dqr::prompt_masked_attention(in[0], in[1], in[2], mask, w);
        },
        {U(rng, {2, 4}), U(rng, {4, 2, 2, 2}), U(rng, {4, 2, 2, 2}), m.wq, m.bq, m.wk, m.bk,
         m.wv, m.bv, m.wo, m.bo},
        seed + 1000);
}

GradcheckReport run_cosine_softmax(uint64_t seed) {
    Rng rng(seed);
    // the working temperature: saturated rows, tight finite-difference step
    align::TextBank bank = align::make_random_orthonormal_bank({"a", "b", "c", "d"}, 6, rng,
                                                               Dtype::F64);
    return gradcheck(
        [&](const std::vector<Tensor>& in) {
            align::ProjectionHead h{in[1], in[2]};
            return align::classify_queries(in[0], h, bank, 0.01);
        },
        {U(rng, {3, 5}), U(rng, {5, 6}, -0.8, 0.8), U(rng, {6}, -0.2, 0.2)}, seed + 1000, 1e-6);
}

} // namespace

const std::vector<Case>& all_cases() {
    static const std::vector<Case> cases = {
        {"matmul", 1e-5, true, run_matmul},
        {"masked_softmax", 1e-5, true, run_masked_softmax},
        {"silu", 1e-5, true, run_silu},
        {"conv3", 1e-5, true, run_conv3},
        {"dice", 1e-5, true, run_dice},
        {"bce", 1e-5, true, run_bce},
        {"stage2_bce", 1e-5, true, run_stage2_bce},
        {"bce_logits", 1e-5, true, run_bce_logits},
        {"stage2_bce_logits", 1e-5, true, run_stage2_bce_logits},
        {"ssm_layer", 1e-4, false, run_ssm_layer},
        {"kmmm_block", 1e-4, false, run_kmmm_block},
        {"diffusion_fuse", 1e-4, false, run_diffusion_fuse},
        {"prompt_masked_attention", 1e-4, false, run_prompt_masked_attention},
        {"cosine_softmax", 1e-4, false, run_cosine_softmax},
    };
    return cases;
}

const Case* find_case(const std::string& name) {
    for (const Case& c : all_cases()) {
        if (c.name == name) return &c;
    }
    return nullptr;
}

} // namespace dsm::gradsuite
