#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dsm/dqr.hpp"
#include "dsm/gradcheck.hpp"

using namespace dsm;
using namespace dsm::dqr;

namespace {

double neg_inf() { return -std::numeric_limits<double>::infinity(); }

// give every projection of an identity-initialized Mha random weights so
// gradients actually flow through the attention weights
void randomize(attn::Mha& m, Rng& rng) {
    for (Tensor* t : {&m.wq, &m.bq, &m.wk, &m.bk, &m.wv, &m.bv, &m.wo, &m.bo}) {
        Tensor r = Tensor::uniform(rng, t->shape(), -0.5, 0.5, t->dtype());
        t->copy_from(r);
    }
}

// straightforward loop oracle for residual masked multi-head cross-attention
Tensor mha_oracle(const Tensor& queries, const Tensor& kv, const std::vector<double>& mask,
                  const attn::Mha& m) {
    int64_t nq = queries.dim(0), nk = kv.dim(0);
    int64_t c_model = m.wq.dim(1);
    int64_t dh = c_model / m.heads;
    auto proj = [&](const Tensor& x, const Tensor& w, const Tensor& b) {
        int64_t n = x.dim(0), ci = w.dim(0), co = w.dim(1);
        Tensor out = Tensor::zeros({n, co}, Dtype::F64);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < co; ++j) {
                double acc = b.at(j);
                for (int64_t k = 0; k < ci; ++k) acc += x.at(i * ci + k) * w.at(k * co + j);
                out.set(i * co + j, acc);
            }
        return out;
    };
    Tensor Q = proj(queries, m.wq, m.bq);
    Tensor K = proj(kv, m.wk, m.bk);
    Tensor V = proj(kv, m.wv, m.bv);
    Tensor headcat = Tensor::zeros({nq, c_model}, Dtype::F64);
    for (int64_t h = 0; h < m.heads; ++h) {
        for (int64_t i = 0; i < nq; ++i) {
            std::vector<double> w(nk, 0.0);
            double mx = neg_inf();
            for (int64_t j = 0; j < nk; ++j) {
                if (!mask.empty() && mask[j] < 0) continue;
                double dot = 0;
                for (int64_t d = 0; d < dh; ++d)
                    dot += Q.at(i * c_model + h * dh + d) * K.at(j * c_model + h * dh + d);
                w[j] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, w[j]);
            }
            double sum = 0;
            for (int64_t j = 0; j < nk; ++j) {
                bool dead = !mask.empty() && mask[j] < 0;
                w[j] = dead ? 0.0 : std::exp(w[j] - mx);
                sum += w[j];
            }
            for (int64_t j = 0; j < nk; ++j) w[j] /= sum;
            for (int64_t d = 0; d < dh; ++d) {
                double acc = 0;
                for (int64_t j = 0; j < nk; ++j) acc += w[j] * V.at(j * c_model + h * dh + d);
                headcat.set(i * c_model + h * dh + d, acc);
            }
        }
    }
    Tensor out = proj(headcat, m.wo, m.bo);
    return out;
}

} // namespace

TEST_CASE("diffusivity: closed forms, monotonicity, contract errors") {
    for (double kappa : {0.1, 1.0, 3.7}) {
        CHECK(diffusivity(0.0, kappa) == 1.0);
        CHECK(diffusivity(kappa * kappa, kappa) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
    }
    Rng rng(11);
    for (int t = 0; t < 100; ++t) {
        // keep s/kappa^2 well inside exp's range so g stays strictly positive
        double kappa = rng.uniform(0.5, 5.0);
        double s1 = rng.uniform(0.0, 10.0);
        double s2 = s1 + rng.uniform(1e-6, 10.0);
        double g1 = diffusivity(s1, kappa), g2 = diffusivity(s2, kappa);
        CHECK(g1 > g2);
        CHECK(g1 <= 1.0);
        CHECK(g2 > 0.0);
    }
    // extreme edges underflow gracefully instead of misbehaving
    CHECK(diffusivity(1e6, 0.01) == 0.0);
    CHECK_THROWS_AS(diffusivity(-1e-9, 1.0), ContractError);
    CHECK_THROWS_AS(diffusivity(1.0, 0.0), ContractError);
    CHECK_THROWS_AS(diffusivity(1.0, -2.0), ContractError);
}

TEST_CASE("diffusion_step: hand case on a 3-voxel line") {
    Tensor F = Tensor::from_values({0, 1, 0}, {1, 1, 1, 3}, Dtype::F64);
    Tensor G = Tensor::zeros({1, 1, 1, 3}, Dtype::F64); // constant guidance -> g == 1
    Tensor lk = Tensor::zeros({1}, Dtype::F64);
    Tensor out = diffusion_step(F, G, lk);
    CHECK(out.at(0) == 1.0 / 26.0);
    CHECK(out.at(1) == -2.0 / 26.0);
    CHECK(out.at(2) == 1.0 / 26.0);
    CHECK(out.at(0) + out.at(1) + out.at(2) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("diffusion_step: constant field maps to exactly zero") {
    Rng rng(13);
    Tensor G = Tensor::uniform(rng, {3, 4, 4, 4}, -2, 2, Dtype::F64);
    Tensor lk = Tensor::uniform(rng, {2}, -1, 1, Dtype::F64);
    Tensor F = Tensor::zeros({2, 4, 4, 4}, Dtype::F64);
    for (int64_t c = 0; c < 2; ++c) {
        double v = rng.uniform(-3, 3);
        for (int64_t p = 0; p < 64; ++p) F.set(c * 64 + p, v);
    }
    Tensor out = diffusion_step(F, G, lk);
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == 0.0);
}

TEST_CASE("diffusion_step: mass conservation with open diffusivity (50 random maps)") {
    Rng rng(17);
    for (int t = 0; t < 50; ++t) {
        Dtype dt = (t % 2 == 0) ? Dtype::F32 : Dtype::F64;
        Tensor F = Tensor::uniform(rng, {1, 8, 8, 8}, -1, 1, dt);
        Tensor G = Tensor::zeros({1, 8, 8, 8}, dt); // g == 1 everywhere
        Tensor lk = Tensor::zeros({1}, dt);
        Tensor out = diffusion_step(F, G, lk);
        double sum = 0;
        for (int64_t i = 0; i < out.numel(); ++i) sum += out.at(i);
        CHECK(std::abs(sum) < 1e-6);
    }
}

TEST_CASE("diffusion_step: maximum principle on random fields") {
    Rng rng(19);
    for (int t = 0; t < 20; ++t) {
        Tensor F = Tensor::uniform(rng, {2, 6, 5, 4}, -3, 3, Dtype::F64);
        Tensor G = Tensor::uniform(rng, {3, 6, 5, 4}, -2, 2, Dtype::F64);
        Tensor lk = Tensor::uniform(rng, {2}, -1.5, 1.5, Dtype::F64);
        Tensor out = diffusion_step(F, G, lk);
        int64_t plane = 6 * 5 * 4;
        for (int64_t c = 0; c < 2; ++c) {
            double lo = F.at(c * plane), hi = lo;
            for (int64_t p = 0; p < plane; ++p) {
                lo = std::min(lo, F.at(c * plane + p));
                hi = std::max(hi, F.at(c * plane + p));
            }
            for (int64_t p = 0; p < plane; ++p) {
                double v = F.at(c * plane + p) + out.at(c * plane + p);
                CHECK(v >= lo - 1e-6);
                CHECK(v <= hi + 1e-6);
            }
        }
    }
}

TEST_CASE("diffusion_step: sharp guidance edges damp the update") {
    // two-region step along w with a strong guidance edge at the same place
    int64_t n = 4;
    Tensor F = Tensor::zeros({1, n, n, n}, Dtype::F64);
    Tensor G = Tensor::zeros({1, n, n, n}, Dtype::F64);
    for (int64_t d = 0; d < n; ++d)
        for (int64_t h = 0; h < n; ++h)
            for (int64_t w = 0; w < n; ++w) {
                int64_t p = (d * n + h) * n + w;
                if (w >= n / 2) {
                    F.set(p, 1.0);
                    G.set(p, 10.0);
                }
            }
    auto edge_mean = [&](double kappa) {
        Tensor lk = Tensor::full({1}, std::log(kappa), Dtype::F64);
        Tensor out = diffusion_step(F, G, lk);
        double acc = 0;
        int64_t cnt = 0;
        for (int64_t d = 0; d < n; ++d)
            for (int64_t h = 0; h < n; ++h)
                for (int64_t w = n / 2 - 1; w <= n / 2; ++w) {
                    acc += std::abs(out.at((d * n + h) * n + w));
                    ++cnt;
                }
        return acc / static_cast<double>(cnt);
    };
    double damped = edge_mean(0.1);
    double open = edge_mean(1e6);
    CHECK(damped < open);
    CHECK(open > 1e-3);       // the open stencil really moves mass across the edge
    CHECK(damped < 1e-12);    // the sharp edge shuts diffusion off
}

TEST_CASE("diffusion_step: gradcheck in all three inputs") {
    Rng rng(23);
    Tensor F = Tensor::uniform(rng, {2, 2, 3, 2}, -1, 1, Dtype::F64);
    Tensor G = Tensor::uniform(rng, {2, 2, 3, 2}, -1, 1, Dtype::F64);
    Tensor lk = Tensor::uniform(rng, {2}, -0.5, 0.5, Dtype::F64);
    auto rep = gradcheck(
        [](const std::vector<Tensor>& in) { return diffusion_step(in[0], in[1], in[2]); },
        {F, G, lk}, 301);
    CHECK_MESSAGE(rep.ok(1e-5), "max_rel_err=", rep.max_rel_err, " at ", rep.worst);
}

TEST_CASE("fuse_features: identity-initialized block is pure upsampling") {
    Rng rng(29);
    DqrBlock b = DqrBlock::init(rng, 3, 2, 1, 1.0, true, 3, Dtype::F64);
    Tensor F = Tensor::uniform(rng, {3, 2, 2, 2}, -1, 1, Dtype::F64);
    Tensor zero = Tensor::zeros({3, 2, 2, 2}, Dtype::F64);
    Tensor fused = fuse_features(F, zero, b.fuse_k3, b.fuse_b3, b.fuse_kp, b.fuse_bp);
    Tensor up = ops::upsample_trilinear2x(F);
    REQUIRE(fused.shape() == Shape{3, 4, 4, 4});
    for (int64_t i = 0; i < fused.numel(); ++i) {
        CHECK(fused.at(i) == doctest::Approx(up.at(i)).epsilon(1e-12));
    }
}

TEST_CASE("diffusion_step + fuse_features: composite gradcheck") {
    Rng rng(31);
    Tensor F = Tensor::uniform(rng, {2, 2, 2, 2}, -1, 1, Dtype::F64);
    Tensor gk = Tensor::uniform(rng, {2, 2}, -0.7, 0.7, Dtype::F64);
    Tensor gb = Tensor::uniform(rng, {2}, -0.1, 0.1, Dtype::F64);
    Tensor lk = Tensor::uniform(rng, {2}, -0.3, 0.3, Dtype::F64);
    Tensor k3 = Tensor::uniform(rng, {2, 2, 3, 3, 3}, -0.3, 0.3, Dtype::F64);
    Tensor b3 = Tensor::uniform(rng, {2}, -0.1, 0.1, Dtype::F64);
    Tensor kp = Tensor::uniform(rng, {2, 2}, -0.7, 0.7, Dtype::F64);
    Tensor bp = Tensor::uniform(rng, {2}, -0.1, 0.1, Dtype::F64);
    auto rep = gradcheck(
        [](const std::vector<Tensor>& in) {
            Tensor guide = ops::conv1(in[0], in[1], in[2]);
            Tensor fhat = diffusion_step(in[0], guide, in[3]);
            return fuse_features(in[0], fhat, in[4], in[5], in[6], in[7]);
        },
        {F, gk, gb, lk, k3, b3, kp, bp}, 302);
    CHECK_MESSAGE(rep.ok(1e-4), "max_rel_err=", rep.max_rel_err, " at ", rep.worst);
}

TEST_CASE("Mha: zero-initialized output projection gives residual identity") {
    Rng rng(37);
    attn::Mha m = attn::Mha::init(rng, 6, 6, 6, 2, Dtype::F64);
    Tensor X = Tensor::uniform(rng, {5, 6}, -2, 2, Dtype::F64);
    Tensor out = joint_self_attention(ops::slice_rows(X, 0, 3), ops::slice_rows(X, 3, 5), m);
    REQUIRE(out.shape() == Shape{5, 6});
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.at(i) == X.at(i));
}

TEST_CASE("Mha: head count must divide the model width") {
    Rng rng(38);
    CHECK_THROWS_AS(attn::Mha::init(rng, 6, 6, 6, 4, Dtype::F64), ContractError);
}

TEST_CASE("joint_self_attention: permutation equivariance") {
    Rng rng(41);
    attn::Mha m = attn::Mha::init(rng, 4, 4, 4, 2, Dtype::F64);
    randomize(m, rng);
    Tensor O = Tensor::uniform(rng, {3, 4}, -1, 1, Dtype::F64);
    Tensor T = Tensor::uniform(rng, {4, 4}, -1, 1, Dtype::F64);
    Tensor out = joint_self_attention(O, T, m);

    // reverse the 7 stacked queries; the outputs must follow the reversal
    Tensor X = ops::concat_rows(O, T);
    Tensor Xr = Tensor::zeros({7, 4}, Dtype::F64);
    for (int64_t i = 0; i < 7; ++i)
        for (int64_t j = 0; j < 4; ++j) Xr.set(i * 4 + j, X.at((6 - i) * 4 + j));
    Tensor out_r = joint_self_attention(ops::slice_rows(Xr, 0, 3), ops::slice_rows(Xr, 3, 7), m);
    for (int64_t i = 0; i < 7; ++i)
        for (int64_t j = 0; j < 4; ++j) {
            CHECK(out_r.at(i * 4 + j) == doctest::Approx(out.at((6 - i) * 4 + j)).epsilon(1e-12));
        }
}

TEST_CASE("joint_self_attention: gradcheck") {
    Rng rng(43);
    attn::Mha m = attn::Mha::init(rng, 4, 4, 4, 2, Dtype::F64);
    randomize(m, rng);
    Tensor O = Tensor::uniform(rng, {2, 4}, -1, 1, Dtype::F64);
    Tensor T = Tensor::uniform(rng, {3, 4}, -1, 1, Dtype::F64);
    auto rep = gradcheck(
        [&](const std::vector<Tensor>& in) {
            attn::Mha w{in[2], in[3], in[4],  in[5],  in[6],
                        in[7], in[8], in[9], m.heads};
            return joint_self_attention(in[0], in[1], w);
        },
        {O, T, m.wq, m.bq, m.wk, m.bk, m.wv, m.bv, m.wo, m.bo}, 303);
    CHECK_MESSAGE(rep.ok(1e-4), "max_rel_err=", rep.max_rel_err, " at ", rep.worst);
}

TEST_CASE("prompt_masked_attention: open mask equals plain cross-attention") {
    Rng rng(47);
    attn::Mha m = attn::Mha::init(rng, 4, 8, 4, 2, Dtype::F64);
    randomize(m, rng);
    Tensor T = Tensor::uniform(rng, {3, 4}, -1, 1, Dtype::F64);
    Tensor F = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F64);
    Tensor Fh = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F64);
    Tensor open = Tensor::zeros({8}, Dtype::F64);
    Tensor a = prompt_masked_attention(T, F, Fh, open, m);
    Tensor b = prompt_masked_attention(T, F, Fh, Tensor{}, m);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("prompt_masked_attention: matches the loop oracle, masked weights are zero") {
    Rng rng(53);
    attn::Mha m = attn::Mha::init(rng, 4, 8, 4, 2, Dtype::F64);
    randomize(m, rng);
    Tensor T = Tensor::uniform(rng, {3, 4}, -1, 1, Dtype::F64);
    Tensor F = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F64);
    Tensor Fh = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F64);
    std::vector<double> maskv = {0, neg_inf(), neg_inf(), 0, 0, neg_inf(), 0, 0};
    Tensor mask = Tensor::from_values(maskv, {8}, Dtype::F64);

    Tensor got = prompt_masked_attention(T, F, Fh, mask, m);
    Tensor tokens = ops::cdhw_to_lc(ops::concat_channels(F, Fh));
    Tensor expect = mha_oracle(T, tokens, maskv, m);
    for (int64_t i = 0; i < got.numel(); ++i) {
        CHECK(got.at(i) == doctest::Approx(T.at(i) + expect.at(i)).epsilon(1e-10));
    }
}

TEST_CASE("prompt_masked_attention: one surviving voxel pins every query on its value") {
    Rng rng(59);
    attn::Mha m = attn::Mha::init(rng, 4, 8, 4, 2, Dtype::F64);
    randomize(m, rng);
    m.wo.copy_from(Tensor::eye(4, Dtype::F64));
    m.bo.copy_from(Tensor::zeros({4}, Dtype::F64));
    Tensor T = Tensor::uniform(rng, {3, 4}, -1, 1, Dtype::F64);
    Tensor F = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F64);
    Tensor Fh = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F64);
    int64_t survivor = 5;
    std::vector<double> maskv(8, neg_inf());
    maskv[survivor] = 0.0;
    Tensor mask = Tensor::from_values(maskv, {8}, Dtype::F64);

    Tensor tokens = ops::cdhw_to_lc(ops::concat_channels(F, Fh));
    Tensor V = ops::add_rowvec(ops::matmul(tokens, m.wv), m.bv);
    Tensor got = prompt_masked_attention(T, F, Fh, mask, m);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 4; ++j) {
            double want = T.at(i * 4 + j) + V.at(survivor * 4 + j);
            CHECK(got.at(i * 4 + j) == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("prompt_masked_attention: gradcheck with a partially masked prompt") {
    Rng rng(61);
    attn::Mha m = attn::Mha::init(rng, 4, 8, 4, 2, Dtype::F64);
    randomize(m, rng);
    Tensor T = Tensor::uniform(rng, {2, 4}, -1, 1, Dtype::F64);
    Tensor F = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F64);
    Tensor Fh = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F64);
    std::vector<double> maskv = {0, neg_inf(), 0, 0, neg_inf(), 0, 0, neg_inf()};
    Tensor mask = Tensor::from_values(maskv, {8}, Dtype::F64);
    auto rep = gradcheck(
        [&](const std::vector<Tensor>& in) {
            attn::Mha w{in[3], in[4], in[5],  in[6],  in[7],
                        in[8], in[9], in[10], m.heads};
            return prompt_masked_attention(in[0], in[1], in[2], mask, w);
        },
        {T, F, Fh, m.wq, m.bq, m.wk, m.bk, m.wv, m.bv, m.wo, m.bo}, 304);
    CHECK_MESSAGE(rep.ok(1e-4), "max_rel_err=", rep.max_rel_err, " at ", rep.worst);
}

TEST_CASE("DqrBlock: shapes, fuse wiring, parameter collection") {
    Rng rng(67);
    DqrBlock with = DqrBlock::init(rng, 4, 2, 2, 1.5, true, 4, Dtype::F32);
    DqrBlock last = DqrBlock::init(rng, 4, 2, 2, 1.5, false, 4, Dtype::F32);
    Tensor T = Tensor::uniform(rng, {3, 4}, -1, 1, Dtype::F32);
    Tensor F = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F32);
    Tensor mask = Tensor::zeros({8}, Dtype::F32);

    auto o1 = with.forward(T, F, mask);
    REQUIRE(o1.T_out.shape() == Shape{3, 4});
    REQUIRE(o1.Fhat.shape() == Shape{4, 2, 2, 2});
    REQUIRE(o1.F_next.shape() == Shape{4, 4, 4, 4});

    auto o2 = last.forward(T, F, mask);
    CHECK_FALSE(o2.F_next.defined());

    ParamMap p1, p2;
    with.collect("b0", p1);
    last.collect("b3", p2);
    CHECK(p1.size() == 15); // guide 2 + kappa 1 + mha 8 + fuse 4
    CHECK(p2.size() == 11);
    CHECK_THROWS_AS(with.collect("b0", p1), ContractError); // duplicate names rejected

    // kappa_init lands in log-space
    DqrBlock k = DqrBlock::init(rng, 2, 1, 1, 2.0, false, 2, Dtype::F64);
    CHECK(k.log_kappa.at(0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(DqrBlock::init(rng, 2, 1, 1, 0.0, false, 2, Dtype::F64), ContractError);
}

TEST_CASE("DqrBlock: gradients reach every collected parameter") {
    Rng rng(71);
    DqrBlock b = DqrBlock::init(rng, 4, 2, 2, 1.0, true, 4, Dtype::F64);
    // perturb the identity fuse weights so their gradients are generic
    Tensor n3 = Tensor::uniform(rng, {4, 4, 3, 3, 3}, -0.05, 0.05, Dtype::F64);
    for (int64_t i = 0; i < n3.numel(); ++i) b.fuse_k3.set(i, b.fuse_k3.at(i) + n3.at(i));
    randomize(b.cross, rng);
    for (Tensor* t : {&b.cross.wq, &b.cross.bq, &b.cross.wk, &b.cross.bk, &b.cross.wv,
                      &b.cross.bv, &b.cross.wo, &b.cross.bo}) {
        t->set_requires_grad(true);
    }
    Tensor T = Tensor::uniform(rng, {3, 4}, -1, 1, Dtype::F64);
    Tensor F = Tensor::uniform(rng, {4, 2, 2, 2}, -1, 1, Dtype::F64);
    Tensor mask = Tensor::zeros({8}, Dtype::F64);

    Tape tape;
    Tape::Scope scope(tape);
    auto out = b.forward(T, F, mask);
    Tensor loss = ops::add(ops::mean_all(out.T_out), ops::mean_all(out.F_next));
    tape.backward(loss);

    ParamMap params;
    b.collect("blk", params);
    for (const auto& [name, t] : params.items) {
        REQUIRE_MESSAGE(t.has_grad(), name, " received no gradient");
        double l1 = 0;
        Tensor g = t.grad();
        for (int64_t i = 0; i < g.numel(); ++i) l1 += std::abs(g.at(i));
        CHECK_MESSAGE(l1 > 0.0, name, " gradient is all zero");
    }
}
