#include "dsm/attention.hpp"

#include <cmath>

namespace dsm::attn {

Mha Mha::init(Rng& rng, int64_t c_q, int64_t c_kv, int64_t c_model, int64_t heads, Dtype dt) {
    if (c_model % heads != 0) {
        throw ContractError("Mha::init: head count must divide the model width");
    }
    Mha m;
    m.heads = heads;
    m.wq = Tensor::randn(rng, {c_q, c_model}, 1.0 / std::sqrt(static_cast<double>(c_q)), dt);
    m.wk = Tensor::randn(rng, {c_kv, c_model}, 1.0 / std::sqrt(static_cast<double>(c_kv)), dt);
    m.wv = Tensor::randn(rng, {c_kv, c_model}, 1.0 / std::sqrt(static_cast<double>(c_kv)), dt);
    m.wo = Tensor::zeros({c_model, c_model}, dt);
    m.bq = Tensor::zeros({c_model}, dt);
    m.bk = Tensor::zeros({c_model}, dt);
    m.bv = Tensor::zeros({c_model}, dt);
    m.bo = Tensor::zeros({c_model}, dt);
    for (Tensor* t : {&m.wq, &m.wk, &m.wv, &m.wo, &m.bq, &m.bk, &m.bv, &m.bo}) {
        t->set_requires_grad(true);
    }
    return m;
}

Tensor Mha::forward(const Tensor& queries, const Tensor& kv, const Tensor& mask) const {
    if (queries.ndim() != 2 || kv.ndim() != 2) {
        throw ContractError("Mha::forward: queries and kv must be matrices");
    }
    int64_t c_model = wq.dim(1);
    int64_t dh = c_model / heads;
    Tensor Q = ops::add_rowvec(ops::matmul(queries, wq), bq);
    Tensor K = ops::add_rowvec(ops::matmul(kv, wk), bk);
    Tensor V = ops::add_rowvec(ops::matmul(kv, wv), bv);
    Tensor headcat;
    for (int64_t h = 0; h < heads; ++h) {
        Tensor Qh = ops::slice_cols(Q, h * dh, (h + 1) * dh);
        Tensor Kh = ops::slice_cols(K, h * dh, (h + 1) * dh);
        Tensor Vh = ops::slice_cols(V, h * dh, (h + 1) * dh);
        Tensor logits = ops::scale(ops::matmul(Qh, ops::transpose2d(Kh)),
                                   1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor att = ops::masked_softmax(logits, mask);
        Tensor Oh = ops::matmul(att, Vh);
        headcat = (h == 0) ? Oh : ops::concat_cols(headcat, Oh);
    }
    return ops::add_rowvec(ops::matmul(headcat, wo), bo);
}

void Mha::collect(const std::string& prefix, ParamMap& out) const {
    out.add(prefix + ".wq", wq);
    out.add(prefix + ".bq", bq);
    out.add(prefix + ".wk", wk);
    out.add(prefix + ".bk", bk);
    out.add(prefix + ".wv", wv);
    out.add(prefix + ".bv", bv);
    out.add(prefix + ".wo", wo);
    out.add(prefix + ".bo", bo);
}

} // namespace dsm::attn
