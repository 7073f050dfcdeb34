#include "dsm/align.hpp"

#include <cmath>
#include <set>

#include "dsm/serialize.hpp"

namespace dsm::align {

const std::vector<std::string>& organ_vocab() {
    static const std::vector<std::string> v = {
        "Spleen", "Right Kidney", "Left Kidney", "Gall Bladder", "Esophagus",
        "Liver", "Stomach", "Aorta", "Postcava", "Portal Vein and Splenic Vein",
        "Pancreas", "Right Adrenal Gland", "Left Adrenal Gland", "Duodenum", "Hepatic Vessel",
        "Right Lung", "Left Lung", "Colon", "Intestine", "Rectum",
        "Bladder", "Prostate", "Left Head of Femur", "Right Head of Femur", "Celiac Truck"};
    return v;
}

const std::vector<std::string>& tumor_vocab() {
    static const std::vector<std::string> v = {
        "Spleen Tumor", "Kidney Tumor", "Kidney Cyst", "Gall Bladder Tumor", "Esophagus Tumor",
        "Liver Tumor", "Stomach Tumor", "Aortic Tumor", "Postcava Tumor Thrombus",
        "Portal Vein Tumor Thrombus", "Pancreas Tumor", "Adrenal Tumor", "Adrenal Cyst",
        "Duodenal Tumor", "Hepatic Vessel Tumor", "Lung Tumor", "Lung Cyst", "Colon Tumor",
        "Small Intestinal Neoplasm", "Rectal Tumor"};
    return v;
}

std::string prompt_for(const std::string& cls) {
    std::string s = kPromptTemplate;
    const std::string hole = "{CLS}";
    size_t pos = s.find(hole);
    return s.replace(pos, hole.size(), cls);
}

void TextBank::validate() const {
    if (names.empty()) throw DataError("text bank: no classes");
    std::set<std::string> seen;
    for (const auto& n : names) {
        if (!seen.insert(n).second) throw DataError("text bank: duplicate class name '" + n + "'");
    }
    if (!K.defined() || K.ndim() != 2 || K.dim(0) != size() || K.dim(1) < 1) {
        throw DataError("text bank: embedding matrix shape does not match names");
    }
    int64_t d = K.dim(1);
    for (int64_t i = 0; i < size(); ++i) {
        double sq = 0;
        for (int64_t j = 0; j < d; ++j) {
            double v = K.at(i * d + j);
            sq += v * v;
        }
        if (!(sq > 0) || !std::isfinite(sq)) {
            throw DataError("text bank: row " + std::to_string(i) + " ('" + names[i] +
                            "') is not unit-normalizable");
        }
    }
}

TextBank make_orthonormal_bank(std::vector<std::string> names, int64_t dim, Dtype dt) {
    int64_t n = static_cast<int64_t>(names.size());
    if (dim < n) throw ContractError("make_orthonormal_bank: dim must be >= class count");
    TextBank bank;
    bank.names = std::move(names);
    bank.K = Tensor::zeros({n, dim}, dt);
    for (int64_t i = 0; i < n; ++i) bank.K.set(i * dim + i, 1.0);
    bank.validate();
    return bank;
}

TextBank make_random_orthonormal_bank(std::vector<std::string> names, int64_t dim, Rng& rng,
                                      Dtype dt) {
    int64_t n = static_cast<int64_t>(names.size());
    if (dim < n) throw ContractError("make_random_orthonormal_bank: dim must be >= class count");
    // Gram-Schmidt on Gaussian rows (computed in double, stored in dt)
    std::vector<std::vector<double>> rows(static_cast<size_t>(n),
                                          std::vector<double>(static_cast<size_t>(dim)));
    for (auto& r : rows) {
        for (auto& v : r) v = rng.normal();
    }
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < i; ++j) {
            double dot = 0;
            for (int64_t k = 0; k < dim; ++k) dot += rows[i][k] * rows[j][k];
            for (int64_t k = 0; k < dim; ++k) rows[i][k] -= dot * rows[j][k];
        }
        double norm = 0;
        for (int64_t k = 0; k < dim; ++k) norm += rows[i][k] * rows[i][k];
        norm = std::sqrt(norm);
        if (norm < 1e-8) throw NumericError("make_random_orthonormal_bank: degenerate draw");
        for (int64_t k = 0; k < dim; ++k) rows[i][k] /= norm;
    }
    TextBank bank;
    bank.names = std::move(names);
    bank.K = Tensor::zeros({n, dim}, dt);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t k = 0; k < dim; ++k) bank.K.set(i * dim + k, rows[i][k]);
    bank.validate();
    return bank;
}

void save_text_bank(const std::string& path, const TextBank& bank) {
    bank.validate();
    nlohmann::json header = {{"dim", bank.dim()},
                             {"names", bank.names},
                             {"template", bank.prompt_template}};
    io::write_record(path, "DSMT", 1, header, io::f32_blob(bank.K));
}

TextBank load_text_bank(const std::string& path) {
    io::Record rec = io::read_record(path, "DSMT", 1);
    TextBank bank;
    try {
        bank.names = rec.header.at("names").get<std::vector<std::string>>();
        int64_t dim = rec.header.at("dim").get<int64_t>();
        if (dim < 1) throw DataError(path + ": non-positive dim");
        if (rec.header.contains("template")) {
            bank.prompt_template = rec.header.at("template").get<std::string>();
        }
        size_t off = 0;
        bank.K = io::f32_unblob(rec.payload, off, {bank.size(), dim}, Dtype::F32, path);
        if (off != rec.payload.size()) throw DataError(path + ": trailing bytes after blob");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": invalid bank header: " + e.what());
    }
    bank.validate();
    return bank;
}

ProjectionHead ProjectionHead::init(Rng& rng, int64_t c_in, int64_t c_text, Dtype dt) {
    ProjectionHead h;
    h.w = Tensor::randn(rng, {c_in, c_text}, 1.0 / std::sqrt(static_cast<double>(c_in)), dt);
    h.b = Tensor::zeros({c_text}, dt);
    h.w.set_requires_grad(true);
    h.b.set_requires_grad(true);
    return h;
}

Tensor ProjectionHead::forward(const Tensor& queries) const {
    return ops::add_rowvec(ops::matmul(queries, w), b);
}

void ProjectionHead::collect(const std::string& prefix, ParamMap& out) const {
    out.add(prefix + ".w", w);
    out.add(prefix + ".b", b);
}

namespace {

// shared core: rows of embeddings -> probability rows over bank classes
Tensor cosine_rows(const Tensor& emb, const TextBank& bank, double tau) {
    if (tau <= 0) throw ContractError("cosine_softmax: tau must be positive");
    bank.validate();
    if (emb.ndim() != 2 || emb.dim(1) != bank.dim()) {
        throw ContractError("cosine_softmax: embedding width does not match the bank");
    }
    Tensor Kb = bank.K.dtype() == emb.dtype() ? bank.K : bank.K.to(emb.dtype());
    Tensor zeta = ops::matmul(ops::l2_normalize_rows(emb), ops::transpose2d(ops::l2_normalize_rows(Kb)));
    return ops::softmax_rows(ops::scale(zeta, 1.0 / tau));
}

} // namespace

Tensor cosine_softmax(const Tensor& q, const TextBank& bank, double tau) {
    if (q.ndim() == 1) {
        Tensor p = cosine_rows(ops::reshape(q, {1, q.dim(0)}), bank, tau);
        return ops::reshape(p, {bank.size()});
    }
    return cosine_rows(q, bank, tau);
}

Tensor classify_queries(const Tensor& queries, const ProjectionHead& head, const TextBank& bank,
                        double tau) {
    if (queries.ndim() != 2 || queries.dim(1) != head.w.dim(0)) {
        throw ContractError("classify_queries: query width does not match the projection head");
    }
    if (queries.dim(0) > bank.size()) {
        throw ContractError("classify_queries: more queries than bank classes");
    }
    return cosine_rows(head.forward(queries), bank, tau);
}

} // namespace dsm::align
