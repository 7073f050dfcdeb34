#pragma once

#include <string>
#include <vector>

#include "dsm/ops.hpp"
#include "dsm/params.hpp"

// Class-prompt alignment: a bank of per-class text embeddings and the
// cosine-softmax classifier that matches projected query embeddings to it.
// The bank file stands in for a frozen text encoder; synthetic orthonormal
// banks make the desk-scale experiments self-contained.
namespace dsm::align {

inline constexpr const char* kPromptTemplate = "a computerized tomography of a {CLS}";

// Full-scale class vocabularies (25 organs, 20 lesions) carried as manifest
// constants; desk-scale data uses its own smaller names with the same format.
const std::vector<std::string>& organ_vocab();
const std::vector<std::string>& tumor_vocab();

// Instantiates kPromptTemplate for one class name.
std::string prompt_for(const std::string& cls);

struct TextBank {
    std::vector<std::string> names; // ordered, matches query <-> class pairing
    Tensor K;                       // [names.size(), dim]
    std::string prompt_template = kPromptTemplate;

    int64_t size() const { return static_cast<int64_t>(names.size()); }
    int64_t dim() const { return K.defined() ? K.dim(1) : 0; }
    // unique names, K well-shaped, every row norm > 0; violations -> DataError
    void validate() const;
};

// Rows are standard basis vectors: pairwise cosines exactly zero.
TextBank make_orthonormal_bank(std::vector<std::string> names, int64_t dim,
                               Dtype dt = Dtype::F32);
// Random rotation of the basis (Gram-Schmidt on a Gaussian draw); pairwise
// cosines vanish to round-off.
TextBank make_random_orthonormal_bank(std::vector<std::string> names, int64_t dim, Rng& rng,
                                      Dtype dt = Dtype::F32);

void save_text_bank(const std::string& path, const TextBank& bank);
TextBank load_text_bank(const std::string& path);

// Linear map from query width to text-embedding width.
struct ProjectionHead {
    Tensor w; // [C_in, C_text]
    Tensor b; // [C_text]
    static ProjectionHead init(Rng& rng, int64_t c_in, int64_t c_text, Dtype dt);
    Tensor forward(const Tensor& queries) const; // [N, C_in] -> [N, C_text]
    void collect(const std::string& prefix, ParamMap& out) const;
};

// Probability row(s) over bank classes from cosine similarities sharpened by
// 1/tau (default 0.01; the softmax subtracts the row max, which is mandatory
// at that temperature). Zero-norm inputs are contract errors.
Tensor cosine_softmax(const Tensor& q, const TextBank& bank, double tau = 0.01);

// Row i = cosine_softmax of the projected query i: [N, C_in] -> [N, bank.size()].
// The bank may hold more classes than there are queries (unseen classes are
// appended at inference time).
Tensor classify_queries(const Tensor& queries, const ProjectionHead& head,
                        const TextBank& bank, double tau = 0.01);

} // namespace dsm::align
