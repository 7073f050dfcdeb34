#include "dsm/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "dsm/losses.hpp"
#include "dsm/metrics.hpp"
#include "dsm/serialize.hpp"

namespace dsm::train {

namespace fs = std::filesystem;

// ---- optimizer ----

void AdamW::init(const ParamMap& params) {
    t = 0;
    m.clear();
    v.clear();
    for (const auto& [name, p] : params.items) {
        (void)name;
        m.push_back(Tensor::zeros(p.shape(), Dtype::F64));
        v.push_back(Tensor::zeros(p.shape(), Dtype::F64));
    }
}

void AdamW::step(const ParamMap& params, double lr) {
    if (m.size() != params.size()) {
        throw ContractError("AdamW: optimizer not initialized for this parameter set");
    }
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor p = params.items[i].second;
        Tensor g = p.has_grad() ? p.grad() : Tensor();
        double* mi = m[i].data<double>();
        double* vi = v[i].data<double>();
        dispatch_dtype(p.dtype(), [&]<typename T>() {
            T* pd = p.data<T>();
            const T* gd = g.defined() ? g.cdata<T>() : nullptr;
            for (int64_t j = 0; j < p.numel(); ++j) {
                double gj = gd ? static_cast<double>(gd[j]) : 0.0;
                mi[j] = beta1 * mi[j] + (1.0 - beta1) * gj;
                vi[j] = beta2 * vi[j] + (1.0 - beta2) * gj * gj;
                double mhat = mi[j] / bc1;
                double vhat = vi[j] / bc2;
                double pj = static_cast<double>(pd[j]);
                pj -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * pj);
                pd[j] = static_cast<T>(pj);
            }
        });
    }
}

void zero_grads(const ParamMap& params) {
    for (const auto& [name, p] : params.items) {
        (void)name;
        Tensor(p).zero_grad();
    }
}

double lr_at(int64_t step, int64_t total, int64_t warmup, double base_lr) {
    if (total <= 0) throw ContractError("lr_at: total steps must be positive");
    if (warmup < 0 || warmup >= total) throw ContractError("lr_at: bad warmup length");
    if (step < warmup) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    double prog = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    prog = std::min(prog, 1.0);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * prog));
}

// ---- checkpoints ----

namespace {
constexpr const char* kCkptMagic = "DSMC";
}

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamMap& params, const AdamW* opt) {
    nlohmann::json table = nlohmann::json::array();
    std::string payload;
    auto push = [&](const std::string& name, const Tensor& t) {
        std::string blob = t.dtype() == Dtype::F64 ? io::f64_blob(t) : io::f32_blob(t);
        table.push_back({{"name", name},
                         {"dtype", dtype_name(t.dtype())},
                         {"shape", t.shape()},
                         {"offset", payload.size()},
                         {"bytes", blob.size()}});
        payload += blob;
    };
    for (const auto& [name, p] : params.items) push(name, p);
    if (opt) {
        if (opt->m.size() != params.size()) {
            throw ContractError("save_checkpoint: optimizer does not match parameters");
        }
        for (size_t i = 0; i < params.size(); ++i) {
            push("adamw.m." + params.items[i].first, opt->m[i]);
            push("adamw.v." + params.items[i].first, opt->v[i]);
        }
    }
    nlohmann::json header = {{"stage", meta.stage},   {"epoch", meta.epoch},
                             {"step", meta.step},     {"best", meta.best},
                             {"config", meta.config}, {"opt_t", opt ? opt->t : -1},
                             {"tensors", table}};
    io::write_record(path, kCkptMagic, 1, header, payload);
}

Tensor LoadedCheckpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw DataError("checkpoint: missing tensor " + name);
}

bool LoadedCheckpoint::has(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        (void)t;
        if (n == name) return true;
    }
    return false;
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    io::Record rec = io::read_record(path, kCkptMagic, 1);
    LoadedCheckpoint ck;
    try {
        ck.meta.stage = rec.header.at("stage").get<int>();
        ck.meta.epoch = rec.header.at("epoch").get<int64_t>();
        ck.meta.step = rec.header.at("step").get<int64_t>();
        ck.meta.best = rec.header.at("best").get<double>();
        ck.meta.config = rec.header.at("config");
        size_t consumed = 0;
        for (const auto& e : rec.header.at("tensors")) {
            std::string name = e.at("name").get<std::string>();
            Dtype dt = dtype_from_name(e.at("dtype").get<std::string>());
            Shape shape = e.at("shape").get<Shape>();
            size_t off = e.at("offset").get<size_t>();
            size_t bytes = e.at("bytes").get<size_t>();
            size_t want = static_cast<size_t>(shape_numel(shape)) * dtype_size(dt);
            if (bytes != want || off + bytes > rec.payload.size()) {
                throw DataError(path + ": tensor table inconsistent for " + name);
            }
            Tensor t = dt == Dtype::F64
                           ? io::f64_unblob(rec.payload, off, shape, path)
                           : io::f32_unblob(rec.payload, off, shape, Dtype::F32, path);
            ck.tensors.emplace_back(std::move(name), std::move(t));
            consumed += bytes;
        }
        if (consumed != rec.payload.size()) {
            throw DataError(path + ": payload size does not match the tensor table");
        }
        if (rec.header.contains("opt_t")) {
            ck.opt_t = rec.header.at("opt_t").get<int64_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": malformed checkpoint header: " + e.what());
    }
    return ck;
}

void restore_params(const LoadedCheckpoint& ck, const ParamMap& params, AdamW* opt) {
    for (const auto& [name, p] : params.items) {
        Tensor src = ck.find(name);
        if (src.shape() != p.shape() || src.dtype() != p.dtype()) {
            throw DataError("checkpoint: tensor " + name + " has mismatched shape/dtype");
        }
        Tensor(p).copy_from(src);
    }
    if (opt) {
        if (opt->m.size() != params.size()) {
            throw ContractError("restore_params: optimizer not initialized");
        }
        for (size_t i = 0; i < params.size(); ++i) {
            const std::string& name = params.items[i].first;
            Tensor sm = ck.find("adamw.m." + name);
            Tensor sv = ck.find("adamw.v." + name);
            if (sm.shape() != params.items[i].second.shape() ||
                sv.shape() != params.items[i].second.shape()) {
                throw DataError("checkpoint: moment shape mismatch for " + name);
            }
            opt->m[i].copy_from(sm);
            opt->v[i].copy_from(sv);
        }
        if (ck.opt_t < 0) throw DataError("checkpoint: missing optimizer step counter");
        opt->t = ck.opt_t;
    }
}

void warm_start(const LoadedCheckpoint& ck, const ParamMap& params) {
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("adamw.", 0) == 0) continue;
        Tensor p = params.find(name); // unknown names throw
        if (t.shape() != p.shape() || t.dtype() != p.dtype()) {
            throw DataError("checkpoint: tensor " + name + " has mismatched shape/dtype");
        }
        p.copy_from(t);
    }
}

// ---- augmentation ----

namespace {

struct Coords {
    int64_t d, h, w;
};

void flip_axis(std::vector<float>& img, std::vector<uint8_t>& lab, int64_t n, int axis) {
    std::vector<float> img2(img.size());
    std::vector<uint8_t> lab2(lab.size());
    for (int64_t d = 0; d < n; ++d) {
        for (int64_t h = 0; h < n; ++h) {
            for (int64_t w = 0; w < n; ++w) {
                int64_t c[3] = {d, h, w};
                c[axis] = n - 1 - c[axis];
                int64_t src = (c[0] * n + c[1]) * n + c[2];
                int64_t dst = (d * n + h) * n + w;
                img2[static_cast<size_t>(dst)] = img[static_cast<size_t>(src)];
                lab2[static_cast<size_t>(dst)] = lab[static_cast<size_t>(src)];
            }
        }
    }
    img.swap(img2);
    lab.swap(lab2);
}

// One quarter turn in the (a, b) plane: dst[i@a, j@b] = src[j@a, (n-1-i)@b].
void rot90_once(std::vector<float>& img, std::vector<uint8_t>& lab, int64_t n, int a, int b) {
    std::vector<float> img2(img.size());
    std::vector<uint8_t> lab2(lab.size());
    for (int64_t d = 0; d < n; ++d) {
        for (int64_t h = 0; h < n; ++h) {
            for (int64_t w = 0; w < n; ++w) {
                int64_t c[3] = {d, h, w};
                int64_t s[3] = {d, h, w};
                s[a] = c[b];
                s[b] = n - 1 - c[a];
                int64_t src = (s[0] * n + s[1]) * n + s[2];
                int64_t dst = (c[0] * n + c[1]) * n + c[2];
                img2[static_cast<size_t>(dst)] = img[static_cast<size_t>(src)];
                lab2[static_cast<size_t>(dst)] = lab[static_cast<size_t>(src)];
            }
        }
    }
    img.swap(img2);
    lab.swap(lab2);
}

} // namespace

data::VolumeSample augment_sample(const data::VolumeSample& s, Rng& rng) {
    data::VolumeSample out = s;
    int64_t n = s.dim;
    std::vector<float> img(s.image.cvalues<float>().begin(), s.image.cvalues<float>().end());
    std::vector<uint8_t> lab = s.label;

    for (int axis = 0; axis < 3; ++axis) {
        if (rng.bernoulli(0.5)) flip_axis(img, lab, n, axis);
    }
    static constexpr int kPlanes[3][2] = {{0, 1}, {0, 2}, {1, 2}};
    int plane = static_cast<int>(rng.uniform_int(0, 2));
    int64_t quarter_turns = rng.uniform_int(0, 3);
    for (int64_t k = 0; k < quarter_turns; ++k) {
        rot90_once(img, lab, n, kPlanes[plane][0], kPlanes[plane][1]);
    }

    double gamma = rng.uniform(0.8, 1.25);
    double brightness = rng.uniform(-0.1, 0.1);
    for (float& x : img) {
        double y = std::pow(std::max(0.0, static_cast<double>(x)), gamma) + brightness;
        x = static_cast<float>(std::clamp(y, 0.0, 1.0));
    }

    Tensor t = Tensor::zeros({n, n, n}, Dtype::F32);
    std::copy(img.begin(), img.end(), t.data<float>());
    out.image = t;
    out.label = std::move(lab);
    return out;
}

data::VolumeSample crop_sample(const data::VolumeSample& s, int64_t patch, Rng& rng) {
    if (patch <= 0 || patch > s.dim) throw ContractError("crop_sample: bad patch extent");
    if (patch == s.dim) return s;
    int64_t n = s.dim;
    int64_t od = rng.uniform_int(0, n - patch);
    int64_t oh = rng.uniform_int(0, n - patch);
    int64_t ow = rng.uniform_int(0, n - patch);
    data::VolumeSample out = s;
    out.dim = patch;
    out.label.assign(static_cast<size_t>(patch * patch * patch), 0);
    Tensor img = Tensor::zeros({patch, patch, patch}, Dtype::F32);
    float* dst = img.data<float>();
    const float* src = s.image.cdata<float>();
    for (int64_t d = 0; d < patch; ++d) {
        for (int64_t h = 0; h < patch; ++h) {
            for (int64_t w = 0; w < patch; ++w) {
                int64_t si = ((od + d) * n + (oh + h)) * n + (ow + w);
                int64_t di = (d * patch + h) * patch + w;
                dst[di] = src[si];
                out.label[static_cast<size_t>(di)] = s.label[static_cast<size_t>(si)];
            }
        }
    }
    out.image = img;
    return out;
}

// ---- loss assembly ----

namespace {

Tensor volume_input(const data::VolumeSample& s) {
    return s.image.view({1, s.dim, s.dim, s.dim});
}

Tensor class_targets(const data::VolumeSample& s, int64_t rows) {
    int64_t V = s.voxels();
    Tensor Y = Tensor::zeros({rows, V}, Dtype::F32);
    float* y = Y.data<float>();
    for (int64_t v = 0; v < V; ++v) {
        uint8_t l = s.label[static_cast<size_t>(v)];
        if (l < rows) y[l * V + v] = 1.0f;
    }
    return Y;
}

std::vector<int64_t> labeled_rows(const data::VolumeSample& s, int64_t rows) {
    std::vector<int64_t> out;
    for (int64_t c : s.labeled_classes) {
        if (c < rows) out.push_back(c);
    }
    return out;
}

Tensor sample_loss(const model::DsmModel& m, const data::VolumeSample& s, int stage,
                   const align::TextBank* bank) {
    Tensor vol = volume_input(s);
    Tensor masks, logits, p;
    int64_t rows;
    if (stage == 1) {
        rows = m.cfg.n_organ_queries;
        auto out = m.stage1_forward(vol);
        masks = out.masks;
        logits = out.logits;
    } else {
        rows = m.cfg.n_organ_queries + m.cfg.n_tumor_queries;
        auto out = m.stage2_forward(vol, m.cfg.use_text_align ? bank : nullptr);
        masks = out.masks;
        logits = out.logits;
        p = out.p;
    }
    Tensor Y = class_targets(s, rows);
    std::vector<int64_t> lab = labeled_rows(s, rows);
    if (lab.empty()) throw DataError("training sample carries no usable labels");
    double inv_rows = 1.0 / static_cast<double>(lab.size());
    double inv_vox = inv_rows / static_cast<double>(s.voxels());

    // dice reads the bounded masks; cross-entropy reads raw logits so the
    // gradient stays alive after the sigmoid saturates
    Tensor dice = losses::dice_loss(Y, masks, lab, /*aggregated=*/true);
    Tensor ce;
    if (stage == 2 && m.cfg.use_text_align) {
        ce = losses::stage2_bce_logits(Y, logits, ops::take_diag(p), lab);
    } else {
        ce = losses::bce_logits_loss(Y, logits, lab);
    }
    return ops::add(ops::scale(dice, inv_rows), ops::scale(ce, inv_vox));
}

std::vector<size_t> shuffled(size_t n, uint64_t seed) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(seed);
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

std::vector<data::VolumeSample> load_split(const data::Manifest& man, const std::string& split) {
    std::vector<data::VolumeSample> out;
    for (const auto& p : man.paths(split)) out.push_back(data::read_volume(p));
    return out;
}

} // namespace

// ---- evaluation ----

nlohmann::json EvalReport::to_json() const {
    return {{"organ_dsc", organ_dsc},
            {"seen_dsc", seen_dsc},
            {"unseen_auroc", unseen_auroc},
            {"unseen_fpr95", unseen_fpr95}};
}

namespace {

Tensor binary_row(const Tensor& masks, int64_t row, double thresh) {
    int64_t V = masks.dim(1);
    Tensor out = Tensor::zeros({V}, Dtype::F32);
    const float* src = masks.cdata<float>() + row * V;
    float* dst = out.data<float>();
    for (int64_t v = 0; v < V; ++v) dst[v] = src[v] >= thresh ? 1.0f : 0.0f;
    return out;
}

Tensor binary_truth(const data::VolumeSample& s, int64_t cls) {
    Tensor out = Tensor::zeros({s.voxels()}, Dtype::F32);
    float* dst = out.data<float>();
    for (int64_t v = 0; v < s.voxels(); ++v) {
        dst[v] = s.label[static_cast<size_t>(v)] == cls ? 1.0f : 0.0f;
    }
    return out;
}

struct EvalAccum {
    double organ_sum = 0;
    int64_t organ_n = 0;
    double seen_sum = 0;
    int64_t seen_n = 0;
    std::vector<double> ood_scores;
    std::vector<uint8_t> ood_labels;

    void add_volume(const model::DsmModel& m, const data::Manifest& man, int stage,
                    const data::VolumeSample& s, bool is_unseen) {
        int64_t n_organs = m.cfg.n_organ_queries - 1;
        Tensor vol = volume_input(s);
        Tensor masks;
        Tensor ood;
        if (stage == 1) {
            masks = m.stage1_forward(vol).masks;
        } else {
            auto out = m.stage2_forward(vol, nullptr);
            masks = out.masks;
            ood = out.ood;
        }
        for (int64_t k = 1; k <= n_organs; ++k) {
            organ_sum += metrics::dsc(binary_row(masks, k, 0.5), binary_truth(s, k));
            ++organ_n;
        }
        if (stage == 2 && !is_unseen) {
            for (int64_t j = 0; j < m.cfg.n_tumor_queries; ++j) {
                int64_t cls = m.cfg.n_organ_queries + j;
                Tensor truth = binary_truth(s, cls);
                bool present = false;
                for (float x : truth.cvalues<float>()) present |= (x > 0);
                if (!present) continue;
                seen_sum += metrics::dsc(binary_row(masks, cls, 0.5), truth);
                ++seen_n;
            }
        }
        if (stage == 2 && is_unseen) {
            for (int64_t v = 0; v < s.voxels(); ++v) {
                ood_scores.push_back(ood.at(v));
                ood_labels.push_back(s.label[static_cast<size_t>(v)] == man.unseen_class);
            }
        }
    }

    EvalReport report() const {
        EvalReport rep;
        rep.unseen_auroc = 0.5; // neutral when no anomaly path is evaluated
        if (organ_n > 0) rep.organ_dsc = organ_sum / static_cast<double>(organ_n);
        if (seen_n > 0) rep.seen_dsc = seen_sum / static_cast<double>(seen_n);
        if (!ood_scores.empty()) {
            rep.unseen_auroc = metrics::auroc(ood_scores, ood_labels);
            rep.unseen_fpr95 = metrics::fpr_at_tpr(ood_scores, ood_labels, 0.95);
        }
        return rep;
    }
};

void check_eval_compat(const model::DsmModel& m, const data::Manifest& man) {
    if (man.spec.n_organs != m.cfg.n_organ_queries - 1) {
        throw ContractError("evaluate: organ query count does not match the dataset");
    }
}

} // namespace

EvalReport evaluate(const model::DsmModel& m, const data::Manifest& man, int stage) {
    check_eval_compat(m, man);
    EvalAccum acc;
    for (const auto& s : load_split(man, "test_seen")) acc.add_volume(m, man, stage, s, false);
    for (const auto& s : load_split(man, "test_unseen")) acc.add_volume(m, man, stage, s, true);
    return acc.report();
}

EvalReport evaluate_split(const model::DsmModel& m, const data::Manifest& man, int stage,
                          const std::string& split) {
    check_eval_compat(m, man);
    auto samples = load_split(man, split);
    if (samples.empty()) throw DataError("evaluate_split: no volumes in split " + split);
    EvalAccum acc;
    for (const auto& s : samples) acc.add_volume(m, man, stage, s, split == "test_unseen");
    return acc.report();
}

align::TextBank seen_class_bank(const data::Manifest& man, int64_t n_queries,
                                int64_t text_dim, uint64_t seed) {
    if (n_queries > static_cast<int64_t>(man.classes.size())) {
        throw ContractError("seen_class_bank: more queries than dataset classes");
    }
    std::vector<std::string> names(man.classes.begin(),
                                   man.classes.begin() + static_cast<size_t>(n_queries));
    Rng rng(Rng::mix(seed, 0x62616e6bull)); // salt: "bank"
    return align::make_random_orthonormal_bank(std::move(names), text_dim, rng);
}

// ---- training loop ----

TrainResult train_stage(model::DsmModel& m, int stage, const data::Manifest& man,
                        const align::TextBank& bank, const TrainConfig& tc,
                        const std::string& out_dir, const std::string& resume_from) {
    if (stage != 1 && stage != 2) throw ContractError("train_stage: stage must be 1 or 2");
    if (tc.epochs <= 0 || tc.batch <= 0) throw ContractError("train_stage: bad epochs/batch");
    if (m.cfg.n_organ_queries != man.spec.n_organs + 1) {
        throw ContractError("train_stage: organ queries must cover background + organs");
    }
    if (stage == 2 && m.cfg.n_tumor_queries != man.spec.n_seen_tumors) {
        throw ContractError("train_stage: tumor queries must match the seen lesion classes");
    }
    fs::create_directories(out_dir);

    auto train1 = load_split(man, "train1");
    auto train2 = load_split(man, "train2");
    if (train1.empty() && train2.empty()) throw DataError("train_stage: empty training set");
    if (stage == 2 && (train1.empty() || train2.empty())) {
        throw DataError("train_stage: stage 2 needs both organ-only and tumor-bearing samples");
    }

    ParamMap params;
    if (stage == 1) {
        m.collect_stage1(params);
    } else {
        m.collect_all(params);
    }
    AdamW opt;
    opt.weight_decay = tc.weight_decay;
    opt.init(params);

    int64_t samples_per_epoch = stage == 1
                                    ? static_cast<int64_t>(train1.size() + train2.size())
                                    : 2 * static_cast<int64_t>(train2.size());
    int64_t steps_per_epoch = (samples_per_epoch + tc.batch - 1) / tc.batch;
    int64_t total_steps = tc.epochs * steps_per_epoch;
    int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(
                                              std::llround(tc.warmup_frac *
                                                           static_cast<double>(total_steps))));
    if (warmup >= total_steps) warmup = total_steps - 1;

    TrainResult res;
    int64_t start_epoch = 0;
    int64_t gstep = 0;
    if (!resume_from.empty()) {
        LoadedCheckpoint ck = load_checkpoint(resume_from);
        if (ck.meta.stage != stage) {
            throw DataError("train_stage: checkpoint belongs to a different stage");
        }
        restore_params(ck, params, &opt);
        start_epoch = ck.meta.epoch;
        gstep = ck.meta.step;
        res.best = ck.meta.best;
    }

    std::string tag = "stage" + std::to_string(stage);
    res.best_path = (fs::path(out_dir) / (tag + "_best.dsmc")).string();
    res.last_path = (fs::path(out_dir) / (tag + "_last.dsmc")).string();

    auto run_eval = [&](int64_t epoch_done) {
        EvalReport rep = evaluate(m, man, stage);
        nlohmann::json e = rep.to_json();
        e["epoch"] = epoch_done;
        e["step"] = gstep;
        res.log.push_back(e);
        double metric = stage == 1 ? rep.organ_dsc : 0.5 * (rep.organ_dsc + rep.seen_dsc);
        if (metric >= res.best) {
            res.best = metric;
            CheckpointMeta meta{stage, epoch_done, gstep, res.best, tc.config_echo};
            save_checkpoint(res.best_path, meta, params, nullptr);
        }
    };

    for (int64_t epoch = start_epoch; epoch < tc.epochs; ++epoch) {
        // deterministic per-epoch sample stream
        std::vector<const data::VolumeSample*> stream;
        if (stage == 1) {
            std::vector<const data::VolumeSample*> all;
            for (const auto& s : train1) all.push_back(&s);
            for (const auto& s : train2) all.push_back(&s);
            for (size_t i : shuffled(all.size(), Rng::mix(Rng::mix(tc.seed, 0x7331ull),
                                                          static_cast<uint64_t>(epoch)))) {
                stream.push_back(all[i]);
            }
        } else {
            auto i2 = shuffled(train2.size(), Rng::mix(Rng::mix(tc.seed, 0x7432ull),
                                                       static_cast<uint64_t>(epoch)));
            auto i1 = shuffled(train1.size(), Rng::mix(Rng::mix(tc.seed, 0x7431ull),
                                                       static_cast<uint64_t>(epoch)));
            for (size_t k = 0; k < i2.size(); ++k) {
                stream.push_back(&train2[i2[k]]);
                stream.push_back(&train1[i1[k % i1.size()]]);
            }
        }

        for (int64_t off = 0; off < static_cast<int64_t>(stream.size()); off += tc.batch) {
            int64_t slots = std::min<int64_t>(tc.batch,
                                              static_cast<int64_t>(stream.size()) - off);
            zero_grads(params);
            double batch_loss = 0;
            for (int64_t k = 0; k < slots; ++k) {
                const data::VolumeSample* s = stream[static_cast<size_t>(off + k)];
                uint64_t sseed = Rng::mix(Rng::mix(tc.seed, 0x617567ull),
                                          static_cast<uint64_t>(epoch) * 1000003ull +
                                              static_cast<uint64_t>(off + k));
                Rng srng(sseed);
                data::VolumeSample local;
                const data::VolumeSample* use = s;
                if (tc.augment) {
                    local = augment_sample(*use, srng);
                    use = &local;
                }
                if (tc.patch > 0 && tc.patch < use->dim) {
                    local = crop_sample(*use, tc.patch, srng);
                    use = &local;
                }
                Tape tape;
                Tape::Scope scope(tape);
                Tensor loss = sample_loss(m, *use, stage, &bank);
                double lv = loss.item();
                if (!std::isfinite(lv)) {
                    throw NumericError("train_stage: non-finite loss at step " +
                                       std::to_string(gstep));
                }
                batch_loss += lv;
                tape.backward(ops::scale(loss, 1.0 / static_cast<double>(slots)));
            }
            opt.step(params, lr_at(gstep, total_steps, warmup, tc.lr));
            ++gstep;
            res.step_loss.push_back(batch_loss / static_cast<double>(slots));
        }

        CheckpointMeta meta{stage, epoch + 1, gstep, res.best, tc.config_echo};
        save_checkpoint(res.last_path, meta, params, &opt);
        if (tc.stop_after > 0 && epoch + 1 >= tc.stop_after && epoch + 1 < tc.epochs) {
            return res; // paused; resume from the last checkpoint to continue
        }
        if (tc.eval_every > 0 && ((epoch + 1) % tc.eval_every == 0) && epoch + 1 < tc.epochs) {
            run_eval(epoch + 1);
        }
    }
    run_eval(tc.epochs);
    return res;
}

} // namespace dsm::train
