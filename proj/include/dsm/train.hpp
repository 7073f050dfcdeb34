#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsm/data.hpp"
#include "dsm/model.hpp"

// Optimization, augmentation, checkpointing, the two-stage training loop,
// and the evaluation harness.
namespace dsm::train {

// Decoupled-weight-decay Adam with bias correction. Moments are kept in
// float64 regardless of the parameter dtype so that checkpoint/resume
// reproduces the uninterrupted run bit-for-bit.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;
    int64_t t = 0;
    std::vector<Tensor> m, v; // f64, shaped like the parameters

    void init(const ParamMap& params);
    // One update from the parameters' accumulated gradients (missing
    // gradients count as zero); does not clear the gradients.
    void step(const ParamMap& params, double lr);
};

void zero_grads(const ParamMap& params);

// Linear warm-up to `base_lr` over `warmup` steps, then cosine decay to zero
// at `total` steps. `step` counts completed optimizer updates.
double lr_at(int64_t step, int64_t total, int64_t warmup, double base_lr);

// ---- checkpoints (.dsmc) ----

struct CheckpointMeta {
    int stage = 1;
    int64_t epoch = 0; // completed epochs
    int64_t step = 0;  // completed optimizer updates
    double best = 0.0;
    nlohmann::json config; // effective run configuration echo
};

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamMap& params, const AdamW* opt);

struct LoadedCheckpoint {
    CheckpointMeta meta;
    int64_t opt_t = -1; // optimizer step counter, -1 when absent
    std::vector<std::pair<std::string, Tensor>> tensors; // params + moments
    Tensor find(const std::string& name) const;
    bool has(const std::string& name) const;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies checkpoint values into same-named parameters (shape/dtype checked;
// missing names are data errors) and, when `opt` is given, restores its
// moments and step counter. Exact-resume path.
void restore_params(const LoadedCheckpoint& ck, const ParamMap& params, AdamW* opt);

// Copies every checkpoint parameter into the (possibly larger) parameter set,
// leaving parameters absent from the checkpoint at their initialization.
// Used to seed stage 2 from a stage-1 checkpoint.
void warm_start(const LoadedCheckpoint& ck, const ParamMap& params);

// ---- data handling ----

// Label-consistent augmentation: axis flips, right-angle rotations, additive
// brightness, gamma scaling. Geometric transforms apply to image and label
// alike; intensity transforms keep the image in [0, 1].
data::VolumeSample augment_sample(const data::VolumeSample& s, Rng& rng);

// Random cubic crop (image + label) of extent `patch`; `patch` must divide
// into the volume (patch <= dim). Used when training on sub-volumes.
data::VolumeSample crop_sample(const data::VolumeSample& s, int64_t patch, Rng& rng);

// ---- training ----

struct TrainConfig {
    int64_t epochs = 30;
    int64_t batch = 2;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    double warmup_frac = 0.1;
    int64_t eval_every = 5; // epochs between evaluations (0: only at the end)
    bool augment = true;
    int64_t patch = 0; // 0: train on full volumes
    uint64_t seed = 1;
    // Pause after this many completed epochs (0: run to the end). The
    // learning-rate schedule still spans all `epochs`, so a paused run
    // resumed from its last checkpoint is indistinguishable from an
    // uninterrupted one.
    int64_t stop_after = 0;
    nlohmann::json config_echo; // effective run configuration, stored in checkpoints
};

struct EvalReport {
    double organ_dsc = 0.0;    // mean over organ classes on all test volumes
    double seen_dsc = 0.0;     // mean over present seen-lesion classes (test_seen)
    double unseen_auroc = 0.0; // voxel AUROC of the anomaly map (test_unseen)
    double unseen_fpr95 = 1.0; // FPR at 95% TPR on the same scores
    nlohmann::json to_json() const;
};

struct TrainResult {
    double best = 0.0;              // best model-selection metric seen
    std::string best_path;          // checkpoint of the best evaluation
    std::string last_path;          // checkpoint after the final epoch
    std::vector<double> step_loss;  // mean batch loss per optimizer step
    std::vector<nlohmann::json> log;
};

// Trains one stage in place. Stage 1 optimizes the backbone + organ path on
// the dice+bce objective; stage 2 optimizes everything, mixes tumor-bearing
// and organ-only samples 1:1, and adds the class-alignment weighting when
// enabled. Non-finite losses raise NumericError. Deterministic for a fixed
// (config, dataset, seed); `resume_from` continues an interrupted run with
// bit-identical behavior.
TrainResult train_stage(model::DsmModel& m, int stage, const data::Manifest& man,
                        const align::TextBank& bank, const TrainConfig& tc,
                        const std::string& out_dir,
                        const std::string& resume_from = "");

// Evaluates on the test splits: organ DSC on both, seen-lesion DSC on
// test_seen, anomaly AUROC / FPR@95TPR on test_unseen (stage 2 only; a
// stage-1 model reports organ DSC and neutral anomaly numbers).
EvalReport evaluate(const model::DsmModel& m, const data::Manifest& man, int stage);

// Same accounting restricted to one manifest split. Anomaly metrics are only
// meaningful on test_unseen; elsewhere they stay at their neutral defaults.
EvalReport evaluate_split(const model::DsmModel& m, const data::Manifest& man, int stage,
                          const std::string& split);

// Builds the deterministic class-embedding bank for the seen classes
// (background, organs, seen lesions) of a dataset.
align::TextBank seen_class_bank(const data::Manifest& man, int64_t n_queries,
                                int64_t text_dim, uint64_t seed);

} // namespace dsm::train
