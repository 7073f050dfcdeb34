#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsm/tensor.hpp"

// Procedural volumetric dataset: organs are randomly placed non-overlapping
// superellipsoids with smooth class-specific intensity profiles; lesions are
// carved strictly inside a host organ with a distinct intensity offset and
// extra high-frequency texture. One lesion class is held out of training
// entirely for zero-shot evaluation.
namespace dsm::data {

struct GeneratorSpec {
    int64_t dim = 32; // cubic volumes, D = H = W
    int64_t n_organs = 4;
    int64_t n_seen_tumors = 2;
    int64_t n_unseen_tumors = 1;
    double organ_frac_lo = 0.05; // accepted band for the organ voxel fraction
    double organ_frac_hi = 0.40;
    double label_rate = 0.7; // chance an organ class is labeled in a sample

    int64_t n_classes() const { return 1 + n_organs + n_seen_tumors + n_unseen_tumors; }
    int64_t first_tumor() const { return 1 + n_organs; }
    std::vector<std::string> class_names() const;
    void validate() const; // ContractError on nonsense parameters
};

struct VolumeSample {
    Tensor image;               // [D,H,W] float32, values in [0,1]
    std::vector<uint8_t> label; // D*H*W class indices, 0 = background
    int64_t dim = 0;
    std::vector<std::string> classes;
    std::vector<int64_t> labeled_classes; // rows carrying supervision

    int64_t voxels() const { return dim * dim * dim; }
};

// Test hook: the organ labeling before lesions were carved, and each lesion
// class's host organ, so containment can be checked voxel by voxel.
struct GenInfo {
    std::vector<uint8_t> organ_label;
    std::vector<int64_t> host; // indexed by class, 0 when absent / not a lesion
};

// Deterministic under (spec, tumor_classes, labeled_classes, seed). Every
// lesion class listed must also appear in labeled_classes, and 0 (background)
// must be labeled. Throws DataError when placement cannot satisfy the spec
// within bounded retries.
VolumeSample generate_volume(const GeneratorSpec& spec,
                             const std::vector<int64_t>& tumor_classes,
                             const std::vector<int64_t>& labeled_classes, uint64_t seed,
                             GenInfo* info = nullptr);

void write_volume(const std::string& path, const VolumeSample& s);
VolumeSample read_volume(const std::string& path);

struct Manifest {
    uint64_t seed = 0;
    GeneratorSpec spec;
    std::vector<std::string> classes;
    int64_t unseen_class = -1;
    struct Entry {
        std::string file;  // relative to the manifest directory
        std::string split; // train1 | train2 | test_seen | test_unseen
    };
    std::vector<Entry> entries;
    std::string root; // directory the manifest lives in (set on save/load)

    std::vector<std::string> paths(const std::string& split) const;
};

// Generates all volumes under out_dir plus manifest.json. Splits:
// train1 = organ-only (n_train/2), train2 = organ+seen-lesion volumes,
// test_seen and test_unseen halve n_test. The held-out class appears only in
// test_unseen. Each organ class ends up labeled in at least 30% of samples.
Manifest generate_dataset(const GeneratorSpec& spec, const std::string& out_dir, uint64_t seed,
                          int64_t n_train, int64_t n_test, int64_t unseen_class);

void save_manifest(const std::string& path, const Manifest& m);
Manifest load_manifest(const std::string& path);

} // namespace dsm::data
