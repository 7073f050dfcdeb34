#include "dsm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "dsm/serialize.hpp"

namespace dsm::data {

namespace {

namespace fs = std::filesystem;

struct Superellipsoid {
    double cx, cy, cz; // center
    double ax, ay, az; // semi-axes
    double p;          // exponent

    // radial value: <= 1 inside, 1 on the surface
    double s(int64_t d, int64_t h, int64_t w) const {
        return std::pow(std::abs((d - cz) / az), p) + std::pow(std::abs((h - cy) / ay), p) +
               std::pow(std::abs((w - cx) / ax), p);
    }
};

// per-class lesion appearance: intensity offset from the host plus extra
// texture noise, alternating sign and growing magnitude so classes differ
struct LesionSignature {
    double offset;
    double sigma;
};

LesionSignature lesion_signature(int64_t lesion_index) {
    double mag = 0.18 + 0.04 * static_cast<double>(lesion_index / 2);
    double offset = (lesion_index % 2 == 0) ? mag : -mag;
    return {offset, 0.035 + 0.008 * static_cast<double>(lesion_index)};
}

double organ_level(int64_t organ_index) { return 0.32 + 0.13 * static_cast<double>(organ_index); }

constexpr double kBackgroundLevel = 0.15;
constexpr double kGlobalNoise = 0.02;

} // namespace

std::vector<std::string> GeneratorSpec::class_names() const {
    std::vector<std::string> names = {"background"};
    for (int64_t i = 0; i < n_organs; ++i) {
        names.push_back("organ " + std::string(1, static_cast<char>('a' + i)));
    }
    int64_t tumors = n_seen_tumors + n_unseen_tumors;
    for (int64_t i = 0; i < tumors; ++i) {
        names.push_back("lesion " + std::string(1, static_cast<char>('a' + i)));
    }
    return names;
}

void GeneratorSpec::validate() const {
    if (dim < 12 || dim > 256) throw ContractError("GeneratorSpec: dim out of range [12,256]");
    if (n_organs < 1 || n_seen_tumors < 1 || n_unseen_tumors < 1) {
        throw ContractError("GeneratorSpec: need at least one organ, seen and unseen lesion class");
    }
    if (n_classes() > 255) throw ContractError("GeneratorSpec: too many classes for u8 labels");
    if (!(organ_frac_lo >= 0 && organ_frac_lo < organ_frac_hi && organ_frac_hi <= 1.0)) {
        throw ContractError("GeneratorSpec: organ fraction band is not a valid interval");
    }
    if (!(label_rate > 0 && label_rate <= 1)) {
        throw ContractError("GeneratorSpec: label_rate must lie in (0,1]");
    }
}

VolumeSample generate_volume(const GeneratorSpec& spec, const std::vector<int64_t>& tumor_classes,
                             const std::vector<int64_t>& labeled_classes, uint64_t seed,
                             GenInfo* info) {
    spec.validate();
    std::set<int64_t> labeled_set(labeled_classes.begin(), labeled_classes.end());
    if (labeled_set.size() != labeled_classes.size()) {
        throw ContractError("generate_volume: duplicate labeled class");
    }
    if (!labeled_set.count(0)) throw ContractError("generate_volume: background must be labeled");
    for (int64_t c : labeled_classes) {
        if (c < 0 || c >= spec.n_classes()) {
            throw ContractError("generate_volume: labeled class out of range");
        }
    }
    for (int64_t t : tumor_classes) {
        if (t < spec.first_tumor() || t >= spec.n_classes()) {
            throw ContractError("generate_volume: not a lesion class: " + std::to_string(t));
        }
        if (!labeled_set.count(t)) {
            throw ContractError("generate_volume: lesion-bearing samples must label the lesion");
        }
    }

    Rng rng(seed);
    int64_t n = spec.dim, V = n * n * n;
    double scale = static_cast<double>(n) / 32.0;
    auto at = [n](int64_t d, int64_t h, int64_t w) { return (d * n + h) * n + w; };

    std::vector<uint8_t> label;
    std::vector<float> sfield;              // organ radial value per voxel
    std::vector<Superellipsoid> organ_geom; // indexed by organ class - 1
    std::vector<int64_t> host(static_cast<size_t>(spec.n_classes()), 0);
    std::vector<float> tfield; // lesion radial value per voxel

    bool placed = false;
    for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
        label.assign(static_cast<size_t>(V), 0);
        sfield.assign(static_cast<size_t>(V), 0.f);
        tfield.assign(static_cast<size_t>(V), 0.f);
        organ_geom.clear();
        bool ok = true;

        // --- organs: non-overlapping superellipsoids ---
        for (int64_t k = 1; k <= spec.n_organs && ok; ++k) {
            bool organ_ok = false;
            for (int tries = 0; tries < 200 && !organ_ok; ++tries) {
                Superellipsoid e;
                e.ax = rng.uniform(4.5, 8.0) * scale;
                e.ay = rng.uniform(4.5, 8.0) * scale;
                e.az = rng.uniform(4.5, 8.0) * scale;
                e.p = rng.uniform(1.8, 3.5);
                double m = 1.5;
                if (2 * (e.ax + m) >= n - 1 || 2 * (e.ay + m) >= n - 1 || 2 * (e.az + m) >= n - 1) {
                    continue; // volume too small for this draw
                }
                e.cx = rng.uniform(e.ax + m, n - 1 - e.ax - m);
                e.cy = rng.uniform(e.ay + m, n - 1 - e.ay - m);
                e.cz = rng.uniform(e.az + m, n - 1 - e.az - m);
                // collect and test for overlap with previously placed organs
                std::vector<int64_t> vox;
                bool clash = false;
                int64_t d0 = static_cast<int64_t>(std::floor(e.cz - e.az));
                int64_t d1 = static_cast<int64_t>(std::ceil(e.cz + e.az));
                int64_t h0 = static_cast<int64_t>(std::floor(e.cy - e.ay));
                int64_t h1 = static_cast<int64_t>(std::ceil(e.cy + e.ay));
                int64_t w0 = static_cast<int64_t>(std::floor(e.cx - e.ax));
                int64_t w1 = static_cast<int64_t>(std::ceil(e.cx + e.ax));
                for (int64_t d = std::max<int64_t>(0, d0); d <= std::min(n - 1, d1) && !clash; ++d)
                    for (int64_t h = std::max<int64_t>(0, h0); h <= std::min(n - 1, h1) && !clash;
                         ++h)
                        for (int64_t w = std::max<int64_t>(0, w0); w <= std::min(n - 1, w1); ++w) {
                            if (e.s(d, h, w) > 1.0) continue;
                            if (label[at(d, h, w)] != 0) {
                                clash = true;
                                break;
                            }
                            vox.push_back(at(d, h, w));
                        }
                if (clash || vox.empty()) continue;
                for (int64_t v : vox) {
                    label[v] = static_cast<uint8_t>(k);
                }
                organ_geom.push_back(e);
                organ_ok = true;
            }
            ok = organ_ok;
        }
        if (!ok) continue;

        // recompute radial values from the accepted geometry
        for (int64_t d = 0; d < n; ++d)
            for (int64_t h = 0; h < n; ++h)
                for (int64_t w = 0; w < n; ++w) {
                    uint8_t l = label[at(d, h, w)];
                    if (l == 0) continue;
                    sfield[at(d, h, w)] =
                        static_cast<float>(organ_geom[static_cast<size_t>(l - 1)].s(d, h, w));
                }

        double frac = 0;
        for (uint8_t l : label) frac += (l != 0);
        frac /= static_cast<double>(V);
        if (frac < spec.organ_frac_lo || frac > spec.organ_frac_hi) continue;

        // --- lesions: carved strictly inside a host organ ---
        bool tumors_ok = true;
        for (int64_t t : tumor_classes) {
            bool done = false;
            for (int tries = 0; tries < 200 && !done; ++tries) {
                int64_t k = rng.uniform_int(1, spec.n_organs);
                // candidate centers: well inside the host (radial value <= 0.5)
                std::vector<int64_t> core;
                for (int64_t v = 0; v < V; ++v) {
                    if (label[v] == k && sfield[v] <= 0.5f) core.push_back(v);
                }
                if (core.size() < 8) continue;
                int64_t cv = core[static_cast<size_t>(
                    rng.uniform_int(0, static_cast<int64_t>(core.size()) - 1))];
                Superellipsoid e;
                e.cz = static_cast<double>(cv / (n * n));
                e.cy = static_cast<double>((cv / n) % n);
                e.cx = static_cast<double>(cv % n);
                e.ax = rng.uniform(2.2, 4.5) * scale;
                e.ay = rng.uniform(2.2, 4.5) * scale;
                e.az = rng.uniform(2.2, 4.5) * scale;
                e.p = rng.uniform(1.8, 3.0);
                std::vector<int64_t> vox;
                int64_t d0 = std::max<int64_t>(0, static_cast<int64_t>(e.cz - e.az));
                int64_t d1 = std::min(n - 1, static_cast<int64_t>(e.cz + e.az) + 1);
                int64_t h0 = std::max<int64_t>(0, static_cast<int64_t>(e.cy - e.ay));
                int64_t h1 = std::min(n - 1, static_cast<int64_t>(e.cy + e.ay) + 1);
                int64_t w0 = std::max<int64_t>(0, static_cast<int64_t>(e.cx - e.ax));
                int64_t w1 = std::min(n - 1, static_cast<int64_t>(e.cx + e.ax) + 1);
                for (int64_t d = d0; d <= d1; ++d)
                    for (int64_t h = h0; h <= h1; ++h)
                        for (int64_t w = w0; w <= w1; ++w) {
                            // carving keeps the lesion a subset of host voxels
                            if (e.s(d, h, w) <= 1.0 && label[at(d, h, w)] == k) {
                                vox.push_back(at(d, h, w));
                            }
                        }
                if (static_cast<int64_t>(vox.size()) < 8) continue;
                for (int64_t v : vox) {
                    label[v] = static_cast<uint8_t>(t);
                    tfield[v] = static_cast<float>(
                        e.s(v / (n * n), (v / n) % n, v % n));
                }
                host[static_cast<size_t>(t)] = k;
                done = true;
            }
            if (!done) {
                tumors_ok = false;
                break;
            }
        }
        if (!tumors_ok) continue;
        placed = true;
    }
    if (!placed) {
        throw DataError("generate_volume: could not satisfy the placement spec (seed " +
                        std::to_string(seed) + ")");
    }

    if (info) {
        info->organ_label = label;
        // lesion voxels report their host in the pre-carve view
        for (int64_t v = 0; v < V; ++v) {
            uint8_t l = label[static_cast<size_t>(v)];
            if (l >= spec.first_tumor()) {
                info->organ_label[static_cast<size_t>(v)] =
                    static_cast<uint8_t>(host[static_cast<size_t>(l)]);
            }
        }
        info->host = host;
    }

    // --- intensity synthesis ---
    VolumeSample s;
    s.dim = n;
    s.classes = spec.class_names();
    s.labeled_classes = labeled_classes;
    std::sort(s.labeled_classes.begin(), s.labeled_classes.end());
    s.label = label;
    s.image = Tensor::zeros({n, n, n}, Dtype::F32);
    for (int64_t v = 0; v < V; ++v) {
        uint8_t l = label[static_cast<size_t>(v)];
        double base;
        if (l == 0) {
            base = kBackgroundLevel;
        } else if (l < spec.first_tumor()) {
            base = organ_level(l - 1) * (1.0 - 0.25 * sfield[static_cast<size_t>(v)]);
        } else {
            int64_t hk = host[static_cast<size_t>(l)];
            LesionSignature sig = lesion_signature(l - spec.first_tumor());
            base = organ_level(hk - 1) * (1.0 - 0.25 * sfield[static_cast<size_t>(v)]) +
                   sig.offset + rng.normal() * sig.sigma;
        }
        base += rng.normal() * kGlobalNoise;
        s.image.set(v, std::clamp(base, 0.0, 1.0));
    }
    return s;
}

void write_volume(const std::string& path, const VolumeSample& s) {
    if (!s.image.defined() || s.image.ndim() != 3 || s.image.dim(0) != s.dim ||
        s.image.dim(1) != s.dim || s.image.dim(2) != s.dim ||
        static_cast<int64_t>(s.label.size()) != s.voxels()) {
        throw ContractError("write_volume: inconsistent sample");
    }
    nlohmann::json header = {{"dims", {s.dim, s.dim, s.dim}},
                             {"classes", s.classes},
                             {"labeled_classes", s.labeled_classes}};
    std::string payload = io::f32_blob(s.image);
    payload.append(reinterpret_cast<const char*>(s.label.data()), s.label.size());
    io::write_record(path, "DSMV", 1, header, payload);
}

VolumeSample read_volume(const std::string& path) {
    io::Record rec = io::read_record(path, "DSMV", 1);
    VolumeSample s;
    try {
        auto dims = rec.header.at("dims").get<std::vector<int64_t>>();
        if (dims.size() != 3 || dims[0] != dims[1] || dims[1] != dims[2] || dims[0] < 1) {
            throw DataError(path + ": expected cubic dims");
        }
        s.dim = dims[0];
        s.classes = rec.header.at("classes").get<std::vector<std::string>>();
        s.labeled_classes = rec.header.at("labeled_classes").get<std::vector<int64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": invalid volume header: " + e.what());
    }
    int64_t V = s.voxels();
    if (static_cast<int64_t>(rec.payload.size()) != 5 * V) {
        throw DataError(path + ": payload length does not match dims");
    }
    size_t off = 0;
    s.image = io::f32_unblob(rec.payload, off, {s.dim, s.dim, s.dim}, Dtype::F32, path);
    s.label.resize(static_cast<size_t>(V));
    std::memcpy(s.label.data(), rec.payload.data() + off, static_cast<size_t>(V));
    int64_t n_classes = static_cast<int64_t>(s.classes.size());
    for (uint8_t l : s.label) {
        if (l >= n_classes) throw DataError(path + ": label index out of range");
    }
    for (int64_t c : s.labeled_classes) {
        if (c < 0 || c >= n_classes) throw DataError(path + ": labeled class out of range");
    }
    if (!s.image.all_finite()) throw DataError(path + ": non-finite image values");
    return s;
}

std::vector<std::string> Manifest::paths(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& e : entries) {
        if (e.split == split) out.push_back((fs::path(root) / e.file).string());
    }
    return out;
}

Manifest generate_dataset(const GeneratorSpec& spec, const std::string& out_dir, uint64_t seed,
                          int64_t n_train, int64_t n_test, int64_t unseen_class) {
    spec.validate();
    if (n_train < 2 || n_test < 2) throw ContractError("generate_dataset: need >= 2 train/test");
    if (unseen_class < spec.first_tumor() || unseen_class >= spec.n_classes()) {
        throw DataError("generate_dataset: unseen class must be a lesion class");
    }
    std::vector<int64_t> seen_tumors;
    for (int64_t t = spec.first_tumor(); t < spec.n_classes(); ++t) {
        if (t != unseen_class) seen_tumors.push_back(t);
    }
    if (seen_tumors.empty()) {
        throw DataError("generate_dataset: no seen lesion class remains");
    }
    fs::create_directories(out_dir);

    Manifest m;
    m.seed = seed;
    m.spec = spec;
    m.classes = spec.class_names();
    m.unseen_class = unseen_class;
    m.root = out_dir;

    struct Plan {
        std::string split;
        std::vector<int64_t> tumors;
        std::vector<int64_t> labeled;
    };
    std::vector<Plan> plans;
    Rng rng(Rng::mix(seed, 0x64617461736574ull)); // salt: "dataset"

    auto draw_labeled = [&](const std::vector<int64_t>& tumors) {
        std::vector<int64_t> lab = {0};
        std::vector<int64_t> organs;
        for (int64_t k = 1; k <= spec.n_organs; ++k) {
            if (rng.bernoulli(spec.label_rate)) organs.push_back(k);
        }
        if (organs.empty()) organs.push_back(rng.uniform_int(1, spec.n_organs));
        lab.insert(lab.end(), organs.begin(), organs.end());
        lab.insert(lab.end(), tumors.begin(), tumors.end());
        return lab;
    };
    // test volumes carry complete annotations so evaluation is exact
    auto full_labels = [&](const std::vector<int64_t>& tumors) {
        std::vector<int64_t> lab;
        for (int64_t k = 0; k <= spec.n_organs; ++k) lab.push_back(k);
        lab.insert(lab.end(), tumors.begin(), tumors.end());
        return lab;
    };
    auto draw_seen = [&]() {
        std::vector<int64_t> t;
        t.push_back(seen_tumors[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(seen_tumors.size()) - 1))]);
        // sometimes a second distinct seen lesion
        if (seen_tumors.size() > 1 && rng.bernoulli(0.35)) {
            int64_t extra = seen_tumors[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(seen_tumors.size()) - 1))];
            if (extra != t[0]) t.push_back(extra);
        }
        std::sort(t.begin(), t.end());
        return t;
    };

    int64_t n_train1 = n_train / 2;
    for (int64_t i = 0; i < n_train1; ++i) plans.push_back({"train1", {}, draw_labeled({})});
    for (int64_t i = n_train1; i < n_train; ++i) {
        auto t = draw_seen();
        plans.push_back({"train2", t, draw_labeled(t)});
    }
    int64_t n_test_seen = n_test / 2;
    for (int64_t i = 0; i < n_test_seen; ++i) {
        auto t = draw_seen();
        plans.push_back({"test_seen", t, full_labels(t)});
    }
    for (int64_t i = n_test_seen; i < n_test; ++i) {
        std::vector<int64_t> t = {unseen_class};
        plans.push_back({"test_unseen", t, full_labels(t)});
    }

    // guarantee every organ class is labeled in at least 30% of samples
    for (int64_t k = 1; k <= spec.n_organs; ++k) {
        int64_t need = (3 * static_cast<int64_t>(plans.size()) + 9) / 10; // ceil(0.3 n)
        int64_t have = 0;
        for (const auto& p : plans) {
            have += std::count(p.labeled.begin(), p.labeled.end(), k) > 0;
        }
        for (size_t i = 0; i < plans.size() && have < need; ++i) {
            auto& lab = plans[i].labeled;
            if (std::find(lab.begin(), lab.end(), k) == lab.end()) {
                lab.push_back(k);
                ++have;
            }
        }
    }

    for (size_t i = 0; i < plans.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "vol_%04zu.dsmvol", i);
        VolumeSample s = generate_volume(spec, plans[i].tumors, plans[i].labeled,
                                         Rng::mix(seed, static_cast<uint64_t>(i)));
        write_volume((fs::path(out_dir) / name).string(), s);
        m.entries.push_back({name, plans[i].split});
    }
    save_manifest((fs::path(out_dir) / "manifest.json").string(), m);
    return m;
}

void save_manifest(const std::string& path, const Manifest& m) {
    nlohmann::json j = {
        {"seed", m.seed},
        {"unseen_class", m.unseen_class},
        {"classes", m.classes},
        {"spec",
         {{"dim", m.spec.dim},
          {"n_organs", m.spec.n_organs},
          {"n_seen_tumors", m.spec.n_seen_tumors},
          {"n_unseen_tumors", m.spec.n_unseen_tumors},
          {"organ_frac_lo", m.spec.organ_frac_lo},
          {"organ_frac_hi", m.spec.organ_frac_hi},
          {"label_rate", m.spec.label_rate}}},
        {"entries", nlohmann::json::array()},
    };
    for (const auto& e : m.entries) {
        j["entries"].push_back({{"file", e.file}, {"split", e.split}});
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("save_manifest: cannot open " + path);
    f << j.dump(2) << "\n";
}

Manifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("load_manifest: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
        Manifest m;
        m.seed = j.at("seed").get<uint64_t>();
        m.unseen_class = j.at("unseen_class").get<int64_t>();
        m.classes = j.at("classes").get<std::vector<std::string>>();
        const auto& sp = j.at("spec");
        m.spec.dim = sp.at("dim").get<int64_t>();
        m.spec.n_organs = sp.at("n_organs").get<int64_t>();
        m.spec.n_seen_tumors = sp.at("n_seen_tumors").get<int64_t>();
        m.spec.n_unseen_tumors = sp.at("n_unseen_tumors").get<int64_t>();
        m.spec.organ_frac_lo = sp.at("organ_frac_lo").get<double>();
        m.spec.organ_frac_hi = sp.at("organ_frac_hi").get<double>();
        m.spec.label_rate = sp.at("label_rate").get<double>();
        for (const auto& e : j.at("entries")) {
            m.entries.push_back(
                {e.at("file").get<std::string>(), e.at("split").get<std::string>()});
        }
        m.root = fs::path(path).parent_path().string();
        m.spec.validate();
        for (const auto& e : m.entries) {
            if (e.split != "train1" && e.split != "train2" && e.split != "test_seen" &&
                e.split != "test_unseen") {
                throw DataError(path + ": unknown split " + e.split);
            }
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": invalid manifest: " + e.what());
    }
}

} // namespace dsm::data
