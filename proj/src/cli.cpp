#include "dsm/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include <CLI11.hpp>

#include "dsm/align.hpp"
#include "dsm/config.hpp"
#include "dsm/data.hpp"
#include "dsm/gradsuite.hpp"
#include "dsm/model.hpp"
#include "dsm/train.hpp"

#ifndef DSM_GIT_DESCRIBE
#define DSM_GIT_DESCRIBE "unknown"
#endif

namespace dsm::cli {

namespace {

namespace fs = std::filesystem;

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

data::Manifest manifest_at(const std::string& data_dir) {
    return data::load_manifest((fs::path(data_dir) / "manifest.json").string());
}

config::RunConfig make_run_config(const std::string& config_file,
                                  const std::vector<std::string>& overrides) {
    config::RunConfig rc;
    if (!config_file.empty()) rc = config::load_config(config_file);
    for (const auto& kv : overrides) {
        auto [key, value] = config::parse_override(kv);
        rc.set(key, value);
    }
    return rc;
}

// Model rebuilt from a checkpoint's configuration echo; init is re-run with
// the recorded seed so parameters absent from the checkpoint (e.g. the tumor
// path of a stage-1 run) land exactly where training left them.
struct LoadedModel {
    config::RunConfig rc;
    int stage = 1;
    model::DsmModel m;
};

LoadedModel load_model(const std::string& ckpt_path) {
    train::LoadedCheckpoint ck = train::load_checkpoint(ckpt_path);
    if (!ck.meta.config.is_object() || ck.meta.config.empty()) {
        throw DataError("checkpoint carries no configuration echo: " + ckpt_path);
    }
    config::RunConfig rc;
    rc.apply(ck.meta.config);
    if (rc.organ_queries <= 0 || rc.tumor_queries <= 0) {
        throw DataError("checkpoint configuration lacks resolved query counts: " + ckpt_path);
    }
    model::ModelConfig cfg = rc.model;
    cfg.n_organ_queries = rc.organ_queries;
    cfg.n_tumor_queries = rc.tumor_queries;
    cfg.validate();
    Rng rng(rc.seed);
    LoadedModel lm{rc, ck.meta.stage, model::DsmModel::init(rng, cfg)};
    ParamMap params;
    lm.m.collect_all(params);
    train::warm_start(ck, params);
    return lm;
}

// ---- gen-data ----

struct GenArgs {
    std::string out;
    uint64_t seed = 7;
    int64_t dim = 32;
    int64_t n_train = 64;
    int64_t n_test = 16;
    int64_t n_organs = 4;
    int64_t n_seen = 2;
    int64_t n_unseen = 1;
    double label_rate = 0.7;
    int64_t unseen_class = -1; // -1: first unseen lesion class
};

int cmd_gen_data(const GenArgs& a) {
    data::GeneratorSpec spec;
    spec.dim = a.dim;
    spec.n_organs = a.n_organs;
    spec.n_seen_tumors = a.n_seen;
    spec.n_unseen_tumors = a.n_unseen;
    spec.label_rate = a.label_rate;
    int64_t unseen = a.unseen_class >= 0 ? a.unseen_class
                                         : spec.first_tumor() + spec.n_seen_tumors;
    data::Manifest man = data::generate_dataset(spec, a.out, a.seed, a.n_train, a.n_test,
                                                unseen);
    nlohmann::json summary = {
        {"out", a.out},
        {"seed", a.seed},
        {"volumes", man.entries.size()},
        {"classes", man.classes},
        {"unseen_class", man.unseen_class},
    };
    std::cout << summary.dump(2) << "\n";
    return 0;
}

// ---- train ----

struct TrainArgs {
    int stage = 1;
    std::string data;
    std::string out;
    std::string config_file;
    std::vector<std::string> overrides;
    std::string init;
    std::string resume;
};

int cmd_train(const TrainArgs& a) {
    if (a.stage == 2 && a.init.empty() && a.resume.empty()) {
        throw UsageError("train --stage 2 needs --init STAGE1_CKPT (or --resume)");
    }
    config::RunConfig rc = make_run_config(a.config_file, a.overrides);
    data::Manifest man = manifest_at(a.data);
    model::ModelConfig cfg = rc.materialize(man);
    // bake the resolved query counts into the echo so checkpoints rebuild
    // without the dataset at hand
    rc.organ_queries = cfg.n_organ_queries;
    rc.tumor_queries = cfg.n_tumor_queries;

    Rng rng(rc.seed);
    model::DsmModel m = model::DsmModel::init(rng, cfg);
    if (!a.init.empty()) {
        ParamMap params;
        m.collect_all(params);
        train::warm_start(train::load_checkpoint(a.init), params);
    }
    align::TextBank bank = train::seen_class_bank(
        man, cfg.n_organ_queries + cfg.n_tumor_queries, cfg.text_dim, rc.seed);

    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "config.json",
               {{"command", "train"},
                {"stage", a.stage},
                {"data", a.data},
                {"out", a.out},
                {"seed", rc.seed},
                {"version", DSM_GIT_DESCRIBE},
                {"config", rc.to_json()}});
    align::save_text_bank((fs::path(a.out) / "text_bank.dsmtxt").string(), bank);

    train::TrainConfig tc = rc.train_config(a.stage);
    train::TrainResult res = train::train_stage(m, a.stage, man, bank, tc, a.out, a.resume);

    nlohmann::json metrics = train::evaluate(m, man, a.stage).to_json();
    metrics["best"] = res.best;
    metrics["best_checkpoint"] = res.best_path;
    metrics["last_checkpoint"] = res.last_path;
    metrics["log"] = res.log;
    write_json(fs::path(a.out) / "metrics.json", metrics);
    std::cout << metrics.dump(2) << "\n";
    return 0;
}

// ---- eval ----

struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string split; // empty: pooled test splits
    std::string report;
};

int cmd_eval(const EvalArgs& a) {
    data::Manifest man = manifest_at(a.data);
    LoadedModel lm = load_model(a.ckpt);
    train::EvalReport rep = a.split.empty()
                                ? train::evaluate(lm.m, man, lm.stage)
                                : train::evaluate_split(lm.m, man, lm.stage, a.split);
    nlohmann::json j = rep.to_json();
    j["checkpoint"] = a.ckpt;
    j["stage"] = lm.stage;
    j["split"] = a.split.empty() ? "test" : a.split;
    std::cout << j.dump(2) << "\n";
    if (!a.report.empty()) write_json(a.report, j);
    return 0;
}

// ---- infer ----

struct InferArgs {
    std::string ckpt;
    std::string input;
    std::string output;
    std::string export_anomaly;
    std::string text_bank;
};

int cmd_infer(const InferArgs& a) {
    LoadedModel lm = load_model(a.ckpt);
    if (lm.stage != 2 && !a.export_anomaly.empty()) {
        throw UsageError("--export-anomaly needs a stage-2 checkpoint");
    }
    data::VolumeSample s = data::read_volume(a.input);
    if (s.dim % 8 != 0) {
        throw DataError("infer: volume extent must be divisible by 8, got " +
                        std::to_string(s.dim));
    }
    Tensor vol = s.image.view({1, s.dim, s.dim, s.dim});

    Tensor masks;
    Tensor ood;
    nlohmann::json class_probs;
    if (lm.stage == 1) {
        masks = lm.m.stage1_forward(vol).masks;
    } else {
        align::TextBank bank;
        const align::TextBank* bp = nullptr;
        if (!a.text_bank.empty()) {
            bank = align::load_text_bank(a.text_bank);
            bp = &bank;
        }
        model::DsmModel::Stage2Out out = lm.m.stage2_forward(vol, bp);
        masks = out.masks;
        ood = out.ood;
        if (bp) {
            for (int64_t q = 0; q < out.p.dim(0); ++q) {
                int64_t best = 0;
                for (int64_t c = 1; c < out.p.dim(1); ++c) {
                    if (out.p.at(q * out.p.dim(1) + c) > out.p.at(q * out.p.dim(1) + best)) {
                        best = c;
                    }
                }
                class_probs.push_back({{"query", q},
                                       {"class", bank.names[static_cast<size_t>(best)]},
                                       {"prob", out.p.at(q * out.p.dim(1) + best)}});
            }
        }
    }

    // label map: per-voxel argmax over query masks (ties keep the lowest row)
    int64_t K = masks.dim(0);
    int64_t V = masks.dim(1);
    data::VolumeSample pred;
    pred.dim = s.dim;
    pred.image = s.image;
    pred.label.assign(static_cast<size_t>(V), 0);
    const float* md = masks.cdata<float>();
    for (int64_t v = 0; v < V; ++v) {
        int64_t best = 0;
        float bv = md[v];
        for (int64_t k = 1; k < K; ++k) {
            float x = md[k * V + v];
            if (x > bv) {
                bv = x;
                best = k;
            }
        }
        pred.label[static_cast<size_t>(v)] = static_cast<uint8_t>(best);
    }
    if (static_cast<int64_t>(s.classes.size()) >= K) {
        pred.classes = s.classes;
    } else {
        for (int64_t k = 0; k < K; ++k) pred.classes.push_back("query" + std::to_string(k));
    }
    pred.labeled_classes.resize(static_cast<size_t>(K));
    std::iota(pred.labeled_classes.begin(), pred.labeled_classes.end(), 0);
    data::write_volume(a.output, pred);

    if (!a.export_anomaly.empty()) {
        double lo = ood.at(0), hi = ood.at(0);
        for (int64_t v = 1; v < V; ++v) {
            lo = std::min(lo, ood.at(v));
            hi = std::max(hi, ood.at(v));
        }
        double span = hi > lo ? hi - lo : 1.0;
        data::VolumeSample an;
        an.dim = s.dim;
        an.image = Tensor::zeros({s.dim, s.dim, s.dim}, Dtype::F32);
        float* img = an.image.data<float>();
        for (int64_t v = 0; v < V; ++v) {
            img[v] = static_cast<float>((ood.at(v) - lo) / span);
        }
        an.label.assign(static_cast<size_t>(V), 0);
        an.classes = {"background"};
        data::write_volume(a.export_anomaly, an);
    }

    nlohmann::json summary = {{"output", a.output}, {"stage", lm.stage}, {"queries", K}};
    if (!class_probs.is_null()) summary["classified"] = class_probs;
    if (!a.export_anomaly.empty()) summary["anomaly"] = a.export_anomaly;
    std::cout << summary.dump(2) << "\n";
    return 0;
}

// ---- gradcheck ----

int cmd_gradcheck(const std::string& op, uint64_t seed, bool list_only) {
    if (list_only) {
        for (const auto& c : gradsuite::all_cases()) std::cout << c.name << "\n";
        return 0;
    }
    std::vector<const gradsuite::Case*> todo;
    if (!op.empty()) {
        const gradsuite::Case* c = gradsuite::find_case(op);
        if (!c) throw UsageError("unknown gradcheck case '" + op + "' (try --list)");
        todo.push_back(c);
    } else {
        for (const auto& c : gradsuite::all_cases()) todo.push_back(&c);
    }
    int failures = 0;
    for (const gradsuite::Case* c : todo) {
        GradcheckReport rep = c->run(seed);
        bool ok = rep.ok(c->tol);
        failures += ok ? 0 : 1;
        char line[160];
        std::snprintf(line, sizeof line, "%-24s max_rel_err %10.3e  tol %7.0e  %s",
                      c->name.c_str(), rep.max_rel_err, c->tol, ok ? "pass" : "FAIL");
        std::cout << line << "\n";
    }
    if (failures > 0) {
        throw NumericError(std::to_string(failures) + " gradient check(s) failed");
    }
    return 0;
}

// ---- ablate ----

struct AblateArgs {
    std::string data;
    std::string out;
    std::string flags = "none,kmmm,kmmm+amvp,kmmm+amvp+dqr,kmmm+amvp+text_align,full";
    std::string config_file;
    std::vector<std::string> overrides;
};

struct Variant {
    std::string name;
    bool kmmm = false, amvp = false, dqr = false, text_align = false;
    bool full() const { return kmmm && amvp && dqr && text_align; }
};

std::string sanitize(std::string name) {
    std::replace(name.begin(), name.end(), '+', '_');
    return name;
}

Variant parse_variant(const std::string& token) {
    Variant v{token};
    if (token == "none") return v;
    if (token == "full") {
        v.kmmm = v.amvp = v.dqr = v.text_align = true;
        return v;
    }
    size_t pos = 0;
    while (pos <= token.size()) {
        size_t plus = token.find('+', pos);
        std::string part = token.substr(pos, plus == std::string::npos ? std::string::npos
                                                                       : plus - pos);
        bool* flag = part == "kmmm"         ? &v.kmmm
                     : part == "amvp"       ? &v.amvp
                     : part == "dqr"        ? &v.dqr
                     : part == "text_align" ? &v.text_align
                                            : nullptr;
        if (!flag) throw UsageError("unknown ablation component '" + part + "' in " + token);
        if (*flag) throw UsageError("duplicate ablation component '" + part + "' in " + token);
        *flag = true;
        if (plus == std::string::npos) break;
        pos = plus + 1;
    }
    return v;
}

std::vector<Variant> parse_variants(const std::string& list) {
    std::vector<Variant> out;
    size_t pos = 0;
    while (pos <= list.size()) {
        size_t comma = list.find(',', pos);
        std::string token = list.substr(pos, comma == std::string::npos ? std::string::npos
                                                                        : comma - pos);
        if (token.empty()) throw UsageError("empty ablation variant in --flags");
        out.push_back(parse_variant(token));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    for (size_t i = 0; i < out.size(); ++i) {
        for (size_t j = i + 1; j < out.size(); ++j) {
            if (out[i].name == out[j].name) {
                throw UsageError("duplicate ablation variant '" + out[i].name + "'");
            }
        }
    }
    if (out.empty() || !out.back().full()) {
        throw UsageError("--flags must end with the full configuration "
                         "(so the headline numbers come from the complete model)");
    }
    return out;
}

int cmd_ablate(const AblateArgs& a) {
    std::vector<Variant> variants = parse_variants(a.flags);
    config::RunConfig base = make_run_config(a.config_file, a.overrides);
    data::Manifest man = manifest_at(a.data);
    fs::create_directories(a.out);

    nlohmann::json rows = nlohmann::json::array();
    std::string table = "variant                    organ_dsc  seen_dsc  unseen_auroc  "
                        "unseen_fpr95\n";
    for (const Variant& v : variants) {
        config::RunConfig rc = base;
        rc.model.use_kmmm = v.kmmm;
        rc.model.use_amvp = v.amvp;
        rc.model.use_dqr = v.dqr;
        rc.model.use_text_align = v.text_align;

        model::ModelConfig cfg = rc.materialize(man);
        rc.organ_queries = cfg.n_organ_queries;
        rc.tumor_queries = cfg.n_tumor_queries;
        Rng rng(rc.seed);
        model::DsmModel m = model::DsmModel::init(rng, cfg);
        align::TextBank bank = train::seen_class_bank(
            man, cfg.n_organ_queries + cfg.n_tumor_queries, cfg.text_dim, rc.seed);

        std::string var_out = (fs::path(a.out) / ("variant_" + sanitize(v.name))).string();
        train::train_stage(m, 1, man, bank, rc.train_config(1), var_out + "/stage1");
        train::train_stage(m, 2, man, bank, rc.train_config(2), var_out + "/stage2");
        train::EvalReport rep = train::evaluate(m, man, 2);

        rows.push_back({{"name", v.name},
                        {"flags",
                         {{"kmmm", v.kmmm},
                          {"amvp", v.amvp},
                          {"dqr", v.dqr},
                          {"text_align", v.text_align}}},
                        {"metrics", rep.to_json()}});
        char line[160];
        std::snprintf(line, sizeof line, "%-26s %9.4f %9.4f %13.4f %13.4f\n", v.name.c_str(),
                      rep.organ_dsc, rep.seen_dsc, rep.unseen_auroc, rep.unseen_fpr95);
        table += line;
        std::cout << line << std::flush;
    }

    write_json(fs::path(a.out) / "ablation.json", rows);
    std::ofstream txt(fs::path(a.out) / "ablation.txt");
    txt << table;
    std::cout << "wrote " << (fs::path(a.out) / "ablation.json").string() << "\n";
    return 0;
}

} // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"diagonal-state-space segmentation workbench"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(DSM_GIT_DESCRIBE));

    GenArgs ga;
    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic volume dataset");
    gen->add_option("--out", ga.out, "output directory")->required();
    gen->add_option("--seed", ga.seed, "generator seed");
    gen->add_option("--dim", ga.dim, "cubic volume extent");
    gen->add_option("--n-train", ga.n_train, "training volumes");
    gen->add_option("--n-test", ga.n_test, "test volumes");
    gen->add_option("--n-organs", ga.n_organs, "organ classes");
    gen->add_option("--n-seen", ga.n_seen, "seen lesion classes");
    gen->add_option("--n-unseen", ga.n_unseen, "held-out lesion classes");
    gen->add_option("--label-rate", ga.label_rate, "chance an organ is labeled per sample");
    gen->add_option("--unseen-class", ga.unseen_class, "held-out class id (-1: first unseen)");

    TrainArgs ta;
    CLI::App* tr = app.add_subcommand("train", "train one stage");
    tr->add_option("--stage", ta.stage, "1: organs, 2: lesions + alignment")->required();
    tr->add_option("--data", ta.data, "dataset directory")->required();
    tr->add_option("--out", ta.out, "run directory")->required();
    tr->add_option("--config", ta.config_file, "JSON config of dotted keys");
    tr->add_option("--set", ta.overrides, "override, key=value (repeatable)");
    tr->add_option("--init", ta.init, "warm-start checkpoint (required for stage 2)");
    tr->add_option("--resume", ta.resume, "continue an interrupted run from this checkpoint");

    EvalArgs ea;
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
    ev->add_option("--data", ea.data, "dataset directory")->required();
    ev->add_option("--split", ea.split, "one split (default: pooled test splits)");
    ev->add_option("--report", ea.report, "also write the report JSON here");

    InferArgs ia;
    CLI::App* in = app.add_subcommand("infer", "segment one volume");
    in->add_option("--ckpt", ia.ckpt, "checkpoint file")->required();
    in->add_option("--input", ia.input, "input volume (.dsmvol)")->required();
    in->add_option("--output", ia.output, "predicted label volume")->required();
    in->add_option("--export-anomaly", ia.export_anomaly, "write the anomaly map here");
    in->add_option("--text-bank", ia.text_bank, "classify queries against this bank");

    std::string gc_op;
    uint64_t gc_seed = 1234;
    bool gc_list = false;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gc->add_option("--op", gc_op, "run a single named case");
    gc->add_option("--seed", gc_seed, "input-generation seed");
    gc->add_flag("--list", gc_list, "list case names and exit");

    AblateArgs aa;
    CLI::App* ab = app.add_subcommand("ablate", "train + evaluate component subsets");
    ab->add_option("--data", aa.data, "dataset directory")->required();
    ab->add_option("--out", aa.out, "output directory")->required();
    ab->add_option("--flags", aa.flags, "comma list of variants; must end with 'full'");
    ab->add_option("--config", aa.config_file, "JSON config of dotted keys");
    ab->add_option("--set", aa.overrides, "override, key=value (repeatable)");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(std::move(reversed));
        if (gen->parsed()) return cmd_gen_data(ga);
        if (tr->parsed()) return cmd_train(ta);
        if (ev->parsed()) return cmd_eval(ea);
        if (in->parsed()) return cmd_infer(ia);
        if (gc->parsed()) return cmd_gradcheck(gc_op, gc_seed, gc_list);
        if (ab->parsed()) return cmd_ablate(aa);
        return 1; // unreachable with require_subcommand(1)
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    }
}

int dispatch(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args);
}

} // namespace dsm::cli
