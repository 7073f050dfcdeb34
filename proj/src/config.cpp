#include "dsm/config.hpp"

#include <fstream>

namespace dsm::config {

namespace {

int64_t as_int(const std::string& key, const nlohmann::json& v) {
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
        throw UsageError("config key '" + key + "' expects an integer");
    }
    return v.get<int64_t>();
}

double as_num(const std::string& key, const nlohmann::json& v) {
    if (!v.is_number()) throw UsageError("config key '" + key + "' expects a number");
    return v.get<double>();
}

bool as_bool(const std::string& key, const nlohmann::json& v) {
    if (!v.is_boolean()) throw UsageError("config key '" + key + "' expects a boolean");
    return v.get<bool>();
}

} // namespace

void RunConfig::set(const std::string& key, const nlohmann::json& v) {
    if (key == "seed") {
        int64_t s = as_int(key, v);
        if (s < 0) throw UsageError("config key 'seed' must be non-negative");
        seed = static_cast<uint64_t>(s);
    } else if (key == "model.patch") {
        model.patch = as_int(key, v);
    } else if (key == "model.widths") {
        if (!v.is_array() || v.size() != 4) {
            throw UsageError("config key 'model.widths' expects an array of 4 integers");
        }
        for (size_t i = 0; i < 4; ++i) model.widths[i] = as_int(key, v[i]);
    } else if (key == "model.embed") {
        model.embed = as_int(key, v);
    } else if (key == "model.guide") {
        model.guide = as_int(key, v);
    } else if (key == "model.n_state") {
        model.n_state = as_int(key, v);
    } else if (key == "model.heads") {
        model.heads = as_int(key, v);
    } else if (key == "model.organ_queries") {
        organ_queries = as_int(key, v);
    } else if (key == "model.tumor_queries") {
        tumor_queries = as_int(key, v);
    } else if (key == "model.text_dim") {
        model.text_dim = as_int(key, v);
    } else if (key == "model.tau") {
        model.tau = as_num(key, v);
    } else if (key == "model.kappa_init") {
        model.kappa_init = as_num(key, v);
    } else if (key == "flags.kmmm") {
        model.use_kmmm = as_bool(key, v);
    } else if (key == "flags.amvp") {
        model.use_amvp = as_bool(key, v);
    } else if (key == "flags.dqr") {
        model.use_dqr = as_bool(key, v);
    } else if (key == "flags.text_align") {
        model.use_text_align = as_bool(key, v);
    } else if (key == "train.epochs1") {
        epochs1 = as_int(key, v);
    } else if (key == "train.epochs2") {
        epochs2 = as_int(key, v);
    } else if (key == "train.lr1") {
        lr1 = as_num(key, v);
    } else if (key == "train.lr2") {
        lr2 = as_num(key, v);
    } else if (key == "train.batch") {
        batch = as_int(key, v);
    } else if (key == "train.weight_decay") {
        weight_decay = as_num(key, v);
    } else if (key == "train.warmup_frac") {
        warmup_frac = as_num(key, v);
    } else if (key == "train.eval_every") {
        eval_every = as_int(key, v);
    } else if (key == "train.augment") {
        augment = as_bool(key, v);
    } else if (key == "train.crop") {
        crop = as_int(key, v);
    } else if (key == "train.stop_after") {
        stop_after = as_int(key, v);
    } else {
        throw UsageError("unknown config key '" + key + "'");
    }
}

void RunConfig::apply(const nlohmann::json& flat) {
    if (!flat.is_object()) throw UsageError("config must be a JSON object of dotted keys");
    for (const auto& [key, value] : flat.items()) set(key, value);
}

nlohmann::json RunConfig::to_json() const {
    return nlohmann::json{
        {"seed", seed},
        {"model.patch", model.patch},
        {"model.widths", model.widths},
        {"model.embed", model.embed},
        {"model.guide", model.guide},
        {"model.n_state", model.n_state},
        {"model.heads", model.heads},
        {"model.organ_queries", organ_queries},
        {"model.tumor_queries", tumor_queries},
        {"model.text_dim", model.text_dim},
        {"model.tau", model.tau},
        {"model.kappa_init", model.kappa_init},
        {"flags.kmmm", model.use_kmmm},
        {"flags.amvp", model.use_amvp},
        {"flags.dqr", model.use_dqr},
        {"flags.text_align", model.use_text_align},
        {"train.epochs1", epochs1},
        {"train.epochs2", epochs2},
        {"train.lr1", lr1},
        {"train.lr2", lr2},
        {"train.batch", batch},
        {"train.weight_decay", weight_decay},
        {"train.warmup_frac", warmup_frac},
        {"train.eval_every", eval_every},
        {"train.augment", augment},
        {"train.crop", crop},
        {"train.stop_after", stop_after},
    };
}

model::ModelConfig RunConfig::materialize(const data::Manifest& man) const {
    model::ModelConfig cfg = model;
    cfg.n_organ_queries = organ_queries > 0 ? organ_queries : man.spec.n_organs + 1;
    cfg.n_tumor_queries = tumor_queries > 0 ? tumor_queries : man.spec.n_seen_tumors;
    cfg.validate();
    return cfg;
}

train::TrainConfig RunConfig::train_config(int stage) const {
    if (stage != 1 && stage != 2) throw UsageError("stage must be 1 or 2");
    train::TrainConfig tc;
    tc.epochs = stage == 1 ? epochs1 : epochs2;
    tc.lr = stage == 1 ? lr1 : lr2;
    tc.batch = batch;
    tc.weight_decay = weight_decay;
    tc.warmup_frac = warmup_frac;
    tc.eval_every = eval_every;
    tc.augment = augment;
    tc.patch = crop;
    tc.seed = seed;
    tc.stop_after = stop_after;
    tc.config_echo = to_json();
    return tc;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed config JSON in " + path + ": " + e.what());
    }
    RunConfig rc;
    rc.apply(j);
    return rc;
}

std::pair<std::string, nlohmann::json> parse_override(const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw UsageError("override must look like key=value: " + kv);
    }
    std::string key = kv.substr(0, eq);
    std::string raw = kv.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded()) value = raw; // bare words become strings
    return {key, value};
}

} // namespace dsm::config
