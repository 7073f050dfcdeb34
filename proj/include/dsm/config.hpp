#pragma once

#include <string>

#include <json.hpp>

#include "dsm/data.hpp"
#include "dsm/model.hpp"
#include "dsm/train.hpp"

// Run configuration shared by every subcommand: a flat map of dotted keys,
// parsed identically whether the values come from a JSON file or from
// command-line overrides. Unknown keys are usage errors so typos cannot
// silently fall back to defaults.
namespace dsm::config {

struct RunConfig {
    uint64_t seed = 1;
    model::ModelConfig model; // model.* and flags.* keys
    // stage-specific training budgets
    int64_t epochs1 = 30;
    int64_t epochs2 = 20;
    double lr1 = 1e-3;
    double lr2 = 4e-4;
    int64_t batch = 2;
    double weight_decay = 1e-5;
    double warmup_frac = 0.1;
    int64_t eval_every = 5;
    bool augment = true;
    int64_t crop = 0;       // training crop extent; 0 trains on whole volumes
    int64_t stop_after = 0; // pause after N epochs (0: run to completion)

    // In config files the query counts may be 0, meaning "match the dataset".
    int64_t organ_queries = 0;
    int64_t tumor_queries = 0;

    // Applies one dotted key. Throws UsageError for unknown keys or
    // mistyped values.
    void set(const std::string& key, const nlohmann::json& value);
    // Applies every key of a flat JSON object.
    void apply(const nlohmann::json& flat);
    // The full effective configuration as a flat JSON object (every key).
    nlohmann::json to_json() const;

    // Resolves the model configuration against a dataset: query counts of 0
    // become background+organs / seen lesions.
    model::ModelConfig materialize(const data::Manifest& man) const;
    // Train settings for one stage; the echo is stored into checkpoints.
    train::TrainConfig train_config(int stage) const;
};

// Parses a JSON config file (flat object). DataError on unreadable or
// malformed files, UsageError on unknown keys.
RunConfig load_config(const std::string& path);

// Parses a "key=value" command-line override; values use JSON syntax with a
// bare-word fallback to strings.
std::pair<std::string, nlohmann::json> parse_override(const std::string& kv);

} // namespace dsm::config
