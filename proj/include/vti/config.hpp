#pragma once

// Flat key=value run configuration: model dimensions, training recipe,
// generation parameters, and synthetic-data parameters. A single registry
// defines every key; parsing rejects unknown keys and malformed values, and
// config_text dumps the resolved state in registry order so every run can
// print a self-describing header. Defaults are the struct initializers.

#include <cstdint>
#include <string>
#include <vector>

#include "vti/model.hpp"
#include "vti/train.hpp"

namespace vti {

struct Config {
    ModelConfig model;  // d_vocab stays 0; it is derived from the vocabulary
    TrainConfig train;

    // generation
    double temperature = 0.7;
    int top_k = 5;
    int variants = 3;
    int rescore_samples = 10;   // prior draws per slot in best-report selection
    int attention_records = 4;  // leading records whose attention maps are exported
    std::uint64_t gen_seed = 2024;

    // synthetic data
    int n = 2000;
    std::uint64_t data_seed = 777;
    int style_count = 3;
    int min_freq = 2;
};

// Every legal key, in the order config_text prints them.
std::vector<std::string> config_keys();

// Sets one key; unknown key or unparsable value is a contract violation.
void apply_config_entry(Config& c, const std::string& key, const std::string& value);

// "key=value" lines over the defaults; '#' starts a comment, blanks skipped.
Config parse_config_text(const std::string& text);

Config load_config(const std::string& path);  // IoError when unreadable

// Resolved "key=value" lines, one per key, registry order; numbers print in
// the shortest form that parses back to the same value.
std::string config_text(const Config& c);

}  // namespace vti
