// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: JSON documents layered as preset <- file <- --set
// overrides, validated against the schema implied by the defaults.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "broadnas/search.hpp"
#include "json.hpp"

namespace broadnas {

/// Schema violation; `path` is the dotted field path ("search.epochs").
class ConfigError : public Error {
public:
    ConfigError(std::string path, const std::string& message);
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

enum class DataSource { Synthetic, Cifar10 };

struct DataConfig {
    DataSource source = DataSource::Synthetic;
    std::string dir;         // CIFAR-10 directory; empty uses the default
    int train_size = 0;      // 0: everything not used for validation
    int val_size = 5000;     // taken from the end of the training images
    int test_size = 0;       // 0: the whole test split
    bool computed_stats = false;
    SyntheticSpec synthetic{};
};

struct BlockCounts {
    int v_s = 2;
    int v_d = 1;
    int k_d = 1;
};

struct RunConfig {
    nlohmann::json effective;  // fully expanded document
    std::uint64_t seed = 0;
    Variant variant = Variant::BNAS;
    BlockCounts blocks{};
    SearchConfig search{};
    DataConfig data{};
};

std::vector<std::string> preset_names();
/// Full document of a named preset. Throws ConfigError for unknown names.
nlohmann::json preset_document(const std::string& name);

/// `config` is a JSON file or a preset name. Files may name a base preset
/// under "preset"; otherwise desk-synthetic is the base.
RunConfig load_run_config(const std::string& config, const std::vector<std::string>& overrides);
RunConfig run_config_from_json(const nlohmann::json& doc);

/// Applies "a.b.c=value"; the value is parsed as JSON, falling back to a
/// string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Writes config.json (effective values) and seed.txt.
void write_run_snapshot(const RunConfig& cfg, const std::filesystem::path& dir);

struct LoadedData {
    SearchData search;
    Dataset test;
};

LoadedData load_data(const RunConfig& cfg);

}  // namespace broadnas
