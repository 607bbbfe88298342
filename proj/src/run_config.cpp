// SPDX-License-Identifier: Apache-2.0

#include "broadnas/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace broadnas {

namespace {

using json = nlohmann::json;

json defaults() {
    return json::parse(R"({
        "preset": "",
        "seed": 1,
        "variant": "BNAS",
        "blocks": {"v_s": 2, "v_d": 1, "k_d": 1},
        "arch": {"u": 2, "c0": 16, "num_classes": 10, "input_shape": [3, 32, 32],
                 "delta_budget": 0, "gap_conv_budget": 0, "gap_enh_budget": 0},
        "search": {"epochs": 150, "batch_size": 128, "lr_max": 0.05, "lr_min": 0.0005, "t_0": 10.0,
                   "t_mul": 2.0, "momentum": 0.9, "weight_decay": 0.0, "grad_clip": 5.0,
                   "controller_episodes": 30, "controller_updates": 1, "derive_candidates": 10,
                   "final_epochs": 630},
        "controller": {"hidden": 64, "lr": 0.0035, "temperature": 1.0, "entropy_weight": 0.0001,
                       "baseline_decay": 0.99},
        "augment": {"pad": 4, "flip": true, "cutout": 16},
        "data": {"source": "cifar10", "dir": "", "train_size": 0, "val_size": 5000, "test_size": 0,
                 "normalize": "cifar10",
                 "synthetic": {"classes": 10, "n": 3000, "side": 16, "noise": 0.35, "jitter": 2, "seed": 11}}
    })");
}

json preset_patch(const std::string& name) {
    if (name == "full-bnas") return json::parse(R"({"variant": "BNAS", "blocks": {"v_s": 2, "v_d": 1, "k_d": 1}})");
    if (name == "full-ccle") return json::parse(R"({"variant": "CCLE", "blocks": {"v_s": 2, "v_d": 1, "k_d": 1}})");
    if (name == "full-cce") return json::parse(R"({"variant": "CCE", "blocks": {"v_s": 2, "v_d": 2, "k_d": 2}})");
    if (name == "desk-synthetic") {
        return json::parse(R"({
            "variant": "BNAS", "blocks": {"v_s": 2, "v_d": 1, "k_d": 1},
            "arch": {"c0": 8, "input_shape": [3, 16, 16]},
            "search": {"epochs": 20, "batch_size": 64, "final_epochs": 10},
            "augment": {"cutout": 8},
            "data": {"source": "synthetic", "train_size": 2000, "val_size": 500, "test_size": 500,
                     "normalize": "computed"}
        })");
    }
    if (name == "desk-cifar-subset") {
        return json::parse(R"({
            "variant": "BNAS", "blocks": {"v_s": 2, "v_d": 1, "k_d": 1},
            "arch": {"c0": 8},
            "search": {"epochs": 10, "batch_size": 64, "final_epochs": 10},
            "data": {"source": "cifar10", "train_size": 2000, "val_size": 500, "test_size": 1000}
        })");
    }
    throw ConfigError("preset", "unknown preset '" + name + "'");
}

std::string type_name(const json& j) {
    if (j.is_boolean()) return "boolean";
    if (j.is_number_integer()) return "integer";
    if (j.is_number()) return "number";
    if (j.is_string()) return "string";
    if (j.is_array()) return "array";
    if (j.is_object()) return "object";
    return "null";
}

void check_schema(const json& doc, const json& schema, const std::string& path) {
    if (schema.is_object()) {
        if (!doc.is_object()) throw ConfigError(path, "expected an object, got " + type_name(doc));
        for (const auto& [key, value] : doc.items()) {
            const std::string p = path.empty() ? key : path + "." + key;
            if (!schema.contains(key)) throw ConfigError(p, "unknown field");
            check_schema(value, schema.at(key), p);
        }
        return;
    }
    if (schema.is_array()) {
        if (!doc.is_array()) throw ConfigError(path, "expected an array, got " + type_name(doc));
        if (doc.size() != schema.size()) {
            throw ConfigError(path, "expected " + std::to_string(schema.size()) + " entries, got " +
                                        std::to_string(doc.size()));
        }
        for (std::size_t i = 0; i < doc.size(); ++i) check_schema(doc[i], schema[i], path + "[" + std::to_string(i) + "]");
        return;
    }
    if (schema.is_number_integer()) {
        if (!doc.is_number_integer()) throw ConfigError(path, "expected an integer, got " + type_name(doc));
        return;
    }
    if (schema.is_number()) {
        if (!doc.is_number()) throw ConfigError(path, "expected a number, got " + type_name(doc));
        return;
    }
    if (schema.is_boolean() && !doc.is_boolean()) throw ConfigError(path, "expected a boolean, got " + type_name(doc));
    if (schema.is_string() && !doc.is_string()) throw ConfigError(path, "expected a string, got " + type_name(doc));
}

template <typename T>
T at(const json& doc, const std::string& dotted) {
    const json* cur = &doc;
    std::istringstream is(dotted);
    std::string part;
    while (std::getline(is, part, '.')) cur = &cur->at(part);
    return cur->get<T>();
}

int int_in(const json& doc, const std::string& path, int lo, int hi) {
    const auto v = at<long long>(doc, path);
    if (v < lo || v > hi) {
        throw ConfigError(path, "value " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + "]");
    }
    return static_cast<int>(v);
}

double positive(const json& doc, const std::string& path, bool allow_zero = false) {
    const auto v = at<double>(doc, path);
    if (!(allow_zero ? v >= 0.0 : v > 0.0)) {
        throw ConfigError(path, "value must be " + std::string(allow_zero ? "non-negative" : "positive"));
    }
    return v;
}

}  // namespace

ConfigError::ConfigError(std::string path, const std::string& message)
    : Error(path + ": " + message), path_(std::move(path)) {}

std::vector<std::string> preset_names() {
    return {"full-bnas", "full-ccle", "full-cce", "desk-synthetic", "desk-cifar-subset"};
}

json preset_document(const std::string& name) {
    json doc = defaults();
    doc.merge_patch(preset_patch(name));
    doc["preset"] = name;
    return doc;
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json* cur = &doc;
    std::istringstream is(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(is, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!cur->is_object() || !cur->contains(parts[i])) throw ConfigError(path, "unknown field");
        cur = &(*cur)[parts[i]];
    }
    *cur = value;
}

RunConfig load_run_config(const std::string& config, const std::vector<std::string>& overrides) {
    json doc;
    const std::filesystem::path path(config);
    if (std::filesystem::exists(path)) {
        std::ifstream in(path);
        json file = json::parse(in, nullptr, false, true);
        if (file.is_discarded()) throw ConfigError("config", "'" + config + "' is not valid JSON");
        if (!file.is_object()) throw ConfigError("config", "top level must be an object");
        const std::string base = file.contains("preset") && file["preset"].is_string() &&
                                         !file["preset"].get<std::string>().empty()
                                     ? file["preset"].get<std::string>()
                                     : "desk-synthetic";
        doc = preset_document(base);
        check_schema(file, doc, "");
        doc.merge_patch(file);
        doc["preset"] = base;
    } else {
        const auto names = preset_names();
        if (std::find(names.begin(), names.end(), config) == names.end()) {
            throw ConfigError("config", "'" + config + "' is neither a file nor a preset name");
        }
        doc = preset_document(config);
    }
    for (const auto& o : overrides) apply_override(doc, o);
    return run_config_from_json(doc);
}

RunConfig run_config_from_json(const json& doc) {
    check_schema(doc, defaults(), "");
    RunConfig rc;
    rc.effective = defaults();
    rc.effective.merge_patch(doc);
    const json& d = rc.effective;

    if (!d.at("seed").is_number_unsigned() && d.at("seed").get<long long>() < 0) {
        throw ConfigError("seed", "must be non-negative");
    }
    rc.seed = d.at("seed").get<std::uint64_t>();
    if (!variant_from_name(d.at("variant").get<std::string>(), rc.variant)) {
        throw ConfigError("variant", "expected BNAS, CCLE or CCE");
    }
    rc.blocks.v_s = int_in(d, "blocks.v_s", 1, 32);
    rc.blocks.v_d = int_in(d, "blocks.v_d", 1, 32);
    rc.blocks.k_d = int_in(d, "blocks.k_d", 0, 32);

    ArchConfig arch;
    arch.variant = rc.variant;
    arch.u = int_in(d, "arch.u", 1, 8);
    arch.c0 = int_in(d, "arch.c0", 1, 1024);
    arch.num_classes = int_in(d, "arch.num_classes", 2, 1000);
    const auto shape = d.at("arch").at("input_shape");
    for (std::size_t i = 0; i < 3; ++i) {
        const long long v = shape[i].get<long long>();
        if (v < 1 || v > 4096) throw ConfigError("arch.input_shape[" + std::to_string(i) + "]", "must lie in [1, 4096]");
        arch.input_shape[i] = static_cast<int>(v);
    }
    arch.delta_budget = int_in(d, "arch.delta_budget", 0, 1 << 20);
    arch.gap_conv_budget = int_in(d, "arch.gap_conv_budget", 0, 1 << 20);
    arch.gap_enh_budget = int_in(d, "arch.gap_enh_budget", 0, 1 << 20);

    SearchConfig& s = rc.search;
    s.epochs = int_in(d, "search.epochs", 1, 100000);
    s.batch_size = int_in(d, "search.batch_size", 2, 100000);
    s.schedule.l_max = positive(d, "search.lr_max");
    s.schedule.l_min = positive(d, "search.lr_min", true);
    if (s.schedule.l_min > s.schedule.l_max) throw ConfigError("search.lr_min", "must not exceed search.lr_max");
    s.schedule.t_0 = positive(d, "search.t_0");
    s.schedule.t_mul = positive(d, "search.t_mul");
    if (s.schedule.t_mul < 1.0) throw ConfigError("search.t_mul", "must be at least 1");
    s.momentum = positive(d, "search.momentum", true);
    if (s.momentum >= 1.0) throw ConfigError("search.momentum", "must be below 1");
    s.weight_decay = positive(d, "search.weight_decay", true);
    s.grad_clip = positive(d, "search.grad_clip", true);
    s.controller_episodes = int_in(d, "search.controller_episodes", 1, 100000);
    s.controller_updates = int_in(d, "search.controller_updates", 1, 100000);
    s.derive_candidates = int_in(d, "search.derive_candidates", 1, 100000);
    s.final_epochs = int_in(d, "search.final_epochs", 0, 100000);

    s.controller.hidden = int_in(d, "controller.hidden", 1, 4096);
    s.controller.adam.lr = positive(d, "controller.lr");
    s.controller.temperature = positive(d, "controller.temperature");
    s.controller.entropy_weight = positive(d, "controller.entropy_weight", true);
    s.controller.baseline_decay = positive(d, "controller.baseline_decay", true);
    if (s.controller.baseline_decay >= 1.0) throw ConfigError("controller.baseline_decay", "must be below 1");

    const int pad = int_in(d, "augment.pad", 0, 64);
    const bool flip = d.at("augment").at("flip").get<bool>();
    s.search_augment = AugmentSpec{true, pad, flip, 0.5, 0};
    s.final_augment = AugmentSpec{true, pad, flip, 0.5, int_in(d, "augment.cutout", 0, 4096)};

    s.search_arch = arch;
    s.search_arch.k = 0;
    s.search_arch.v = rc.blocks.v_s;
    s.derive_arch = arch;
    s.derive_arch.k = rc.blocks.k_d;
    s.derive_arch.v = rc.blocks.v_d;
    for (const auto* a : {&s.search_arch, &s.derive_arch}) {
        try {
            validate_arch(*a);
        } catch (const Error& e) {
            throw ConfigError("arch", e.what());
        }
    }

    DataConfig& dc = rc.data;
    const std::string source = at<std::string>(d, "data.source");
    if (source == "synthetic") {
        dc.source = DataSource::Synthetic;
    } else if (source == "cifar10") {
        dc.source = DataSource::Cifar10;
    } else {
        throw ConfigError("data.source", "expected synthetic or cifar10");
    }
    dc.dir = at<std::string>(d, "data.dir");
    dc.train_size = int_in(d, "data.train_size", 0, 1 << 24);
    dc.val_size = int_in(d, "data.val_size", 1, 1 << 24);
    dc.test_size = int_in(d, "data.test_size", 0, 1 << 24);
    const std::string norm = at<std::string>(d, "data.normalize");
    if (norm != "cifar10" && norm != "computed") throw ConfigError("data.normalize", "expected cifar10 or computed");
    dc.computed_stats = norm == "computed";
    dc.synthetic.classes = int_in(d, "data.synthetic.classes", 2, 1000);
    dc.synthetic.n = int_in(d, "data.synthetic.n", 1, 1 << 24);
    dc.synthetic.side = int_in(d, "data.synthetic.side", 1, 4096);
    dc.synthetic.noise = positive(d, "data.synthetic.noise", true);
    dc.synthetic.jitter = int_in(d, "data.synthetic.jitter", 0, 4096);
    dc.synthetic.seed = at<std::uint64_t>(d, "data.synthetic.seed");

    if (dc.source == DataSource::Synthetic) {
        if (arch.input_shape != std::array<int, 3>{3, dc.synthetic.side, dc.synthetic.side}) {
            throw ConfigError("arch.input_shape", "must be [3, side, side] for synthetic data (side " +
                                                      std::to_string(dc.synthetic.side) + ")");
        }
        if (arch.num_classes != dc.synthetic.classes) {
            throw ConfigError("arch.num_classes", "must equal data.synthetic.classes");
        }
        const long long need = static_cast<long long>(dc.train_size) + dc.val_size + dc.test_size;
        if (need > dc.synthetic.n || (dc.train_size == 0 && need >= dc.synthetic.n)) {
            throw ConfigError("data.synthetic.n", "too small for the requested train/val/test sizes");
        }
    } else {
        if (arch.input_shape != std::array<int, 3>{3, 32, 32}) {
            throw ConfigError("arch.input_shape", "CIFAR-10 images are [3, 32, 32]");
        }
        if (arch.num_classes != 10) throw ConfigError("arch.num_classes", "CIFAR-10 has 10 classes");
        if (dc.val_size >= 50000 || dc.train_size + dc.val_size > 50000) {
            throw ConfigError("data.val_size", "train and validation sizes exceed the 50,000 training images");
        }
    }
    return rc;
}

void write_run_snapshot(const RunConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << cfg.effective.dump(2) << '\n';
    std::ofstream(dir / "seed.txt") << cfg.seed << '\n';
}

LoadedData load_data(const RunConfig& cfg) {
    const DataConfig& dc = cfg.data;
    LoadedData out;
    if (dc.source == DataSource::Synthetic) {
        const Dataset all = synthetic_dataset(dc.synthetic);
        const std::size_t n = all.size();
        const std::size_t test = static_cast<std::size_t>(dc.test_size);
        const std::size_t val = static_cast<std::size_t>(dc.val_size);
        const std::size_t train = dc.train_size > 0 ? static_cast<std::size_t>(dc.train_size) : n - val - test;
        auto [tr, rest] = all.split_at(train, "train", "rest");
        auto [va, rest2] = rest.split_at(val, "val", "rest");
        out.search.train = std::move(tr);
        out.search.val = std::move(va);
        out.test = rest2.split_at(test, "test", "unused").first;
    } else {
        const auto dir = dc.dir.empty() ? default_data_dir() : std::filesystem::path(dc.dir);
        CifarSplits splits = load_cifar10_binary(dir);
        const std::size_t n = splits.train.size();
        const std::size_t val = static_cast<std::size_t>(dc.val_size);
        auto [tr, va] = splits.train.split_at(n - val, "train", "val");
        out.search.val = std::move(va);
        out.search.train = dc.train_size > 0 ? tr.split_at(static_cast<std::size_t>(dc.train_size), "train", "unused").first
                                             : std::move(tr);
        out.test = dc.test_size > 0 ? splits.test.split_at(static_cast<std::size_t>(dc.test_size), "test", "unused").first
                                    : std::move(splits.test);
    }
    out.search.norm = dc.computed_stats ? Normalizer::from_data(out.search.train) : Normalizer::cifar10();
    return out;
}

}  // namespace broadnas
