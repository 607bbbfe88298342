// SPDX-License-Identifier: Apache-2.0

#include "broadnas/cli_app.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "broadnas/bytes.hpp"
#include "broadnas/run_config.hpp"

namespace broadnas {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct Options {
    std::string command;
    std::string config;
    std::vector<std::string> sets;
    fs::path out;
    fs::path checkpoint;
    fs::path genotype;
    bool resume = false;
};

std::string fmt(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

Genotype read_genotype(const fs::path& path) {
    try {
        return parse_genotype(read_text(path));
    } catch (const ParseError& e) {
        throw Error(path.string() + ":" + std::to_string(e.line()) + ":" + std::to_string(e.column()) + ": " +
                    e.what());
    }
}

RunConfig require_config(const Options& o) {
    if (o.config.empty()) throw ConfigError("config", "--config is required for '" + o.command + "'");
    return load_run_config(o.config, o.sets);
}

const fs::path& require_path(const fs::path& p, const std::string& flag, const std::string& command) {
    if (p.empty()) throw Error("'" + command + "' needs " + flag);
    if (!fs::exists(p)) throw Error(flag + " " + p.string() + " does not exist");
    return p;
}

void cmd_search(const Options& o, std::ostream& out) {
    const RunConfig rc = require_config(o);
    write_run_snapshot(rc, o.out);
    const LoadedData data = load_data(rc);
    SearchOptions so;
    so.out_dir = o.out;
    if (o.resume) so.resume_from = o.checkpoint.empty() ? o.out / "search.ckpt" : o.checkpoint;
    if (!so.resume_from.empty()) require_path(so.resume_from, "--checkpoint", "search --resume");
    const SearchResult res = run_search(rc.search, data.search, rc.seed, so);
    const SearchRecord& last = res.log.back();
    const Genotype best = decode_tokens(tokens_from_string(last.best_genotype), rc.search.controller.grammar);
    write_text(o.out / "best.genotype", serialize_genotype(best));
    out << "epochs " << res.log.size() << " mean_reward " << fmt(last.mean_reward) << " best_reward "
        << fmt(last.best_reward) << '\n';
}

void cmd_derive(const Options& o, std::ostream& out) {
    const RunConfig rc = require_config(o);
    write_run_snapshot(rc, o.out);
    const fs::path ckpt = o.checkpoint.empty() ? o.out / "search.ckpt" : o.checkpoint;
    require_path(ckpt, "--checkpoint", "derive");
    const SearchResult st = load_search_checkpoint(ckpt);
    const LoadedData data = load_data(rc);
    const auto ranked = derive(st.controller, st.store, data.search, rc.search, rc.seed, rc.search.derive_candidates);
    json j;
    j["candidates"] = json::array();
    for (std::size_t i = 0; i < ranked.size(); ++i) {
        j["candidates"].push_back({{"rank", i + 1},
                                   {"score", ranked[i].score},
                                   {"tokens", tokens_to_string(ranked[i].tokens)},
                                   {"genotype", serialize_genotype(ranked[i].genotype)}});
    }
    write_text(o.out / "derive.json", j.dump(2) + "\n");
    write_text(o.out / "derived.genotype", serialize_genotype(ranked.front().genotype));
    out << "best score " << fmt(ranked.front().score) << '\n';
}

void cmd_train_into(const RunConfig& rc, const Genotype& g, const fs::path& dir, std::ostream& out) {
    write_run_snapshot(rc, dir);
    const LoadedData data = load_data(rc);
    FinalResult res = final_train(g, rc.search, data.search, data.test, rc.seed, rc.search.final_epochs);
    json m;
    m["v_d"] = rc.blocks.v_d;
    m["k_d"] = rc.blocks.k_d;
    m["epochs"] = rc.search.final_epochs;
    m["epoch_loss"] = res.epoch_loss;
    m["train_accuracy"] = res.train_accuracy;
    m["test_accuracy"] = res.test_accuracy;
    m["test_size"] = data.test.size();
    m["parameters"] = res.parameters;
    write_text(dir / "metrics.json", m.dump(2) + "\n");
    res.store.set_section("genotype", serialize_genotype(g));
    res.store.set_section("config", rc.effective.dump());
    save_checkpoint(res.store, dir / "model.ckpt");
    out << "train_accuracy " << fmt(res.train_accuracy) << " test_accuracy " << fmt(res.test_accuracy)
        << " parameters " << res.parameters << '\n';
}

void cmd_train(const Options& o, std::ostream& out) {
    const RunConfig rc = require_config(o);
    const Genotype g = read_genotype(require_path(o.genotype, "--genotype", "train"));
    cmd_train_into(rc, g, o.out, out);
}

void cmd_eval(const Options& o, std::ostream& out) {
    const fs::path ckpt = o.checkpoint.empty() ? o.out / "model.ckpt" : o.checkpoint;
    require_path(ckpt, "--checkpoint", "eval");
    const WeightStore store = load_checkpoint(ckpt);
    const std::string* gtext = store.section("genotype");
    const std::string* ctext = store.section("config");
    if (gtext == nullptr || ctext == nullptr) {
        throw CheckpointError(ckpt.string() + ": not a model checkpoint (missing genotype or config)");
    }
    const RunConfig trained = run_config_from_json(json::parse(*ctext));
    const RunConfig rc = o.config.empty() ? trained : load_run_config(o.config, o.sets);
    write_run_snapshot(rc, o.out);
    const Genotype g = parse_genotype(*gtext);
    const ArchConfig& arch = trained.search.derive_arch;
    const ComputeGraph graph = build_graph(g, arch);
    for (const auto& key : graph_weight_keys(graph)) {
        if (!store.contains(key)) throw CheckpointError(ckpt.string() + ": missing weight '" + key + "'");
    }
    const LoadedData data = load_data(rc);
    auto all = [](std::size_t n) {
        std::vector<std::size_t> v(n);
        std::iota(v.begin(), v.end(), std::size_t{0});
        return v;
    };
    json j;
    j["genotype"] = *gtext;
    j["parameters"] = count_parameters(graph);
    const int bs = rc.search.batch_size;
    j["val_accuracy"] = evaluate_accuracy(store, arch, g, data.search.val, all(data.search.val.size()),
                                          data.search.norm, bs, BnMode::Inference);
    j["test_size"] = data.test.size();
    j["test_accuracy"] = data.test.size() == 0 ? 0.0
                                               : evaluate_accuracy(store, arch, g, data.test, all(data.test.size()),
                                                                   data.search.norm, bs, BnMode::Inference);
    write_text(o.out / "eval.json", j.dump(2) + "\n");
    out << "test_accuracy " << fmt(j["test_accuracy"].get<double>()) << '\n';
}

void cmd_compile(const Options& o, std::ostream& out) {
    const RunConfig rc = require_config(o);
    write_run_snapshot(rc, o.out);
    Genotype g;
    std::string source;
    if (!o.genotype.empty()) {
        g = read_genotype(require_path(o.genotype, "--genotype", "compile"));
        source = "file";
    } else {
        std::mt19937_64 rng(substream_seed(rc.seed, "compile"));
        g = random_genotype(rng);
        source = "random";
    }
    const ComputeGraph search_graph = build_graph(g, rc.search.search_arch);
    const ComputeGraph graph = build_graph(g, rc.search.derive_arch);
    write_text(o.out / "graph.txt", dump_graph(graph));
    json j;
    j["variant"] = variant_name(rc.variant);
    j["v_s"] = rc.blocks.v_s;
    j["v_d"] = rc.blocks.v_d;
    j["k_d"] = rc.blocks.k_d;
    j["genotype_source"] = source;
    j["genotype"] = serialize_genotype(g);
    j["search_parameters"] = count_parameters(search_graph);
    j["derive_parameters"] = count_parameters(graph);
    j["derive_layers"] = graph.layers.size();
    write_text(o.out / "compile.json", j.dump(2) + "\n");
    out << variant_name(rc.variant) << " (v_s, v_d, k_d) = (" << rc.blocks.v_s << ", " << rc.blocks.v_d << ", "
        << rc.blocks.k_d << ")\n";
    out << "parameters search " << count_parameters(search_graph) << " derived " << count_parameters(graph) << '\n';
}

void cmd_grid(const Options& o, std::ostream& out) {
    require_config(o);
    const Genotype g = read_genotype(require_path(o.genotype, "--genotype", "grid"));
    fs::create_directories(o.out);
    std::ostringstream csv;
    csv << "v_d,k_d,parameters,train_accuracy,test_accuracy,run_dir\n";
    for (int vd = 1; vd <= 3; ++vd) {
        for (int kd = 0; kd <= 2; ++kd) {
            auto sets = o.sets;
            sets.push_back("blocks.v_d=" + std::to_string(vd));
            sets.push_back("blocks.k_d=" + std::to_string(kd));
            const RunConfig rc = load_run_config(o.config, sets);
            const std::string name = "vd" + std::to_string(vd) + "_kd" + std::to_string(kd);
            std::ostringstream line;
            cmd_train_into(rc, g, o.out / name, line);
            const json m = json::parse(read_text(o.out / name / "metrics.json"));
            csv << vd << ',' << kd << ',' << m["parameters"].get<std::size_t>() << ','
                << fmt(m["train_accuracy"].get<double>()) << ',' << fmt(m["test_accuracy"].get<double>()) << ','
                << name << '\n';
            out << name << ' ' << line.str();
        }
    }
    write_text(o.out / "grid.csv", csv.str());
}

void cmd_report(const Options& o, std::ostream& out) {
    write_report(o.out);
    out << read_text(o.out / "report.txt");
}

void write_diagnostics(const fs::path& dir, const std::string& command, const std::string& type,
                       const std::string& message) {
    if (dir.empty()) return;
    std::error_code ec;
    fs::create_directories(dir, ec);
    json j{{"command", command}, {"error", type}, {"message", message}};
    std::ofstream(dir / "diagnostics.json") << j.dump(2) << '\n';
}

}  // namespace

void write_report(const fs::path& run_dir) {
    const fs::path log_path = run_dir / "search_log.jsonl";
    const std::string expected = "expected files: search_log.jsonl (required), config.json, derive.json, metrics.json";
    if (!fs::exists(log_path)) throw Error(run_dir.string() + ": no search log; " + expected);
    std::vector<SearchRecord> log;
    {
        std::ifstream in(log_path);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) log.push_back(search_record_from_json(line));
        }
    }
    if (log.empty()) throw Error(run_dir.string() + ": search log is empty; " + expected);

    std::ostringstream csv;
    csv << "epoch,mean_reward,baseline,best_reward,train_loss,train_accuracy,lr\n";
    for (const auto& r : log) {
        csv << r.epoch << ',' << fmt(r.mean_reward) << ',' << fmt(r.baseline) << ',' << fmt(r.best_reward) << ','
            << fmt(r.train_loss) << ',' << fmt(r.train_accuracy) << ',' << fmt(r.lr) << '\n';
    }

    const SearchRecord& last = log.back();
    std::ostringstream rep;
    rep << "epochs: " << log.size() << '\n';
    rep << "final mean reward: " << fmt(last.mean_reward) << '\n';
    rep << "final baseline: " << fmt(last.baseline) << '\n';
    rep << "best reward: " << fmt(last.best_reward) << '\n';
    std::optional<RunConfig> rc;
    if (fs::exists(run_dir / "config.json")) rc = run_config_from_json(json::parse(read_text(run_dir / "config.json")));
    const Grammar grammar = rc ? rc->search.controller.grammar : Grammar{};
    const Genotype best = decode_tokens(tokens_from_string(last.best_genotype), grammar);
    rep << "best genotype tokens: " << last.best_genotype << '\n';
    rep << "best genotype:\n" << serialize_genotype(best);
    if (rc) {
        rep << "variant: " << variant_name(rc->variant) << " (v_s, v_d, k_d) = (" << rc->blocks.v_s << ", "
            << rc->blocks.v_d << ", " << rc->blocks.k_d << ")\n";
        rep << "parameters (search architecture): " << count_parameters(build_graph(best, rc->search.search_arch))
            << '\n';
        rep << "parameters (derived architecture): " << count_parameters(build_graph(best, rc->search.derive_arch))
            << '\n';
    }
    if (fs::exists(run_dir / "derive.json")) {
        const json d = json::parse(read_text(run_dir / "derive.json"));
        rep << "derived candidates:\n";
        for (const auto& c : d.at("candidates")) {
            rep << "  " << c.at("rank").get<int>() << ' ' << fmt(c.at("score").get<double>()) << ' '
                << c.at("tokens").get<std::string>() << '\n';
        }
    }
    if (fs::exists(run_dir / "metrics.json")) {
        const json m = json::parse(read_text(run_dir / "metrics.json"));
        rep << "final training: train accuracy " << fmt(m.at("train_accuracy").get<double>()) << ", test accuracy "
            << fmt(m.at("test_accuracy").get<double>()) << ", parameters " << m.at("parameters").get<std::size_t>()
            << '\n';
    }
    write_text(run_dir / "reward_curve.csv", csv.str());
    write_text(run_dir / "report.txt", rep.str());
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Broad neural architecture search"};
    app.add_option("command", o.command, "search | derive | train | eval | compile | grid | report")
        ->required()
        ->check(CLI::IsMember({"search", "derive", "train", "eval", "compile", "grid", "report"}));
    app.add_option("--config", o.config, "config file or preset name");
    app.add_option("--set", o.sets, "override, key=value")->take_all();
    app.add_option("--out", o.out, "run directory")->required();
    app.add_option("--checkpoint", o.checkpoint, "search.ckpt or model.ckpt");
    app.add_option("--genotype", o.genotype, "genotype file");
    app.add_flag("--resume", o.resume, "continue search from the checkpoint");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << json{{"error", "usage"}, {"message", e.what()}}.dump() << '\n';
        return kExitConfig;
    }

    try {
        if (o.command == "search") cmd_search(o, out);
        else if (o.command == "derive") cmd_derive(o, out);
        else if (o.command == "train") cmd_train(o, out);
        else if (o.command == "eval") cmd_eval(o, out);
        else if (o.command == "compile") cmd_compile(o, out);
        else if (o.command == "grid") cmd_grid(o, out);
        else cmd_report(o, out);
    } catch (const ConfigError& e) {
        err << json{{"error", "config"}, {"path", e.path()}, {"message", e.what()}}.dump() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        write_diagnostics(o.out, o.command, "runtime", e.what());
        err << json{{"error", "runtime"}, {"message", e.what()}}.dump() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace broadnas
