// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "broadnas/cli_app.hpp"
#include "broadnas/run_config.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace broadnas;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::vector<std::string> kTiny{"--set", "arch.c0=4",         "--set", "data.synthetic.n=200",
                                     "--set", "data.synthetic.side=8", "--set", "arch.input_shape=[3,8,8]",
                                     "--set", "data.train_size=96", "--set", "data.val_size=48",
                                     "--set", "data.test_size=48",  "--set", "search.epochs=2",
                                     "--set", "search.batch_size=32", "--set", "search.controller_episodes=3",
                                     "--set", "search.derive_candidates=2", "--set", "search.final_epochs=1"};

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run cli(std::vector<std::string> args, const fs::path& dir, bool tiny = true) {
    args.insert(args.end(), {"--out", dir.string()});
    if (tiny) args.insert(args.end(), kTiny.begin(), kTiny.end());
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("broadnas_test_cli_" + name);
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("configuration errors exit with code 2 and name the field") {
    const auto dir = scratch("config");
    Run r = cli({"search", "--config", "desk-synthetic", "--set", "search.epoch=3"}, dir, false);
    CHECK(r.code == kExitConfig);
    const json e = json::parse(r.err);
    CHECK(e.at("error") == "config");
    CHECK(e.at("path") == "search.epoch");

    r = cli({"search", "--config", "desk-synthetic", "--set", "search.epochs=1.5"}, dir, false);
    CHECK(r.code == kExitConfig);
    CHECK(json::parse(r.err).at("path") == "search.epochs");

    r = cli({"search", "--config", "desk-synthetic", "--set", "controller.temperature=-1"}, dir, false);
    CHECK(r.code == kExitConfig);

    r = cli({"explode"}, dir, false);
    CHECK(r.code == kExitConfig);
    CHECK(json::parse(r.err).at("error") == "usage");
    fs::remove_all(dir);
}

TEST_CASE("presets and overrides resolve into the snapshot") {
    const RunConfig rc = load_run_config("full-cce", {"search.epochs=7"});
    CHECK(rc.blocks.v_s == 2);
    CHECK(rc.blocks.v_d == 2);
    CHECK(rc.blocks.k_d == 2);
    CHECK(rc.search.epochs == 7);
    CHECK(rc.search.search_arch.k == 0);
    CHECK(rc.search.derive_arch.k == 2);
    CHECK_THROWS_AS(load_run_config("no-such-preset", {}), ConfigError);
}

TEST_CASE("search, derive, train, eval and report on a tiny run") {
    const auto dir = scratch("pipeline");
    Run r = cli({"search", "--config", "desk-synthetic"}, dir);
    REQUIRE(r.code == kExitOk);
    for (const char* f : {"config.json", "seed.txt", "search_log.jsonl", "search.ckpt", "best.genotype"})
        CHECK(fs::exists(dir / f));
    const json snap = json::parse(slurp(dir / "config.json"));
    CHECK(snap.at("search").at("epochs") == 2);
    CHECK(snap.at("arch").at("c0") == 4);
    CHECK(snap.at("controller").at("lr") == doctest::Approx(0.0035));

    r = cli({"derive", "--config", (dir / "config.json").string(), "--checkpoint", (dir / "search.ckpt").string()},
            dir, false);
    REQUIRE(r.code == kExitOk);
    CHECK(json::parse(slurp(dir / "derive.json")).at("candidates").size() == 2);

    r = cli({"train", "--config", (dir / "config.json").string(), "--genotype", (dir / "derived.genotype").string()},
            dir, false);
    REQUIRE(r.code == kExitOk);
    CHECK(fs::exists(dir / "model.ckpt"));

    r = cli({"eval", "--checkpoint", (dir / "model.ckpt").string()}, dir / "eval", false);
    REQUIRE(r.code == kExitOk);
    const json m = json::parse(slurp(dir / "metrics.json"));
    const json ev = json::parse(slurp(dir / "eval" / "eval.json"));
    CHECK(ev.at("test_accuracy").get<double>() == doctest::Approx(m.at("test_accuracy").get<double>()));

    write_report(dir);
    const std::string report = slurp(dir / "report.txt");
    const std::string curve = slurp(dir / "reward_curve.csv");
    write_report(dir);
    CHECK(slurp(dir / "report.txt") == report);
    CHECK(slurp(dir / "reward_curve.csv") == curve);
    CHECK(std::count(curve.begin(), curve.end(), '\n') == 3);
    CHECK(report.find("derived candidates:") != std::string::npos);
    CHECK(report.find("final training:") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("report on a run without a log lists the expected files") {
    const auto dir = scratch("empty");
    fs::create_directories(dir);
    try {
        write_report(dir);
        FAIL("expected Error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("search_log.jsonl") != std::string::npos);
    }
    std::ofstream(dir / "search_log.jsonl").close();
    CHECK_THROWS_AS(write_report(dir), Error);
    fs::remove_all(dir);
}

TEST_CASE("compile echoes the grid cell and parameter counts") {
    const auto dir = scratch("compile");
    const Run r = cli({"compile", "--config", "full-cce"}, dir, false);
    REQUIRE(r.code == kExitOk);
    CHECK(r.out.find("CCE (v_s, v_d, k_d) = (2, 2, 2)") != std::string::npos);
    CHECK(fs::exists(dir / "graph.txt"));
    fs::remove_all(dir);
}

TEST_CASE("the executable reports failures through its exit status") {
    const auto dir = scratch("exe");
    const std::string base = std::string("\"") + BROADNAS_CLI + "\" ";
    const auto status = [](const std::string& cmd) {
        const int s = std::system((cmd + " >/dev/null 2>&1").c_str());
        return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
    };
    CHECK(status(base + "compile --config desk-synthetic --out \"" + dir.string() + "\"") == 0);
    CHECK(status(base + "search --config desk-synthetic --set nope=1 --out \"" + dir.string() + "\"") == 2);
    CHECK(status(base + "report --out \"" + (dir / "missing").string() + "\"") == 1);
    CHECK(fs::exists(dir / "missing" / "diagnostics.json"));
    fs::remove_all(dir);
}
