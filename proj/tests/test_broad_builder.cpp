// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "broadnas/broad_builder.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace broadnas;

namespace {

ArchConfig small(Variant variant, int k, int v) {
    ArchConfig c;
    c.variant = variant;
    c.u = 2;
    c.k = k;
    c.v = v;
    c.c0 = 4;
    c.input_shape = {3, 15, 15};
    return c;
}

int find_kind(const ComputeGraph& g, LayerKind kind) {
    for (const auto& l : g.layers)
        if (l.kind == kind) return l.id;
    return -1;
}

}  // namespace

TEST_CASE("importance split weights sources 1, 2, 4 with the remainder last") {
    CHECK(importance_split(1, 16) == std::vector<int>{16});
    CHECK(importance_split(2, 24) == std::vector<int>{8, 16});
    CHECK(importance_split(3, 14) == std::vector<int>{2, 4, 8});
    CHECK(importance_split(3, 10) == std::vector<int>{1, 2, 7});
    CHECK(equal_split(3, 10) == std::vector<int>{3, 3, 4});
    for (int s = 1; s <= 5; ++s)
        for (int b = s * 8; b < s * 8 + 40; ++b) {
            const auto parts = importance_split(s, b);
            int total = 0;
            for (int p : parts) total += p;
            CHECK(total == b);
            CHECK(std::is_sorted(parts.begin(), parts.end()));
        }
    CHECK_THROWS_AS(importance_split(0, 4), Error);
}

TEST_CASE("tap shapes and aliases") {
    ArchConfig c = small(Variant::BNAS, 1, 2);
    CHECK(canonical_tap(c, "Z1_0") == "stem");
    CHECK(canonical_tap(c, "Z1_-1") == "stem");
    CHECK(canonical_tap(c, "Z2_0") == "Z1_2");
    CHECK(canonical_tap(c, "Z2_-1") == "Z1_1");
    CHECK(tap_shape(c, "stem") == FeatureShape{4, 15, 15});
    CHECK(tap_shape(c, "Z1_1") == FeatureShape{4, 15, 15});
    CHECK(tap_shape(c, "Z1_2") == FeatureShape{8, 8, 8});
    CHECK(tap_shape(c, "Z2_2") == FeatureShape{16, 4, 4});
    CHECK(tap_shape(c, "H2") == FeatureShape{16, 4, 4});
    CHECK(gap_conv_tap(c, 1) == "Z1_1");
    c.k = 0;
    CHECK(gap_conv_tap(c, 1) == "Z1_1");
    CHECK(tap_shape(c, "Z1_1") == FeatureShape{8, 8, 8});
    CHECK_THROWS_AS(canonical_tap(c, "Z3_1"), Error);
    CHECK_THROWS_AS(canonical_tap(c, "H3"), Error);
    CHECK_THROWS_AS(tap_shape(c, "Q"), Error);
}

TEST_CASE("built graphs satisfy the wiring oracle and parameter arithmetic") {
    std::mt19937_64 rng(11);
    for (Variant variant : {Variant::BNAS, Variant::CCLE, Variant::CCE})
        for (int k = 0; k <= 2; ++k)
            for (int v = 1; v <= 3; ++v) {
                const Genotype g = random_genotype(rng);
                const ArchConfig c = small(variant, k, v);
                const ComputeGraph graph = build_graph(g, c);
                CAPTURE(variant_name(variant));
                CAPTURE(k);
                CAPTURE(v);
                CHECK(oracle::topology_violations(graph).empty());
                CHECK(count_parameters(graph) == oracle::parameter_count(g, c));
                CHECK(graph.layers.at(static_cast<std::size_t>(graph.output)).out == FeatureShape{10, 1, 1});
            }
}

TEST_CASE("the wiring oracle notices tampering") {
    std::mt19937_64 rng(12);
    const Genotype g = random_genotype(rng);
    const ComputeGraph base = build_graph(g, small(Variant::CCE, 1, 3));
    REQUIRE(oracle::topology_violations(base).empty());

    ComputeGraph swapped = base;
    auto& last = swapped.cells.back();
    std::swap(last.input_layers[0], last.input_layers[1]);
    CHECK_FALSE(oracle::topology_violations(swapped).empty());

    ComputeGraph reordered = base;
    const int gap = find_kind(reordered, LayerKind::GlobalAvgPool);
    REQUIRE(gap >= 0);
    auto& fused = reordered.layers.at(static_cast<std::size_t>(reordered.layers[static_cast<std::size_t>(gap)].inputs[0]));
    std::reverse(fused.inputs.begin(), fused.inputs.end());
    CHECK_FALSE(oracle::topology_violations(reordered).empty());
}

TEST_CASE("weight keys are unique per bound tensor and share a grammar") {
    std::mt19937_64 rng(13);
    const ComputeGraph graph = build_graph(random_genotype(rng), small(Variant::BNAS, 2, 2));
    const auto keys = graph_weight_keys(graph);
    CHECK(std::set<std::string>(keys.begin(), keys.end()).size() == keys.size());
    for (const auto& key : keys) {
        const bool known = key.rfind("stem/", 0) == 0 || key.rfind("conv/", 0) == 0 || key.rfind("enh/", 0) == 0 ||
                           key.rfind("delta/", 0) == 0 || key.rfind("gap/", 0) == 0 || key.rfind("classifier/", 0) == 0;
        CAPTURE(key);
        CHECK(known);
    }
    OpEdgeKey e;
    e.site = CellSite{CellRole::Conv, 1, 2, PositionClass::ReduceStride};
    e.node = 3;
    e.slot = 'b';
    e.source = 0;
    e.op = OpKind::SepConv5x5;
    CHECK(e.key("dw") == "conv/b1.c2.reduce/n3.b/s0/sep5/dw");
}

TEST_CASE("channel plans that exceed a source raise an error") {
    ArchConfig c = small(Variant::BNAS, 0, 1);
    c.delta_budget = 1000;
    std::mt19937_64 rng(14);
    try {
        build_graph(random_genotype(rng), c);
        FAIL("expected Error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("channel plan overflow") != std::string::npos);
    }
    c.delta_budget = 0;
    c.u = 0;
    CHECK_THROWS_AS(build_graph(random_genotype(rng), c), Error);
}

TEST_CASE("graph dump is deterministic and lists every layer") {
    std::mt19937_64 rng(15);
    const Genotype g = random_genotype(rng);
    const ArchConfig c = small(Variant::CCLE, 1, 2);
    const ComputeGraph a = build_graph(g, c);
    const ComputeGraph b = build_graph(g, c);
    const std::string text = dump_graph(a);
    CHECK(text == dump_graph(b));
    CHECK(text.rfind("# broadnas graph v1\n", 0) == 0);
    CHECK(text.find("params=" + std::to_string(count_parameters(a))) != std::string::npos);
    CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == a.layers.size() + 2);
}

TEST_CASE("golden graph dump") {
    auto read = [](const std::string& name) {
        std::ifstream in(std::string(BROADNAS_GOLDEN_DIR) + "/" + name, std::ios::binary);
        REQUIRE(in);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    ArchConfig c = small(Variant::CCE, 1, 2);
    c.input_shape = {3, 8, 8};
    const ComputeGraph graph = build_graph(parse_genotype(read("sample.genotype")), c);
    CHECK(dump_graph(graph) == read("cce_u2_k1_v2_c4_8px.graph"));
    CHECK(oracle::topology_violations(graph).empty());
}
