// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. Exit status is 0 only
// when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "broadnas/bytes.hpp"
#include "broadnas/cli_app.hpp"
#include "broadnas/run_config.hpp"
#include "oracles.hpp"

using namespace broadnas;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

// ---- 1 ---------------------------------------------------------------------

Outcome gradient_oracle() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(20240611);
    const auto cases = oracle::primitive_cases(rng);
    std::set<PrimitiveKind> covered;
    double worst = 0.0;
    std::string worst_name;
    std::size_t checked = 0;
    for (const auto& c : cases) {
        const auto r = oracle::check_case(c, rng);
        covered.insert(c.kind);
        checked += r.checked;
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            worst_name = c.name;
        }
    }
    const double t = seconds_since(t0);
    const bool all_kinds = covered.size() == static_cast<std::size_t>(PrimitiveKind::Pick) + 1;
    return {all_kinds && worst < 1e-4 && t < 60.0,
            std::to_string(cases.size()) + " cases over " + std::to_string(covered.size()) + " primitives, " +
                std::to_string(checked) + " entries, max rel error " + num(worst) + " (" + worst_name + "), " +
                num(t, 3) + " s"};
}

// ---- 2 ---------------------------------------------------------------------

Outcome topology_conformance() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(77);
    std::size_t graphs = 0;
    std::vector<std::string> problems;
    for (int gi = 0; gi < 200; ++gi) {
        const Genotype g = random_genotype(rng);
        for (Variant var : {Variant::BNAS, Variant::CCLE, Variant::CCE}) {
            for (int k = 0; k <= 2; ++k) {
                for (int v = 1; v <= 3; ++v) {
                    ArchConfig cfg;
                    cfg.variant = var;
                    cfg.u = 2;
                    cfg.k = k;
                    cfg.v = v;
                    cfg.c0 = 4;
                    cfg.input_shape = {3, gi % 2 ? 15 : 16, gi % 2 ? 15 : 16};
                    const ComputeGraph graph = build_graph(g, cfg);
                    ++graphs;
                    for (const auto& p : oracle::topology_violations(graph)) {
                        if (problems.size() < 5) {
                            problems.push_back(std::string(variant_name(var)) + " k=" + std::to_string(k) +
                                               " v=" + std::to_string(v) + ": " + p);
                        }
                    }
                }
            }
        }
    }
    const double t = seconds_since(t0);
    std::string detail = std::to_string(graphs) + " graphs, " + num(t, 3) + " s";
    for (const auto& p : problems) detail += "; " + p;
    return {problems.empty() && t < 60.0, detail};
}

// ---- 3 ---------------------------------------------------------------------

Outcome parameter_oracle() {
    std::mt19937_64 rng(31337);
    auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    int matched = 0, tried = 0;
    std::string first_mismatch;
    while (tried < 20) {
        ArchConfig cfg;
        cfg.variant = static_cast<Variant>(pick(0, 2));
        cfg.u = pick(1, 3);
        cfg.k = pick(0, 2);
        cfg.v = pick(1, 3);
        cfg.c0 = pick(2, 8);
        cfg.num_classes = pick(2, 12);
        const int side = pick(7, 20);
        cfg.input_shape = {pick(0, 1) ? 3 : 1, side, side};
        if (pick(0, 2) == 0) {
            const int sources = std::max(cfg.u - 1, 1);
            cfg.delta_budget = pick(sources, cfg.c0 << (cfg.u - 1));
            cfg.gap_conv_budget = pick(cfg.u, cfg.c0 * ((1 << cfg.u) - 1));
            const int projected = cfg.variant == Variant::CCE ? cfg.v - 1 : cfg.v;
            if (projected > 0) cfg.gap_enh_budget = pick(projected, projected * (cfg.c0 << cfg.u));
        }
        const Genotype g = random_genotype(rng);
        ComputeGraph graph;
        try {
            graph = build_graph(g, cfg);
        } catch (const Error&) {
            continue;  // budget draw outside the allocatable range
        }
        ++tried;
        const std::size_t got = count_parameters(graph);
        const std::size_t want = oracle::parameter_count(g, cfg);
        if (got == want) {
            ++matched;
        } else if (first_mismatch.empty()) {
            first_mismatch = std::string("; first mismatch ") + std::string(variant_name(cfg.variant)) +
                             " u=" + std::to_string(cfg.u) + " k=" + std::to_string(cfg.k) + " v=" +
                             std::to_string(cfg.v) + ": " + std::to_string(got) + " vs " + std::to_string(want);
        }
    }
    return {matched == tried, std::to_string(matched) + "/" + std::to_string(tried) + " configs exact" + first_mismatch};
}

// ---- 4 ---------------------------------------------------------------------

std::vector<CellSpec> all_reduced_cells() {
    const Grammar gr = Grammar::reduced();
    std::vector<CellSpec> out{CellSpec{}};
    for (int node = 2; node < 2 + gr.computed_nodes; ++node) {
        std::vector<CellSpec> next;
        for (const auto& base : out) {
            for (int a = 0; a < node; ++a) {
                for (int oa = 0; oa < gr.num_ops; ++oa) {
                    for (int b = 0; b < node; ++b) {
                        for (int ob = 0; ob < gr.num_ops; ++ob) {
                            CellSpec c = base;
                            c.nodes.push_back({a, static_cast<OpKind>(oa), b, static_cast<OpKind>(ob)});
                            next.push_back(c);
                        }
                    }
                }
            }
        }
        out = std::move(next);
    }
    return out;
}

struct EdgeIdentity {
    CellRole role;
    int block, index;
    PositionClass position;
    int node;
    char slot;
    int source;
    OpKind op;
    auto tie() const { return std::tie(role, block, index, position, node, slot, source, op); }
    bool operator<(const EdgeIdentity& o) const { return tie() < o.tie(); }
    bool operator==(const EdgeIdentity& o) const { return tie() == o.tie(); }
};

Outcome sharing_soundness(const fs::path& work) {
    (void)work;
    const auto cells = all_reduced_cells();
    ArchConfig cfg;
    cfg.variant = Variant::BNAS;
    cfg.u = 2;
    cfg.k = 1;
    cfg.v = 2;
    cfg.c0 = 2;
    cfg.input_shape = {3, 8, 8};

    std::map<std::string, std::set<EdgeIdentity>> key_to_identity;
    std::map<EdgeIdentity, std::set<std::string>> identity_to_key;
    std::map<std::string, std::pair<Shape, bool>> binding;
    std::size_t conflicts = 0, graphs = 0, unmatched = 0;

    auto scan = [&](const Genotype& g) {
        const ComputeGraph graph = build_graph(g, cfg);
        ++graphs;
        for (const auto& l : graph.layers) {
            for (const auto& w : l.weights) {
                auto [it, inserted] = binding.emplace(w.key, std::pair{w.shape, w.init.trainable});
                if (!inserted && (it->second.first != w.shape || it->second.second != w.init.trainable)) ++conflicts;
            }
        }
        for (const auto& rec : graph.cells) {
            const CellSpec& spec = rec.site.role == CellRole::Conv ? g.conv_cell : g.enh_cell;
            for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
                const int node = static_cast<int>(i) + 2;
                for (char slot : {'a', 'b'}) {
                    const std::string scope = rec.scope + "/n" + std::to_string(node) + "." + slot;
                    const auto& n = spec.nodes[i];
                    const EdgeIdentity id{rec.site.role, rec.site.block, rec.site.index, rec.site.position, node, slot,
                                          slot == 'a' ? n.input_a : n.input_b, slot == 'a' ? n.op_a : n.op_b};
                    std::set<std::string> keys;
                    for (const auto& l : graph.layers) {
                        if (l.scope != scope) continue;
                        for (const auto& w : l.weights) keys.insert(w.key);
                    }
                    if (keys.empty()) ++unmatched;
                    for (const auto& k : keys) {
                        key_to_identity[k].insert(id);
                        identity_to_key[id].insert(k);
                    }
                }
            }
        }
    };

    Genotype base;
    base.conv_cell = cells.front();
    base.enh_cell = cells.back();
    for (const auto& c : cells) scan(Genotype{c, base.enh_cell});
    for (const auto& c : cells) scan(Genotype{base.conv_cell, c});

    std::size_t shared_by_many = 0;
    for (const auto& [k, ids] : key_to_identity) shared_by_many += ids.size() != 1;
    // Every identity owns the same key set size (one per tensor of its op).
    std::size_t split_identity = 0;
    for (const auto& [id, keys] : identity_to_key) {
        for (const auto& k : keys) {
            if (key_to_identity[k] != std::set<EdgeIdentity>{id}) ++split_identity;
        }
    }
    const bool sharing_ok = conflicts == 0 && shared_by_many == 0 && split_identity == 0 && unmatched == 0;

    // Update locality over interleaved child steps.
    RunConfig rc = load_run_config("desk-synthetic", {"arch.c0=4", "data.synthetic.n=600", "data.train_size=256",
                                                      "data.val_size=64", "data.test_size=0", "data.synthetic.side=8",
                                                      "arch.input_shape=[3,8,8]"});
    const LoadedData data = load_data(rc);
    WeightStore store(substream_seed(rc.seed, "weights"));
    std::mt19937_64 rng(4242);
    std::size_t leaks = 0, stale = 0;
    std::string leak_example;
    for (int step = 0; step < 50; ++step) {
        const Genotype g = random_genotype(rng);
        const ComputeGraph graph = build_graph(g, rc.search.search_arch);
        const BoundModel model = activate(store, graph);
        std::set<std::string> allowed;
        for (const auto& l : graph.layers) {
            if (!model.live()[static_cast<std::size_t>(l.id)]) continue;
            for (const auto& w : l.weights) allowed.insert(w.key);
        }
        const auto before = store.key_digests();
        std::vector<std::size_t> idx;
        for (int i = 0; i < 32; ++i) idx.push_back(static_cast<std::size_t>((step * 32 + i) % 256));
        const Tensor x = make_batch(data.search.train, idx, data.search.norm);
        sgd_train_step(store, model, x, batch_labels(data.search.train, idx), 0.05, rc.search);
        const auto after = store.key_digests();
        for (const auto& [key, d] : after) {
            const bool changed = !before.count(key) || before.at(key) != d;
            if (changed && !allowed.count(key)) {
                ++leaks;
                if (leak_example.empty()) leak_example = key;
            }
        }
        for (const auto& [name, p] : model.parameters()) {
            if (before.at(name) == after.at(name)) ++stale;
        }
    }
    const bool locality_ok = leaks == 0 && stale == 0;
    return {sharing_ok && locality_ok,
            std::to_string(graphs) + " reduced-grammar graphs, " + std::to_string(key_to_identity.size()) +
                " op-edge keys over " + std::to_string(identity_to_key.size()) + " identities, " +
                std::to_string(conflicts) + " shape conflicts, " + std::to_string(shared_by_many + split_identity) +
                " sharing mismatches; 50 child steps: " + std::to_string(leaks) + " writes outside the child" +
                (leak_example.empty() ? "" : " (" + leak_example + ")") + ", " + std::to_string(stale) +
                " unchanged child parameters"};
}

// ---- 5 ---------------------------------------------------------------------

double subtree_mass(const Controller& c, const RolloutState& s, int length, std::size_t& leaves) {
    if (s.position == length) {
        ++leaves;
        return 1.0;
    }
    const auto lp = c.next_log_probs(s);
    double m = 0.0;
    for (std::size_t t = 0; t < lp.size(); ++t) {
        m += std::exp(lp[t]) * subtree_mass(c, c.advance(s, static_cast<int>(t)), length, leaves);
    }
    return m;
}

std::map<std::string, std::vector<double>> snapshot(const Controller& c) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, p] : c.parameters()) out[name] = {p.data().begin(), p.data().end()};
    return out;
}

Outcome controller_correctness() {
    std::vector<std::string> parts;
    bool ok = true;

    {  // exhaustive mass
        ControllerConfig cfg;
        cfg.hidden = 8;
        cfg.grammar = Grammar::reduced();
        const Controller c(cfg, 9);
        std::size_t leaves = 0;
        const double mass = subtree_mass(c, c.begin(), cfg.grammar.sequence_length(), leaves);
        const bool pass = std::abs(mass - 1.0) <= 1e-9 && static_cast<double>(leaves) == sequence_space_size(cfg.grammar);
        ok = ok && pass;
        parts.push_back("mass " + num(mass, 15) + " over " + std::to_string(leaves) + " sequences");
    }
    {  // zero parameters sample uniformly
        ControllerConfig cfg;
        cfg.hidden = 8;
        Controller c(cfg, 3);
        c.set_zero();
        const Grammar& gr = cfg.grammar;
        const int n = 100000;
        std::vector<std::vector<int>> counts(static_cast<std::size_t>(gr.sequence_length()));
        for (int p = 0; p < gr.sequence_length(); ++p) counts[static_cast<std::size_t>(p)].assign(static_cast<std::size_t>(gr.token_range(p)), 0);
        std::mt19937_64 rng(123456);
        for (int s = 0; s < n; ++s) {
            const Episode ep = c.sample(rng);
            for (std::size_t p = 0; p < ep.tokens.size(); ++p) ++counts[p][static_cast<std::size_t>(ep.tokens[p])];
        }
        double worst = 0.0;
        for (const auto& row : counts) {
            const double q = 1.0 / static_cast<double>(row.size());
            const double sigma = std::sqrt(n * q * (1 - q));
            for (int k : row) worst = std::max(worst, std::abs(k - n * q) / sigma);
        }
        ok = ok && worst <= 3.0;
        parts.push_back("zero-parameter max deviation " + num(worst, 3) + " sigma");
    }
    {  // constant reward leaves parameters unchanged
        ControllerConfig cfg;
        cfg.hidden = 16;
        cfg.entropy_weight = 0.0;
        Controller c(cfg, 5);
        const auto before = snapshot(c);
        std::mt19937_64 rng(8);
        for (int u = 0; u < 3; ++u) {
            std::vector<Episode> eps;
            for (int e = 0; e < 4; ++e) {
                eps.push_back(c.sample(rng));
                eps.back().reward = 0.625;
            }
            c.reinforce_update(eps);
        }
        const bool same = snapshot(c) == before;
        ok = ok && same;
        parts.push_back(std::string("constant reward ") + (same ? "leaves parameters unchanged" : "CHANGED parameters"));
    }
    {  // policy gradient against finite differences
        ControllerConfig cfg;
        cfg.hidden = 5;
        cfg.entropy_weight = 0.05;
        cfg.grammar = Grammar::reduced();
        cfg.init_range = 0.5;
        Controller c(cfg, 21);
        std::mt19937_64 rng(99);
        std::vector<Episode> eps;
        std::uniform_real_distribution<double> rew(0.0, 1.0);
        for (int e = 0; e < 4; ++e) {
            eps.push_back(c.sample(rng));
            eps.back().reward = rew(rng);
        }
        const double b = 0.4;
        Tape tape;
        Tensor loss;
        {
            TapeScope scope(tape);
            for (auto& [name, p] : c.parameters()) p.zero_grad();
            loss = c.policy_objective(eps, b);
        }
        backward(tape, loss);
        double diff = 0.0, na = 0.0, nn = 0.0;
        const double h = 1e-5;
        for (auto& [name, p] : c.parameters()) {
            const std::vector<double> g(p.grad().begin(), p.grad().end());
            auto d = p.data_mut();
            for (std::size_t i = 0; i < d.size(); ++i) {
                const double keep = d[i];
                d[i] = keep + h;
                const double up = c.policy_objective(eps, b).item();
                d[i] = keep - h;
                const double down = c.policy_objective(eps, b).item();
                d[i] = keep;
                const double numeric = (up - down) / (2 * h);
                diff += (numeric - g[i]) * (numeric - g[i]);
                na += g[i] * g[i];
                nn += numeric * numeric;
            }
        }
        const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
        ok = ok && rel < 1e-4;
        parts.push_back("policy gradient rel error " + num(rel));
    }
    {  // bandit
        ControllerConfig cfg;
        Controller c(cfg, 17);
        const int target = static_cast<int>(OpKind::MaxPool3x3);
        std::mt19937_64 rng(2024);
        for (int u = 0; u < 2000; ++u) {
            Episode ep = c.sample(rng);
            ep.reward = ep.tokens[1] == target ? 1.0 : 0.0;
            c.reinforce_update(std::span<const Episode>(&ep, 1));
        }
        const RolloutState s0 = c.begin();
        const auto first = c.next_log_probs(s0);
        double p = 0.0;
        for (std::size_t t = 0; t < first.size(); ++t) {
            p += std::exp(first[t]) * std::exp(c.next_log_probs(c.advance(s0, static_cast<int>(t)))[target]);
        }
        ok = ok && p > 0.9;
        parts.push_back("bandit P(target op) " + num(p, 4) + " after 2000 updates");
    }
    std::string detail;
    for (const auto& p : parts) detail += (detail.empty() ? "" : "; ") + p;
    return {ok, detail};
}

// ---- 6 ---------------------------------------------------------------------

bool same_logs(const std::vector<SearchRecord>& a, const std::vector<SearchRecord>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (search_record_json(a[i]) != search_record_json(b[i])) return false;
    }
    return true;
}

Outcome desk_search(const fs::path& work) {
    const RunConfig rc = load_run_config("desk-synthetic", {});
    const LoadedData data = load_data(rc);
    const auto t0 = Clock::now();
    SearchOptions opt;
    opt.out_dir = work / "desk_search";
    const SearchResult a = run_search(rc.search, data.search, rc.seed, opt);
    const double t = seconds_since(t0);

    std::mt19937_64 rng(substream_seed(rc.seed, "random-baseline"));
    double random_mean = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Genotype g = random_genotype(rng);
        const auto idx = reward_batch_indices(data.search.val.size(), rc.search.batch_size,
                                              substream_seed(rc.seed, "random-baseline"), rc.search.epochs, 0, i);
        random_mean += evaluate_accuracy(a.store, rc.search.search_arch, g, data.search.val, idx, data.search.norm,
                                         rc.search.batch_size);
    }
    random_mean /= 100.0;
    const double final_reward = a.log.back().mean_reward;

    const SearchResult b = run_search(rc.search, data.search, rc.seed);
    const bool reproducible = same_logs(a.log, b.log) && a.store.digest() == b.store.digest() &&
                              a.controller.digest() == b.controller.digest();
    const bool epochs_ok = static_cast<int>(a.log.size()) == rc.search.epochs;
    return {final_reward - random_mean >= 0.05 && t < 1800.0 && reproducible && epochs_ok,
            std::to_string(a.log.size()) + " epochs in " + num(t, 4) + " s, final mean reward " + num(final_reward) +
                " vs random-genotype mean " + num(random_mean) + " (margin " + num(final_reward - random_mean) + "), " +
                (reproducible ? "bitwise reproducible" : "NOT reproducible")};
}

// ---- 7 ---------------------------------------------------------------------

Outcome overfit(const fs::path& work) {
    (void)work;
    const bool have_cifar = fs::exists(default_data_dir() / "data_batch_1.bin");
    std::vector<std::string> sets{"search.lr_max=0.05", "search.t_0=200.0", "search.t_mul=1.0",
                                  "search.batch_size=64", "blocks.k_d=1", "blocks.v_d=1"};
    RunConfig rc = have_cifar ? load_run_config("desk-cifar-subset", sets) : load_run_config("desk-synthetic", sets);
    SearchData data;
    if (have_cifar) {
        const Dataset first = read_cifar10_file(default_data_dir() / "data_batch_1.bin");
        data.train = first.split_at(256, "train", "rest").first;
    } else {
        data.train = synthetic_dataset(rc.data.synthetic).split_at(256, "train", "rest").first;
    }
    data.norm = Normalizer::from_data(data.train);
    rc.search.final_augment.enabled = false;
    const Genotype g = parse_genotype(
        "conv n2 = sep3(0) + sep3(1)\n"
        "conv n3 = sep3(2) + skip(1)\n"
        "conv n4 = sep5(0) + avg3(3)\n"
        "conv n5 = skip(4) + sep3(2)\n"
        "conv n6 = max3(5) + sep3(0)\n"
        "enh n2 = sep3(1) + skip(0)\n"
        "enh n3 = sep3(2) + sep5(1)\n"
        "enh n4 = skip(3) + max3(0)\n"
        "enh n5 = sep3(4) + avg3(2)\n"
        "enh n6 = skip(5) + sep3(3)\n");
    const auto t0 = Clock::now();
    const FinalResult r = final_train(g, rc.search, data, Dataset{}, rc.seed, 200);
    return {r.train_accuracy >= 0.99, std::string(have_cifar ? "CIFAR-10" : "synthetic fallback") +
                                          ", 256 images, 200 epochs: train accuracy " + num(r.train_accuracy) +
                                          ", final loss " + num(r.epoch_loss.back()) + ", " + num(seconds_since(t0), 4) +
                                          " s"};
}

// ---- 8 ---------------------------------------------------------------------

Outcome block_grid(const fs::path& work) {
    std::vector<std::string> parts;
    bool ok = true;
    const std::map<std::string, std::array<int, 3>> want{
        {"full-bnas", {2, 1, 1}}, {"full-ccle", {2, 1, 1}}, {"full-cce", {2, 2, 2}}};
    for (const auto& [name, t] : want) {
        const RunConfig rc = load_run_config(name, {});
        const bool match = rc.blocks.v_s == t[0] && rc.blocks.v_d == t[1] && rc.blocks.k_d == t[2] &&
                           rc.search.search_arch.k == 0 && rc.search.search_arch.v == t[0] &&
                           rc.search.derive_arch.v == t[1] && rc.search.derive_arch.k == t[2];
        ok = ok && match;
        parts.push_back(name + " (" + std::to_string(rc.blocks.v_s) + "," + std::to_string(rc.blocks.v_d) + "," +
                        std::to_string(rc.blocks.k_d) + ")");
    }

    const fs::path dir = work / "grid";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir.string() + ".genotype") << serialize_genotype(parse_genotype(
        "conv n2 = sep3(0) + skip(1)\nconv n3 = avg3(2) + sep3(1)\nconv n4 = max3(0) + sep3(3)\n"
        "conv n5 = skip(4) + sep5(2)\nconv n6 = sep3(5) + avg3(0)\nenh n2 = sep3(1) + skip(0)\n"
        "enh n3 = sep3(2) + max3(1)\nenh n4 = skip(3) + avg3(0)\nenh n5 = sep3(4) + skip(2)\n"
        "enh n6 = sep5(5) + max3(1)\n"));
    std::ostringstream out, err;
    const int code = run_cli({"grid", "--config", "desk-synthetic", "--set", "arch.c0=4", "--set",
                              "data.synthetic.n=160", "--set", "data.train_size=64", "--set", "data.val_size=32",
                              "--set", "data.test_size=32", "--set", "search.final_epochs=1", "--set",
                              "search.batch_size=32", "--genotype", dir.string() + ".genotype", "--out", dir.string()},
                             out, err);
    int dirs = 0, matching = 0;
    for (int vd = 1; vd <= 3; ++vd) {
        for (int kd = 0; kd <= 2; ++kd) {
            const fs::path run = dir / ("vd" + std::to_string(vd) + "_kd" + std::to_string(kd));
            if (!fs::is_directory(run)) continue;
            ++dirs;
            if (!fs::exists(run / "config.json") || !fs::exists(run / "seed.txt") || !fs::exists(run / "metrics.json")) {
                continue;
            }
            const RunConfig snap = run_config_from_json(nlohmann::json::parse(std::ifstream(run / "config.json")));
            matching += snap.blocks.v_d == vd && snap.blocks.k_d == kd;
        }
    }
    int entries = 0;
    for (const auto& e : fs::directory_iterator(dir)) entries += e.is_directory();
    int csv_rows = 0;
    {
        std::ifstream csv(dir / "grid.csv");
        std::string line;
        while (std::getline(csv, line)) ++csv_rows;
    }
    const bool grid_ok = code == 0 && dirs == 9 && entries == 9 && matching == 9 && csv_rows == 10;
    ok = ok && grid_ok;
    parts.push_back("grid exit " + std::to_string(code) + ", " + std::to_string(entries) + " run directories, " +
                    std::to_string(matching) + " with matching snapshots, " + std::to_string(csv_rows - 1) + " csv rows");

    std::ostringstream cout_, cerr_;
    const int cc = run_cli({"compile", "--config", "full-cce", "--out", (work / "compile_cce").string()}, cout_, cerr_);
    const bool echo = cc == 0 && cout_.str().find("(v_s, v_d, k_d) = (2, 2, 2)") != std::string::npos;
    ok = ok && echo;
    parts.push_back(std::string("compile full-cce ") + (echo ? "echoes (2, 2, 2)" : "did not echo (2, 2, 2)"));
    std::string detail;
    for (const auto& p : parts) detail += (detail.empty() ? "" : "; ") + p;
    return {ok, detail};
}

// ---- 9 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome checkpoint_determinism(const fs::path& work) {
    const RunConfig rc = load_run_config("desk-synthetic", {"search.epochs=4", "search.controller_episodes=8",
                                                            "data.train_size=384", "data.val_size=128"});
    const LoadedData data = load_data(rc);
    const fs::path a = work / "ckpt_full", b = work / "ckpt_split";
    fs::remove_all(a);
    fs::remove_all(b);
    SearchOptions full;
    full.out_dir = a;
    const SearchResult ra = run_search(rc.search, data.search, rc.seed, full);

    SearchOptions first;
    first.out_dir = b;
    first.stop_after = 1;
    run_search(rc.search, data.search, rc.seed, first);
    SearchOptions second;
    second.out_dir = b;
    second.resume_from = b / "search.ckpt";
    second.stop_after = 3;
    run_search(rc.search, data.search, rc.seed, second);
    SearchOptions third;
    third.out_dir = b;
    third.resume_from = b / "search.ckpt";
    const SearchResult rb = run_search(rc.search, data.search, rc.seed, third);

    const bool logs = same_logs(ra.log, rb.log);
    const bool files = slurp(a / "search_log.jsonl") == slurp(b / "search_log.jsonl");
    const bool ckpt = slurp(a / "search.ckpt") == slurp(b / "search.ckpt");
    const bool state = ra.store.digest() == rb.store.digest() && ra.controller.digest() == rb.controller.digest();
    return {logs && files && ckpt && state && ra.log.size() == 4,
            std::string("resumed after epochs 1 and 3: records ") + (logs ? "equal" : "DIFFER") + ", log files " +
                (files ? "byte-identical" : "DIFFER") + ", checkpoints " + (ckpt ? "byte-identical" : "DIFFER") +
                ", final state " + (state ? "equal" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string work = "acceptance_work";
    std::vector<int> only;
    app.add_option("--work", work, "scratch directory");
    app.add_option("--only", only, "criteria to run");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient oracle", gradient_oracle},
        {"topology conformance", topology_conformance},
        {"parameter-count oracle", parameter_oracle},
        {"sharing soundness", [&] { return sharing_soundness(work); }},
        {"controller correctness", controller_correctness},
        {"end-to-end desk search", [&] { return desk_search(work); }},
        {"overfit sanity", [&] { return overfit(work); }},
        {"block grid conformance", [&] { return block_grid(work); }},
        {"checkpoint determinism", [&] { return checkpoint_determinism(work); }},
    };
    std::ofstream summary(fs::path(work) / "summary.txt");
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::ostringstream line;
        line << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail;
        std::cout << line.str() << std::endl;
        summary << line.str() << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
