// SPDX-License-Identifier: Apache-2.0

#include "broadnas/broad_builder.hpp"

#include <algorithm>
#include <array>
#include <set>
#include <sstream>

#include "broadnas/autodiff.hpp"

namespace broadnas {

namespace {

constexpr std::array<std::string_view, 12> kLayerNames{
    "input", "conv", "sep_conv", "batch_norm", "relu", "max_pool", "avg_pool",
    "identity", "add", "concat", "global_avg_pool", "affine",
};

int spatial_at(int extent, int level) {
    for (int l = 0; l < level; ++l) extent = static_cast<int>(same_out(static_cast<std::size_t>(extent), 2));
    return extent;
}

int pow2(int e) { return 1 << e; }

// Parsed tap: kind 's' (stem), 'z' (block, h), 'h' (enhancement j).
struct TapRef {
    char kind = 's';
    int a = 0;
    int b = 0;
};

TapRef parse_tap(const std::string& tap) {
    TapRef r;
    if (tap == "stem") return r;
    try {
        if (tap.size() > 1 && tap[0] == 'Z') {
            const auto us = tap.find('_');
            if (us == std::string::npos) throw Error("");
            r.kind = 'z';
            r.a = std::stoi(tap.substr(1, us - 1));
            r.b = std::stoi(tap.substr(us + 1));
            return r;
        }
        if (tap.size() > 1 && tap[0] == 'H') {
            r.kind = 'h';
            r.a = std::stoi(tap.substr(1));
            return r;
        }
    } catch (const std::exception&) {
    }
    throw Error("unknown tap '" + tap + "'");
}

std::string z_name(int block, int h) { return "Z" + std::to_string(block) + "_" + std::to_string(h); }
std::string h_name(int j) { return "H" + std::to_string(j); }

// Short source label used inside projection weight keys.
std::string source_label(const ArchConfig& cfg, const std::string& tap) {
    const TapRef r = parse_tap(tap);
    if (r.kind == 's') return "stem";
    if (r.kind == 'h') return "e" + std::to_string(r.a);
    return "b" + std::to_string(r.a) + (r.b == cfg.k + 1 ? "" : ".c" + std::to_string(r.b));
}

int stride_between(int from, int to) {
    int s = 1;
    while (static_cast<int>(same_out(static_cast<std::size_t>(from), static_cast<std::size_t>(s))) > to) s *= 2;
    if (static_cast<int>(same_out(static_cast<std::size_t>(from), static_cast<std::size_t>(s))) != to) {
        throw Error("no power-of-two stride maps extent " + std::to_string(from) + " to " + std::to_string(to));
    }
    return s;
}

std::vector<WeightBinding> bn_bindings(const std::string& prefix, int channels) {
    const Shape s{static_cast<std::size_t>(channels)};
    return {
        {prefix + ".gamma", s, {InitKind::Ones, 1, true}},
        {prefix + ".beta", s, {InitKind::Zeros, 1, true}},
        {prefix + ".mean", s, {InitKind::Zeros, 1, false}},
        {prefix + ".var", s, {InitKind::Ones, 1, false}},
    };
}

WeightBinding conv_binding(const std::string& key, int out_c, int in_c, int kernel) {
    const auto o = static_cast<std::size_t>(out_c);
    const auto i = static_cast<std::size_t>(in_c);
    const auto k = static_cast<std::size_t>(kernel);
    return {key, Shape{o, i, k, k}, {InitKind::KaimingNormal, i * k * k, true}};
}

class Builder {
public:
    Builder(const Genotype& g, const ArchConfig& cfg) {
        graph_.cfg = cfg;
        graph_.genotype = g;
    }

    ComputeGraph take() { return std::move(graph_); }
    ComputeGraph& graph() { return graph_; }

    const Layer& layer(int id) const { return graph_.layers.at(static_cast<std::size_t>(id)); }

    int add(Layer l) {
        l.id = static_cast<int>(graph_.layers.size());
        for (int in : l.inputs) {
            if (in < 0 || in >= l.id) throw Error("graph: layer " + std::to_string(l.id) + " reads a later layer");
        }
        l.out = infer(l);
        graph_.layers.push_back(std::move(l));
        return graph_.layers.back().id;
    }

    void set_tap(int id, const std::string& name) {
        graph_.layers.at(static_cast<std::size_t>(id)).tap = name;
        graph_.taps[name] = id;
    }

    int relu(int in, const std::string& scope) {
        Layer l;
        l.kind = LayerKind::Relu;
        l.inputs = {in};
        l.scope = scope;
        return add(std::move(l));
    }

    int conv(int in, int out_c, int kernel, int stride, const std::string& key, const std::string& scope) {
        Layer l;
        l.kind = LayerKind::Conv;
        l.kernel = kernel;
        l.stride = stride;
        l.inputs = {in};
        l.weights = {conv_binding(key, out_c, layer(in).out.c, kernel)};
        l.scope = scope;
        return add(std::move(l));
    }

    int bn(int in, const std::string& key_prefix, const std::string& scope) {
        Layer l;
        l.kind = LayerKind::BatchNorm;
        l.inputs = {in};
        l.weights = bn_bindings(key_prefix, layer(in).out.c);
        l.scope = scope;
        return add(std::move(l));
    }

    // 1x1 conv + BN, no activation.
    int projection(int in, int out_c, int stride, const std::string& prefix, const std::string& scope) {
        const int c = conv(in, out_c, 1, stride, prefix + "/conv", scope);
        return bn(c, prefix + "/bn", scope);
    }

    // ReLU -> 1x1 conv -> BN.
    int relu_conv_bn(int in, int out_c, int stride, const std::string& prefix, const std::string& scope) {
        const int r = relu(in, scope);
        const int c = conv(r, out_c, 1, stride, prefix + "/conv", scope);
        return bn(c, prefix + "/bn", scope);
    }

    int concat(std::vector<int> inputs, const std::string& scope) {
        Layer l;
        l.kind = LayerKind::Concat;
        l.inputs = std::move(inputs);
        l.scope = scope;
        return add(std::move(l));
    }

    int op(const OpEdgeKey& key, int in, int width, int stride, const std::string& scope) {
        Layer l;
        l.inputs = {in};
        l.stride = stride;
        l.scope = scope;
        switch (key.op) {
            case OpKind::SepConv3x3:
            case OpKind::SepConv5x5: {
                const int k = key.op == OpKind::SepConv3x3 ? 3 : 5;
                l.kind = LayerKind::SepConv;
                l.kernel = k;
                const auto c = static_cast<std::size_t>(width);
                const auto kk = static_cast<std::size_t>(k);
                l.weights.push_back({key.key("dw"), Shape{c, 1, kk, kk}, {InitKind::KaimingNormal, kk * kk, true}});
                l.weights.push_back({key.key("pw"), Shape{c, c, 1, 1}, {InitKind::KaimingNormal, c, true}});
                for (auto& b : bn_bindings(key.key("bn"), width)) l.weights.push_back(std::move(b));
                return add(std::move(l));
            }
            case OpKind::MaxPool3x3:
                l.kind = LayerKind::MaxPool;
                l.kernel = 3;
                return add(std::move(l));
            case OpKind::AvgPool3x3:
                l.kind = LayerKind::AvgPool;
                l.kernel = 3;
                return add(std::move(l));
            case OpKind::SkipConnect:
                if (stride == 1) {
                    l.kind = LayerKind::Identity;
                    return add(std::move(l));
                }
                return relu_conv_bn(in, width, stride, key.prefix(), scope);
        }
        throw Error("unknown operation code " + std::to_string(static_cast<int>(key.op)));
    }

    // Builds one cell reading layers (in0, in1). Nodes run at `width`
    // channels; inputs are first mapped to the spatial size `target`.
    int cell(const CellSpec& spec, const CellSite& site, std::array<int, 2> inputs, int width, int stride,
             int target) {
        const std::string role = site.role == CellRole::Conv ? "conv" : "enh";
        const std::string loc = role + "/" + site.location();
        CellRecord rec;
        rec.scope = loc;
        rec.site = site;
        rec.input_layers = inputs;
        rec.width = width;
        rec.stride = stride;

        std::vector<int> node_out(static_cast<std::size_t>(spec.node_count()), -1);
        for (int j = 0; j < 2; ++j) {
            const int src = inputs[static_cast<std::size_t>(j)];
            const int s = stride_between(layer(src).out.h, target);
            const std::string p = loc + "/pre" + std::to_string(j);
            node_out[static_cast<std::size_t>(j)] = relu_conv_bn(src, width, s, p, p);
        }
        for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
            const int node = static_cast<int>(i) + 2;
            const auto& n = spec.nodes[i];
            const std::string nscope = loc + "/n" + std::to_string(node);
            std::array<int, 2> branch{};
            int slot_index = 0;
            for (const auto& [src, opk, slot] : {std::tuple{n.input_a, n.op_a, 'a'}, std::tuple{n.input_b, n.op_b, 'b'}}) {
                OpEdgeKey key{site, node, slot, src, opk};
                const int s = src < 2 ? stride : 1;
                branch[static_cast<std::size_t>(slot_index++)] =
                    op(key, node_out[static_cast<std::size_t>(src)], width, s, nscope + "." + slot);
            }
            Layer sum;
            sum.kind = LayerKind::Add;
            sum.inputs = {branch[0], branch[1]};
            sum.scope = nscope;
            node_out[static_cast<std::size_t>(node)] = add(std::move(sum));
        }

        const auto loose = loose_end_nodes(spec);
        std::vector<int> parts;
        for (int node : loose) parts.push_back(node_out[static_cast<std::size_t>(node)]);
        rec.concat_layer = concat(parts, loc + "/concat");

        const int r = relu(rec.concat_layer, loc + "/combine");
        Layer comb;
        comb.kind = LayerKind::Conv;
        comb.kernel = 1;
        comb.inputs = {r};
        comb.scope = loc + "/combine";
        for (int node : loose) {
            comb.weights.push_back(conv_binding(loc + "/combine/n" + std::to_string(node), width, width, 1));
        }
        const int c = add(std::move(comb));
        rec.output_layer = bn(c, loc + "/combine/bn", loc + "/combine");
        graph_.cells.push_back(rec);
        return rec.output_layer;
    }

private:
    FeatureShape infer(const Layer& l) const {
        auto in = [&](std::size_t i) { return layer(l.inputs.at(i)).out; };
        auto need_inputs = [&](std::size_t n) {
            if (l.inputs.size() != n) {
                throw Error("graph: " + std::string(layer_kind_name(l.kind)) + " layer expects " + std::to_string(n) +
                            " inputs");
            }
        };
        auto down = [&](FeatureShape f) {
            f.h = static_cast<int>(same_out(static_cast<std::size_t>(f.h), static_cast<std::size_t>(l.stride)));
            f.w = static_cast<int>(same_out(static_cast<std::size_t>(f.w), static_cast<std::size_t>(l.stride)));
            return f;
        };
        switch (l.kind) {
            case LayerKind::Input: {
                const auto& s = graph_.cfg.input_shape;
                return {s[0], s[1], s[2]};
            }
            case LayerKind::Conv: {
                need_inputs(1);
                FeatureShape f = in(0);
                std::size_t cin = 0;
                for (const auto& w : l.weights) cin += w.shape.at(1);
                if (l.weights.empty() || static_cast<int>(cin) != f.c) {
                    throw ShapeError("conv2d", "weights cover " + std::to_string(cin) + " input channels, input has " +
                                                   std::to_string(f.c));
                }
                f.c = static_cast<int>(l.weights[0].shape[0]);
                return down(f);
            }
            case LayerKind::SepConv: {
                need_inputs(1);
                FeatureShape f = in(0);
                if (static_cast<int>(l.weights.at(0).shape[0]) != f.c) {
                    throw ShapeError("sep_conv", "depthwise channels differ from input channels");
                }
                f.c = static_cast<int>(l.weights.at(1).shape[0]);
                return down(f);
            }
            case LayerKind::MaxPool:
            case LayerKind::AvgPool:
                need_inputs(1);
                return down(in(0));
            case LayerKind::BatchNorm:
            case LayerKind::Relu:
            case LayerKind::Identity:
                need_inputs(1);
                return in(0);
            case LayerKind::Add: {
                need_inputs(2);
                if (!(in(0) == in(1))) throw ShapeError("add", "operand shapes differ");
                return in(0);
            }
            case LayerKind::Concat: {
                if (l.inputs.empty()) throw Error("graph: concat without inputs");
                FeatureShape f = in(0);
                f.c = 0;
                for (std::size_t i = 0; i < l.inputs.size(); ++i) {
                    const FeatureShape p = in(i);
                    if (p.h != in(0).h || p.w != in(0).w) {
                        throw ShapeError("concat", "spatial sizes differ (" + std::to_string(p.h) + "x" +
                                                       std::to_string(p.w) + " vs " + std::to_string(in(0).h) + "x" +
                                                       std::to_string(in(0).w) + ")");
                    }
                    f.c += p.c;
                }
                return f;
            }
            case LayerKind::GlobalAvgPool:
                need_inputs(1);
                return {in(0).c, 1, 1};
            case LayerKind::Affine: {
                need_inputs(1);
                if (static_cast<int>(l.weights.at(0).shape[1]) != in(0).c) {
                    throw ShapeError("affine", "weight columns differ from input features");
                }
                return {static_cast<int>(l.weights[0].shape[0]), 1, 1};
            }
        }
        throw Error("graph: unknown layer kind");
    }

    ComputeGraph graph_;
};

std::vector<std::string> delta_sources(const ArchConfig& cfg) {
    std::vector<std::string> out;
    for (int i = 1; i < cfg.u; ++i) out.push_back(z_name(i, cfg.k + 1));
    if (out.empty()) out.push_back("stem");
    return out;
}

std::vector<SourceAllocation> allocate(const ArchConfig& cfg, const std::vector<std::string>& taps,
                                       const std::vector<int>& shares, int target_h, const char* consumer) {
    std::vector<SourceAllocation> out;
    for (std::size_t i = 0; i < taps.size(); ++i) {
        SourceAllocation a;
        a.tap = taps[i];
        const FeatureShape s = tap_shape(cfg, a.tap);
        a.source_channels = s.c;
        a.channels = shares[i];
        a.stride = stride_between(s.h, target_h);
        if (a.channels > a.source_channels) {
            throw Error(std::string("channel plan overflow: ") + consumer + " allocates " + std::to_string(a.channels) +
                        " channels to " + a.tap + " which has " + std::to_string(a.source_channels));
        }
        out.push_back(a);
    }
    return out;
}

}  // namespace

std::string_view variant_name(Variant v) {
    switch (v) {
        case Variant::BNAS: return "BNAS";
        case Variant::CCLE: return "CCLE";
        case Variant::CCE: return "CCE";
    }
    return "?";
}

bool variant_from_name(std::string_view name, Variant& out) {
    for (Variant v : {Variant::BNAS, Variant::CCLE, Variant::CCE}) {
        if (variant_name(v) == name) {
            out = v;
            return true;
        }
    }
    return false;
}

std::string_view layer_kind_name(LayerKind kind) { return kLayerNames.at(static_cast<std::size_t>(kind)); }

void validate_arch(const ArchConfig& cfg) {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw Error("architecture: " + msg);
    };
    require(cfg.u >= 1 && cfg.u <= 8, "u must lie in [1, 8], got " + std::to_string(cfg.u));
    require(cfg.k >= 0 && cfg.k <= 32, "k must lie in [0, 32], got " + std::to_string(cfg.k));
    require(cfg.v >= 1 && cfg.v <= 32, "v must lie in [1, 32], got " + std::to_string(cfg.v));
    require(cfg.c0 >= 1 && cfg.c0 <= 1024, "c0 must lie in [1, 1024], got " + std::to_string(cfg.c0));
    require(cfg.num_classes >= 1, "num_classes must be positive");
    for (int d : cfg.input_shape) require(d >= 1, "input_shape entries must be positive");
    require(cfg.delta_budget >= 0 && cfg.gap_conv_budget >= 0 && cfg.gap_enh_budget >= 0,
            "channel budgets must be non-negative");
}

int enhancement_width(const ArchConfig& cfg) { return cfg.c0 * pow2(cfg.u); }

int resolved_delta_budget(const ArchConfig& cfg) {
    return cfg.delta_budget > 0 ? cfg.delta_budget : cfg.c0 * pow2(cfg.u - 1);
}

int resolved_gap_conv_budget(const ArchConfig& cfg) {
    return cfg.gap_conv_budget > 0 ? cfg.gap_conv_budget : cfg.c0 * (pow2(cfg.u) - 1);
}

int resolved_gap_enh_budget(const ArchConfig& cfg) {
    if (cfg.gap_enh_budget > 0) return cfg.gap_enh_budget;
    const int projected = cfg.variant == Variant::CCE ? cfg.v - 1 : cfg.v;
    return projected * cfg.c0 * pow2(cfg.u - 1);
}

std::string canonical_tap(const ArchConfig& cfg, const std::string& tap) {
    TapRef r = parse_tap(tap);
    if (r.kind == 's') return "stem";
    if (r.kind == 'h') {
        if (r.a < 1 || r.a > cfg.v) throw Error("tap '" + tap + "' out of range");
        return tap;
    }
    if (r.a < 1 || r.a > cfg.u || r.b < -1 || r.b > cfg.k + 1) throw Error("tap '" + tap + "' out of range");
    while (r.b <= 0) {
        if (r.a == 1) return "stem";
        r.b = r.b == 0 ? cfg.k + 1 : cfg.k;
        r.a -= 1;
    }
    return z_name(r.a, r.b);
}

FeatureShape tap_shape(const ArchConfig& cfg, const std::string& tap) {
    const TapRef r = parse_tap(canonical_tap(cfg, tap));
    const int h0 = cfg.input_shape[1];
    const int w0 = cfg.input_shape[2];
    int channels = cfg.c0;
    int level = 0;
    if (r.kind == 'z') {
        level = r.b == cfg.k + 1 ? r.a : r.a - 1;
        channels = cfg.c0 * pow2(level);
    } else if (r.kind == 'h') {
        level = cfg.u;
        channels = enhancement_width(cfg);
    }
    return {channels, spatial_at(h0, level), spatial_at(w0, level)};
}

std::string gap_conv_tap(const ArchConfig& cfg, int block) {
    return z_name(block, cfg.k == 0 ? 1 : cfg.k);
}

int ImportancePlan::total_channels() const {
    int t = 0;
    for (const auto& a : conv) t += a.channels;
    for (const auto& a : enh) t += a.projected ? a.channels : a.source_channels;
    return t;
}

std::vector<int> importance_split(int sources, int budget) {
    if (sources < 1) throw Error("importance split needs at least one source");
    if (budget < sources) {
        throw Error("channel budget " + std::to_string(budget) + " is smaller than the " + std::to_string(sources) +
                    " sources it feeds");
    }
    if (sources > 30) throw Error("importance split supports at most 30 sources");
    const long long total_weight = (1LL << sources) - 1;
    std::vector<int> out(static_cast<std::size_t>(sources));
    int used = 0;
    for (int i = 0; i < sources; ++i) {
        out[static_cast<std::size_t>(i)] = static_cast<int>(static_cast<long long>(budget) * (1LL << i) / total_weight);
        used += out[static_cast<std::size_t>(i)];
    }
    out.back() += budget - used;
    for (int a : out) {
        if (a < 1) throw Error("channel budget " + std::to_string(budget) + " leaves a source without channels");
    }
    return out;
}

std::vector<int> equal_split(int sources, int budget) {
    if (sources < 1) throw Error("equal split needs at least one source");
    if (budget < sources) {
        throw Error("channel budget " + std::to_string(budget) + " is smaller than the " + std::to_string(sources) +
                    " sources it feeds");
    }
    std::vector<int> out(static_cast<std::size_t>(sources), budget / sources);
    out.back() += budget % sources;
    return out;
}

ImportancePlan importance_plan(const ArchConfig& cfg, Consumer consumer, int conv_budget, int enh_budget) {
    validate_arch(cfg);
    const int target_h = spatial_at(cfg.input_shape[1], cfg.u);
    ImportancePlan plan;
    if (consumer == Consumer::Enhancement) {
        const auto taps = delta_sources(cfg);
        plan.conv = allocate(cfg, taps, importance_split(static_cast<int>(taps.size()), conv_budget), target_h, "delta");
        return plan;
    }
    std::vector<std::string> conv_taps;
    for (int i = 1; i <= cfg.u; ++i) conv_taps.push_back(gap_conv_tap(cfg, i));
    plan.conv = allocate(cfg, conv_taps, importance_split(cfg.u, conv_budget), target_h, "GAP");

    const int projected = cfg.variant == Variant::CCE ? cfg.v - 1 : cfg.v;
    if (projected > 0) {
        std::vector<std::string> enh_taps;
        for (int j = 1; j <= projected; ++j) enh_taps.push_back(h_name(j));
        plan.enh = allocate(cfg, enh_taps, equal_split(projected, enh_budget), target_h, "GAP");
    }
    if (cfg.variant == Variant::CCE) {
        SourceAllocation last;
        last.tap = h_name(cfg.v);
        last.source_channels = enhancement_width(cfg);
        last.channels = last.source_channels;
        last.projected = false;
        plan.enh.push_back(last);
    }
    return plan;
}

ComputeGraph build_graph(const Genotype& genotype, const ArchConfig& cfg) {
    validate_arch(cfg);
    for (const auto* cell : {&genotype.conv_cell, &genotype.enh_cell}) {
        if (cell->nodes.empty()) throw Error("genotype: cell without computed nodes");
        Grammar grammar;
        grammar.computed_nodes = static_cast<int>(cell->nodes.size());
        const auto violations = validate_cell(*cell, grammar);
        if (!violations.empty()) throw Error("genotype: " + violations.front().message);
    }

    Builder b(genotype, cfg);
    Layer input;
    input.kind = LayerKind::Input;
    input.scope = "input";
    const int in = b.add(std::move(input));
    const int stem_conv = b.conv(in, cfg.c0, 3, 1, "stem/conv", "stem");
    const int stem = b.bn(stem_conv, "stem/bn", "stem");
    b.set_tap(stem, "stem");

    // Convolution blocks: a sliding window over the last two cell outputs.
    int prev2 = stem;
    int prev1 = stem;
    for (int i = 1; i <= cfg.u; ++i) {
        const int width = cfg.c0 * pow2(i - 1);
        const int target = spatial_at(cfg.input_shape[1], i - 1);
        b.graph().taps[z_name(i, -1)] = prev2;
        b.graph().taps[z_name(i, 0)] = prev1;
        for (int h = 1; h <= cfg.k + 1; ++h) {
            const bool broad = h == cfg.k + 1;
            CellSite site{CellRole::Conv, i, h, broad ? PositionClass::ReduceStride : PositionClass::NormalStride};
            const int out = b.cell(genotype.conv_cell, site, {prev2, prev1}, broad ? 2 * width : width, broad ? 2 : 1,
                                   target);
            b.set_tap(out, z_name(i, h));
            prev2 = prev1;
            prev1 = out;
        }
    }

    const ComputeGraph& g = b.graph();
    const int ce = enhancement_width(cfg);
    const int target_u = spatial_at(cfg.input_shape[1], cfg.u);
    const int z_last = g.taps.at(z_name(cfg.u, cfg.k + 1));

    auto delta = [&](int j) {
        const auto plan = importance_plan(cfg, Consumer::Enhancement, resolved_delta_budget(cfg));
        const std::string scope = "enh/e" + std::to_string(j) + "/delta";
        std::vector<int> parts;
        for (const auto& a : plan.conv) {
            parts.push_back(b.projection(b.graph().taps.at(a.tap), a.channels, a.stride,
                                         scope + "/" + source_label(cfg, a.tap), scope));
        }
        return parts.size() == 1 ? parts[0] : b.concat(parts, scope);
    };

    std::vector<int> enh_out;
    for (int j = 1; j <= cfg.v; ++j) {
        std::array<int, 2> inputs{};
        switch (cfg.variant) {
            case Variant::BNAS: inputs = {delta(j), z_last}; break;
            case Variant::CCLE:
                inputs = {b.graph().taps.at(canonical_tap(cfg, z_name(cfg.u, cfg.k))), z_last};
                break;
            case Variant::CCE:
                if (j == 1) {
                    inputs = {delta(j), z_last};
                } else if (j == 2) {
                    inputs = {z_last, enh_out[0]};
                } else {
                    inputs = {enh_out[static_cast<std::size_t>(j - 3)], enh_out[static_cast<std::size_t>(j - 2)]};
                }
                break;
        }
        CellSite site{CellRole::Enh, j, 1, PositionClass::Enhancement};
        const int out = b.cell(genotype.enh_cell, site, inputs, ce, 1, target_u);
        b.set_tap(out, h_name(j));
        enh_out.push_back(out);
    }

    // GAP fusion.
    const auto plan = importance_plan(cfg, Consumer::Gap, resolved_gap_conv_budget(cfg), resolved_gap_enh_budget(cfg));
    std::vector<int> parts;
    for (const auto* group : {&plan.conv, &plan.enh}) {
        for (const auto& a : *group) {
            const int src = b.graph().taps.at(a.tap);
            if (!a.projected) {
                parts.push_back(src);
                continue;
            }
            const std::string prefix = "gap/" + source_label(cfg, a.tap);
            parts.push_back(b.projection(src, a.channels, a.stride, prefix, "gap"));
        }
    }
    const int fused = b.concat(parts, "gap");
    Layer gap;
    gap.kind = LayerKind::GlobalAvgPool;
    gap.inputs = {fused};
    gap.scope = "gap";
    const int o = b.add(std::move(gap));
    b.set_tap(o, "O");

    Layer fc;
    fc.kind = LayerKind::Affine;
    fc.inputs = {o};
    fc.scope = "classifier";
    const auto d = static_cast<std::size_t>(b.layer(o).out.c);
    const auto nc = static_cast<std::size_t>(cfg.num_classes);
    fc.weights = {{"classifier/weight", Shape{nc, d}, {InitKind::KaimingNormal, d, true}},
                  {"classifier/bias", Shape{nc}, {InitKind::Zeros, 1, true}}};
    const int logits = b.add(std::move(fc));
    b.set_tap(logits, "logits");

    ComputeGraph graph = b.take();
    graph.output = logits;

    // Structural assertions.
    int affine_layers = 0;
    for (const auto& l : graph.layers) {
        if (l.kind == LayerKind::Affine) ++affine_layers;
    }
    if (affine_layers != 1 || graph.output != static_cast<int>(graph.layers.size()) - 1 ||
        graph.layers.back().out.c != cfg.num_classes) {
        throw Error("graph: classifier output is not unique");
    }
    for (const auto& rec : graph.cells) {
        if (rec.site.role != CellRole::Conv || rec.stride != 2) continue;
        const FeatureShape out = graph.layers[static_cast<std::size_t>(rec.output_layer)].out;
        const int block_c = cfg.c0 * pow2(rec.site.block - 1);
        const int in_h = spatial_at(cfg.input_shape[1], rec.site.block - 1);
        if (out.c != 2 * block_c || out.h != static_cast<int>(same_out(static_cast<std::size_t>(in_h), 2))) {
            throw Error("graph: broad cell of block " + std::to_string(rec.site.block) + " violates the width/stride contract");
        }
    }
    if (graph.layers[static_cast<std::size_t>(fused)].inputs.size() != static_cast<std::size_t>(cfg.u + cfg.v)) {
        throw Error("graph: GAP fan-in differs from u + v");
    }
    return graph;
}

std::size_t count_parameters(const ComputeGraph& graph) {
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto& l : graph.layers) {
        for (const auto& w : l.weights) {
            if (w.init.trainable && seen.insert(w.key).second) total += shape_numel(w.shape);
        }
    }
    return total;
}

std::vector<std::string> graph_weight_keys(const ComputeGraph& graph) {
    std::set<std::string> keys;
    for (const auto& l : graph.layers) {
        for (const auto& w : l.weights) keys.insert(w.key);
    }
    return {keys.begin(), keys.end()};
}

std::string dump_graph(const ComputeGraph& graph) {
    const auto& c = graph.cfg;
    std::ostringstream os;
    os << "# broadnas graph v1\n";
    os << "# variant=" << variant_name(c.variant) << " u=" << c.u << " k=" << c.k << " v=" << c.v << " c0=" << c.c0
       << " classes=" << c.num_classes << " input=" << c.input_shape[0] << 'x' << c.input_shape[1] << 'x'
       << c.input_shape[2] << " params=" << count_parameters(graph) << '\n';
    for (const auto& l : graph.layers) {
        os << l.id << ' ' << layer_kind_name(l.kind);
        if (l.kernel > 0) os << " k=" << l.kernel;
        if (l.kind != LayerKind::Input && l.kind != LayerKind::Concat && l.kind != LayerKind::Add) os << " s=" << l.stride;
        os << " in=[";
        for (std::size_t i = 0; i < l.inputs.size(); ++i) os << (i ? "," : "") << l.inputs[i];
        os << ']';
        if (!l.weights.empty()) {
            os << " w=[";
            for (std::size_t i = 0; i < l.weights.size(); ++i) {
                os << (i ? "," : "") << l.weights[i].key << ':' << shape_str(l.weights[i].shape);
            }
            os << ']';
        }
        os << " out=" << l.out.c << 'x' << l.out.h << 'x' << l.out.w << " scope=" << l.scope;
        if (!l.tap.empty()) os << " tap=" << l.tap;
        os << '\n';
    }
    return os.str();
}

}  // namespace broadnas
