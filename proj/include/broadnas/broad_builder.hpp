// SPDX-License-Identifier: Apache-2.0
//
// Compiles a genotype into a broad convolutional architecture.
//
// Layout shared by all variants:
//   stem: 3x3 conv + BN, c0 channels.
//   u convolution blocks. Block i holds k deep cells (stride 1, width
//   c0 * 2^(i-1)) and one broad cell (stride 2, twice the width). Cell h of a
//   block reads the outputs of cells h-2 and h-1; the first two cells of block
//   i >= 2 read the last deep cell and the broad cell of block i-1, block 1
//   reads the stem twice.
//   v enhancement blocks, one enhancement cell each (stride 1, width
//   c0 * 2^u), fed per variant:
//     BNAS  every block: (delta(broad outputs of blocks 1..u-1), Z(u, k+1))
//     CCLE  every block: (Z(u, k), Z(u, k+1))
//     CCE   block 1 as BNAS, block 2: (Z(u, k+1), H1), block j: (H(j-2), H(j-1))
//   where delta projects each source with a strided 1x1 conv + BN whose width
//   follows the importance plan, then concatenates.
//   GAP fusion: each block's last deep cell (its broad cell when k = 0) and
//   every enhancement block pass through a strided 1x1 projection, are
//   concatenated, globally averaged and mapped by one affine layer to logits.
//   In CCE the last enhancement block enters unprojected.
//
// Tap names: "stem", "Z{i}_{h}" (h = -1 .. k+1, with -1 and 0 aliasing the
// previous block's taps), "H{j}", "O" (GAP vector), "logits".

#pragma once

#include <array>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "broadnas/cell_space.hpp"
#include "broadnas/weight_store.hpp"

namespace broadnas {

enum class Variant { BNAS, CCLE, CCE };

std::string_view variant_name(Variant v);
bool variant_from_name(std::string_view name, Variant& out);

struct ArchConfig {
    Variant variant = Variant::BNAS;
    int u = 2;  // convolution blocks
    int k = 0;  // deep cells per block
    int v = 2;  // enhancement blocks
    int c0 = 16;
    int num_classes = 10;
    std::array<int, 3> input_shape{3, 32, 32};
    // Channel budgets; 0 selects the automatic value.
    int delta_budget = 0;
    int gap_conv_budget = 0;
    int gap_enh_budget = 0;

    bool operator==(const ArchConfig&) const = default;
};

/// Throws Error describing the first violated constraint.
void validate_arch(const ArchConfig& cfg);

int resolved_delta_budget(const ArchConfig& cfg);
int resolved_gap_conv_budget(const ArchConfig& cfg);
int resolved_gap_enh_budget(const ArchConfig& cfg);
/// Width of every enhancement cell (= channels of the last broad cell).
int enhancement_width(const ArchConfig& cfg);

struct FeatureShape {
    int c = 0, h = 0, w = 0;
    bool operator==(const FeatureShape&) const = default;
};

/// Shape of a named tap, derived from the configuration alone.
FeatureShape tap_shape(const ArchConfig& cfg, const std::string& tap);
/// Canonical tap for aliases such as "Z2_0" (which is "Z1_1" for k = 0).
std::string canonical_tap(const ArchConfig& cfg, const std::string& tap);
/// Tap each GAP convolution source reads for block i (Z{i}_k, or the broad
/// output when k = 0).
std::string gap_conv_tap(const ArchConfig& cfg, int block);

// ---- importance plan --------------------------------------------------------

enum class Consumer { Enhancement, Gap };

struct SourceAllocation {
    std::string tap;
    int source_channels = 0;
    int channels = 0;
    int stride = 1;
    bool projected = true;
};

struct ImportancePlan {
    std::vector<SourceAllocation> conv;
    std::vector<SourceAllocation> enh;

    int total_channels() const;
};

/// Splits `budget` over sources weighted 1, 2, 4, ...; floor rounding with the
/// remainder assigned to the last (deepest) source.
std::vector<int> importance_split(int sources, int budget);
/// Equal shares, remainder to the last source.
std::vector<int> equal_split(int sources, int budget);

/// Channel allocation for the 1x1 projections feeding one consumer. For
/// Consumer::Enhancement only `conv_budget` is used (the delta sources).
ImportancePlan importance_plan(const ArchConfig& cfg, Consumer consumer, int conv_budget, int enh_budget = 0);

// ---- compiled graph ---------------------------------------------------------

enum class LayerKind {
    Input,
    Conv,
    SepConv,
    BatchNorm,
    Relu,
    MaxPool,
    AvgPool,
    Identity,
    Add,
    Concat,
    GlobalAvgPool,
    Affine,
};

std::string_view layer_kind_name(LayerKind kind);

struct WeightBinding {
    std::string key;
    Shape shape;
    InitSpec init;
};

/// One layer. Conv layers with several bindings concatenate them along the
/// input-channel axis. SepConv bindings are (dw, pw, gamma, beta, mean, var);
/// BatchNorm bindings are (gamma, beta, mean, var); Affine is (weight, bias).
struct Layer {
    int id = 0;
    LayerKind kind = LayerKind::Input;
    int kernel = 0;
    int stride = 1;
    std::vector<int> inputs;
    std::vector<WeightBinding> weights;
    FeatureShape out;
    std::string scope;
    std::string tap;
};

struct CellRecord {
    std::string scope;
    CellSite site;
    std::array<int, 2> input_layers{};  // layers feeding cell nodes 0 and 1
    int output_layer = 0;
    int concat_layer = 0;  // concatenation of loose ends
    int width = 0;
    int stride = 1;
};

struct ComputeGraph {
    ArchConfig cfg;
    Genotype genotype;
    std::vector<Layer> layers;
    std::map<std::string, int> taps;
    std::vector<CellRecord> cells;
    int output = -1;

    const Layer& tap(const std::string& name) const { return layers.at(static_cast<std::size_t>(taps.at(name))); }
};

/// Throws Error on an invalid genotype or configuration, or when a channel
/// allocation exceeds its source width.
ComputeGraph build_graph(const Genotype& genotype, const ArchConfig& cfg);

/// Sum of element counts over unique trainable weight keys.
std::size_t count_parameters(const ComputeGraph& graph);

/// Unique weight keys referenced by the graph (trainable and buffers).
std::vector<std::string> graph_weight_keys(const ComputeGraph& graph);

/// Deterministic one-layer-per-line listing.
std::string dump_graph(const ComputeGraph& graph);

}  // namespace broadnas
