// SPDX-License-Identifier: Apache-2.0
//
// Micro search space: cells, genotypes and their token encoding.
//
// A cell has two input nodes (0 and 1) followed by computed nodes 2, 3, ...
// Each computed node reads two earlier nodes through one candidate operation
// each and sums the results. Unused computed nodes ("loose ends") are joined
// into the cell output.
//
// Token order per computed node is (input_a, op_a, input_b, op_b); the
// convolution cell's tokens precede the enhancement cell's.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "broadnas/tensor.hpp"

namespace broadnas {

enum class OpKind : int {
    SepConv3x3 = 0,
    SepConv5x5 = 1,
    MaxPool3x3 = 2,
    AvgPool3x3 = 3,
    SkipConnect = 4,
};

inline constexpr int kNumOpKinds = 5;

/// Short names used by the genotype text format: sep3, sep5, max3, avg3, skip.
std::string_view op_name(OpKind op);
/// Returns false when `name` is not an operation.
bool op_from_name(std::string_view name, OpKind& out);

/// Size of the grammar. The default is the full search space: five computed
/// nodes (seven in total), five operations, two cells per genotype.
struct Grammar {
    int computed_nodes = 5;
    int num_ops = kNumOpKinds;
    int num_cells = 2;

    static Grammar reduced() { return Grammar{2, 2, 2}; }

    int tokens_per_cell() const { return 4 * computed_nodes; }
    int sequence_length() const { return num_cells * tokens_per_cell(); }
    bool is_op_position(int position) const { return position % 2 == 1; }
    /// Node index (2-based) the token at `position` belongs to.
    int node_of(int position) const { return 2 + (position % tokens_per_cell()) / 4; }
    /// Number of legal values at `position`.
    int token_range(int position) const { return is_op_position(position) ? num_ops : node_of(position); }

    bool operator==(const Grammar&) const = default;
};

struct NodeSpec {
    int input_a = 0;
    OpKind op_a = OpKind::SepConv3x3;
    int input_b = 0;
    OpKind op_b = OpKind::SepConv3x3;

    bool operator==(const NodeSpec&) const = default;
};

/// nodes[i] describes computed node i + 2.
struct CellSpec {
    std::vector<NodeSpec> nodes;

    int node_count() const { return 2 + static_cast<int>(nodes.size()); }
    bool operator==(const CellSpec&) const = default;
};

struct Genotype {
    CellSpec conv_cell;
    CellSpec enh_cell;

    bool operator==(const Genotype&) const = default;
};

using TokenSequence = std::vector<int>;

/// Throws Error naming the first offending position.
Genotype decode_tokens(std::span<const int> tokens, const Grammar& grammar = {});
TokenSequence encode_genotype(const Genotype& genotype);

enum class ViolationKind { NodeCount, InputRange, Acyclicity, OpRange };

struct CellViolation {
    ViolationKind kind;
    int node;  // -1 for whole-cell violations
    std::string message;
};

std::vector<CellViolation> validate_cell(const CellSpec& spec, const Grammar& grammar = {});

/// Sorted computed nodes that no other node reads. Never empty for a valid
/// cell: the last node has no possible consumer.
std::vector<int> loose_end_nodes(const CellSpec& spec);

/// Raised by parse_genotype with a 1-based line and column.
class ParseError : public Error {
public:
    ParseError(int line, int column, const std::string& message);
    int line() const noexcept { return line_; }
    int column() const noexcept { return column_; }

private:
    int line_;
    int column_;
};

std::string serialize_genotype(const Genotype& genotype);
Genotype parse_genotype(std::string_view text);

Genotype random_genotype(std::mt19937_64& rng, const Grammar& grammar = {});

/// Distinct token sequences for one cell: product over computed nodes n of (n * ops)^2.
std::uint64_t cell_space_size(const Grammar& grammar);
/// Distinct token sequences for a whole genotype (as a double: the full
/// grammar exceeds 64 bits).
double sequence_space_size(const Grammar& grammar);

}  // namespace broadnas
