// SPDX-License-Identifier: Apache-2.0

#include "broadnas/cell_space.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <sstream>

namespace broadnas {

namespace {

constexpr std::array<std::string_view, kNumOpKinds> kOpNames{"sep3", "sep5", "max3", "avg3", "skip"};

CellSpec decode_cell(std::span<const int> tokens) {
    CellSpec cell;
    const int nodes = static_cast<int>(tokens.size()) / 4;
    for (int i = 0; i < nodes; ++i) {
        NodeSpec n;
        n.input_a = tokens[4 * i];
        n.op_a = static_cast<OpKind>(tokens[4 * i + 1]);
        n.input_b = tokens[4 * i + 2];
        n.op_b = static_cast<OpKind>(tokens[4 * i + 3]);
        cell.nodes.push_back(n);
    }
    return cell;
}

void encode_cell(const CellSpec& cell, TokenSequence& out) {
    for (const auto& n : cell.nodes) {
        out.push_back(n.input_a);
        out.push_back(static_cast<int>(n.op_a));
        out.push_back(n.input_b);
        out.push_back(static_cast<int>(n.op_b));
    }
}

}  // namespace

std::string_view op_name(OpKind op) { return kOpNames.at(static_cast<std::size_t>(op)); }

bool op_from_name(std::string_view name, OpKind& out) {
    for (std::size_t i = 0; i < kOpNames.size(); ++i) {
        if (kOpNames[i] == name) {
            out = static_cast<OpKind>(i);
            return true;
        }
    }
    return false;
}

Genotype decode_tokens(std::span<const int> tokens, const Grammar& grammar) {
    const int expected = grammar.sequence_length();
    if (static_cast<int>(tokens.size()) != expected) {
        throw Error("token sequence has length " + std::to_string(tokens.size()) + ", expected " +
                    std::to_string(expected));
    }
    if (grammar.num_cells != 2) throw Error("genotypes hold exactly two cells");
    for (int pos = 0; pos < expected; ++pos) {
        const int range = grammar.token_range(pos);
        if (tokens[pos] < 0 || tokens[pos] >= range) {
            throw Error("token at position " + std::to_string(pos) + " is " + std::to_string(tokens[pos]) +
                        ", legal range [0, " + std::to_string(range - 1) + "]");
        }
    }
    const auto per_cell = static_cast<std::size_t>(grammar.tokens_per_cell());
    Genotype g;
    g.conv_cell = decode_cell(tokens.subspan(0, per_cell));
    g.enh_cell = decode_cell(tokens.subspan(per_cell, per_cell));
    return g;
}

TokenSequence encode_genotype(const Genotype& genotype) {
    TokenSequence out;
    out.reserve(4 * (genotype.conv_cell.nodes.size() + genotype.enh_cell.nodes.size()));
    encode_cell(genotype.conv_cell, out);
    encode_cell(genotype.enh_cell, out);
    return out;
}

std::vector<CellViolation> validate_cell(const CellSpec& spec, const Grammar& grammar) {
    std::vector<CellViolation> out;
    if (static_cast<int>(spec.nodes.size()) != grammar.computed_nodes) {
        out.push_back({ViolationKind::NodeCount, -1,
                       "cell has " + std::to_string(spec.nodes.size()) + " computed nodes, expected " +
                           std::to_string(grammar.computed_nodes)});
    }
    for (std::size_t i = 0; i < spec.nodes.size(); ++i) {
        const int node = static_cast<int>(i) + 2;
        const auto& n = spec.nodes[i];
        for (const auto& [input, slot] : {std::pair{n.input_a, 'a'}, std::pair{n.input_b, 'b'}}) {
            if (input < 0) {
                out.push_back({ViolationKind::InputRange, node,
                               "node " + std::to_string(node) + " input_" + slot + " is negative"});
            } else if (input >= node) {
                out.push_back({ViolationKind::Acyclicity, node,
                               "node " + std::to_string(node) + " input_" + slot + " reads node " +
                                   std::to_string(input) + " which is not earlier"});
            }
        }
        for (const auto& [op, slot] : {std::pair{n.op_a, 'a'}, std::pair{n.op_b, 'b'}}) {
            const int code = static_cast<int>(op);
            if (code < 0 || code >= grammar.num_ops) {
                out.push_back({ViolationKind::OpRange, node,
                               "node " + std::to_string(node) + " op_" + slot + " code " + std::to_string(code) +
                                   " outside [0, " + std::to_string(grammar.num_ops - 1) + "]"});
            }
        }
    }
    return out;
}

std::vector<int> loose_end_nodes(const CellSpec& spec) {
    const int total = spec.node_count();
    std::vector<bool> used(static_cast<std::size_t>(total), false);
    for (const auto& n : spec.nodes) {
        if (n.input_a >= 0 && n.input_a < total) used[n.input_a] = true;
        if (n.input_b >= 0 && n.input_b < total) used[n.input_b] = true;
    }
    std::vector<int> out;
    for (int node = 2; node < total; ++node) {
        if (!used[node]) out.push_back(node);
    }
    return out;
}

ParseError::ParseError(int line, int column, const std::string& message)
    : Error("genotype:" + std::to_string(line) + ":" + std::to_string(column) + ": " + message),
      line_(line),
      column_(column) {}

std::string serialize_genotype(const Genotype& genotype) {
    std::ostringstream os;
    os << "# broadnas genotype v1\n";
    for (const auto& [label, cell] : {std::pair<const char*, const CellSpec*>{"conv", &genotype.conv_cell},
                                      std::pair<const char*, const CellSpec*>{"enh", &genotype.enh_cell}}) {
        for (std::size_t i = 0; i < cell->nodes.size(); ++i) {
            const auto& n = cell->nodes[i];
            os << label << " n" << (i + 2) << " = " << op_name(n.op_a) << '(' << n.input_a << ") + "
               << op_name(n.op_b) << '(' << n.input_b << ")\n";
        }
    }
    return os.str();
}

namespace {

// Cursor over one line with 1-based column reporting.
class LineCursor {
public:
    LineCursor(std::string_view line, int line_no) : line_(line), line_no_(line_no) {}

    void skip_space() {
        while (pos_ < line_.size() && (line_[pos_] == ' ' || line_[pos_] == '\t')) ++pos_;
    }
    int column() const { return static_cast<int>(pos_) + 1; }
    bool at_end() {
        skip_space();
        return pos_ >= line_.size();
    }
    [[noreturn]] void fail(const std::string& msg) const { throw ParseError(line_no_, column(), msg); }

    std::string_view word() {
        skip_space();
        const std::size_t start = pos_;
        while (pos_ < line_.size() && (std::isalnum(static_cast<unsigned char>(line_[pos_])) || line_[pos_] == '_')) {
            ++pos_;
        }
        if (start == pos_) fail("expected a name");
        return line_.substr(start, pos_ - start);
    }
    int integer() {
        skip_space();
        const std::size_t start = pos_;
        while (pos_ < line_.size() && std::isdigit(static_cast<unsigned char>(line_[pos_]))) ++pos_;
        if (start == pos_) fail("expected an integer");
        if (pos_ - start > 3) fail("integer too large");
        return std::stoi(std::string(line_.substr(start, pos_ - start)));
    }
    void expect(char c) {
        skip_space();
        if (pos_ >= line_.size() || line_[pos_] != c) fail(std::string("expected '") + c + "'");
        ++pos_;
    }
    void rewind(int column) { pos_ = static_cast<std::size_t>(column - 1); }

private:
    std::string_view line_;
    int line_no_;
    std::size_t pos_ = 0;
};

void parse_operand(LineCursor& cur, OpKind& op, int& input) {
    cur.skip_space();
    const int col = cur.column();
    const auto name = cur.word();
    if (!op_from_name(name, op)) {
        cur.rewind(col);
        cur.fail("unknown operation '" + std::string(name) + "'");
    }
    cur.expect('(');
    input = cur.integer();
    cur.expect(')');
}

}  // namespace

Genotype parse_genotype(std::string_view text) {
    Genotype g;
    int line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t end = std::min(text.find('\n', start), text.size());
        std::string_view line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        LineCursor cur(line, line_no);
        if (cur.at_end()) continue;
        cur.skip_space();
        if (line[static_cast<std::size_t>(cur.column() - 1)] == '#') continue;

        const auto label = cur.word();
        CellSpec* cell = nullptr;
        if (label == "conv") {
            cell = &g.conv_cell;
        } else if (label == "enh") {
            cell = &g.enh_cell;
        } else {
            cur.rewind(1);
            cur.skip_space();
            cur.fail("unknown cell label '" + std::string(label) + "' (expected conv or enh)");
        }
        cur.skip_space();
        const int node_col = cur.column();
        const auto node_word = cur.word();
        if (node_word.size() < 2 || node_word[0] != 'n' ||
            !std::all_of(node_word.begin() + 1, node_word.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
            cur.rewind(node_col);
            cur.fail("expected node name like n2");
        }
        const int node = std::stoi(std::string(node_word.substr(1)));
        const int expected_node = 2 + static_cast<int>(cell->nodes.size());
        if (node != expected_node) {
            cur.rewind(node_col);
            cur.fail("expected node n" + std::to_string(expected_node) + ", got n" + std::to_string(node));
        }
        cur.expect('=');
        NodeSpec spec;
        parse_operand(cur, spec.op_a, spec.input_a);
        cur.expect('+');
        parse_operand(cur, spec.op_b, spec.input_b);
        if (!cur.at_end()) cur.fail("unexpected trailing text");
        for (int input : {spec.input_a, spec.input_b}) {
            if (input >= node) {
                throw ParseError(line_no, 1,
                                 "node n" + std::to_string(node) + " reads n" + std::to_string(input) +
                                     " which is not earlier");
            }
        }
        cell->nodes.push_back(spec);
    }
    if (g.conv_cell.nodes.empty() || g.enh_cell.nodes.empty()) {
        throw ParseError(line_no, 1, "genotype needs both conv and enh cells");
    }
    return g;
}

Genotype random_genotype(std::mt19937_64& rng, const Grammar& grammar) {
    TokenSequence tokens(static_cast<std::size_t>(grammar.sequence_length()));
    for (int pos = 0; pos < grammar.sequence_length(); ++pos) {
        std::uniform_int_distribution<int> dist(0, grammar.token_range(pos) - 1);
        tokens[pos] = dist(rng);
    }
    return decode_tokens(tokens, grammar);
}

std::uint64_t cell_space_size(const Grammar& grammar) {
    std::uint64_t total = 1;
    for (int n = 2; n < 2 + grammar.computed_nodes; ++n) {
        const auto choices = static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(grammar.num_ops);
        total *= choices * choices;
    }
    return total;
}

double sequence_space_size(const Grammar& grammar) {
    return std::pow(static_cast<double>(cell_space_size(grammar)), grammar.num_cells);
}

}  // namespace broadnas
