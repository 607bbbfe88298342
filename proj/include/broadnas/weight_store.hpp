// SPDX-License-Identifier: Apache-2.0
//
// Shared parameter bank. Every child architecture draws its parameters from
// one store keyed by structural position, so two children that make the same
// choice at the same place train the same buffer.
//
// Key grammar (see docs/weight_keys.md):
//   op edge     {role}/{location}/n{node}.{slot}/s{source}/{op}/{part}
//   structural  stem/..., {role}/{location}/pre{0,1}/..., .../combine/...,
//               enh/e{j}/delta/b{i}/..., gap/..., classifier/...
// where location is b{i}.c{h}.normal, b{i}.c{h}.reduce or e{j}.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "broadnas/cell_space.hpp"
#include "broadnas/tensor.hpp"

namespace broadnas {

enum class CellRole { Conv, Enh };

enum class PositionClass { NormalStride, ReduceStride, Enhancement };

/// Where a cell instance sits in a broad architecture.
struct CellSite {
    CellRole role = CellRole::Conv;
    int block = 1;  // convolution block i or enhancement block j
    int index = 1;  // cell index h within a convolution block
    PositionClass position = PositionClass::NormalStride;

    std::string location() const;
};

/// One operation on one incoming edge of a computed node.
struct OpEdgeKey {
    CellSite site;
    int node = 2;
    char slot = 'a';
    int source = 0;
    OpKind op = OpKind::SepConv3x3;

    /// Full key of one tensor ("dw", "pw", "bn.gamma", ...) of this edge.
    std::string key(std::string_view part) const;
    /// Prefix shared by all tensors of this edge.
    std::string prefix() const;
};

enum class InitKind { KaimingNormal, Zeros, Ones };

struct InitSpec {
    InitKind kind = InitKind::KaimingNormal;
    std::size_t fan_in = 1;
    bool trainable = true;
};

struct ParamEntry {
    Tensor value;
    std::vector<double> momentum;  // empty until the first optimizer step
    bool trainable = true;
};

class WeightStore {
public:
    explicit WeightStore(std::uint64_t seed = 0) : seed_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    /// Returns the buffer bound to `key`, creating it from (seed, key) on
    /// first use. Throws Error when `shape` conflicts with the binding.
    Tensor get_or_init(const std::string& key, const Shape& shape, const InitSpec& init);

    /// Value get_or_init would create for `key`; independent of call order.
    static Tensor initial_value(std::uint64_t seed, const std::string& key, const Shape& shape,
                                const InitSpec& init);

    bool contains(const std::string& key) const { return entries_.count(key) != 0; }
    ParamEntry* find(const std::string& key);
    const ParamEntry* find(const std::string& key) const;
    const std::map<std::string, ParamEntry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }

    /// Opaque named sections carried in the checkpoint (controller, search state).
    void set_section(const std::string& name, std::string bytes) { sections_[name] = std::move(bytes); }
    const std::string* section(const std::string& name) const;
    const std::map<std::string, std::string>& sections() const noexcept { return sections_; }

    /// Hash over parameter values, momentum buffers and flags.
    std::uint64_t digest() const;
    std::map<std::string, std::uint64_t> key_digests() const;

    /// Deep copy: no buffer is shared with the original.
    WeightStore clone() const;

    /// Binding used when a parameter is restored from a checkpoint.
    void insert(const std::string& key, ParamEntry entry);

private:
    std::uint64_t seed_;
    std::map<std::string, ParamEntry> entries_;
    std::map<std::string, std::string> sections_;
};

std::uint64_t entry_digest(const ParamEntry& entry);

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string checkpoint_bytes(const WeightStore& store);
WeightStore checkpoint_from_bytes(std::string_view bytes);

void save_checkpoint(const WeightStore& store, const std::filesystem::path& path);
WeightStore load_checkpoint(const std::filesystem::path& path);

}  // namespace broadnas
