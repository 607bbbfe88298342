// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the code paths it checks beyond reading the
// public data structures.

#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "broadnas/autodiff.hpp"
#include "broadnas/broad_builder.hpp"

namespace oracle {

using broadnas::Tensor;

/// Random tensor with entries uniform in [lo, hi].
Tensor uniform(const broadnas::Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);
/// Entries in [lo, hi] whose magnitudes stay at least `gap` away from zero.
Tensor away_from_zero(const broadnas::Shape& shape, std::mt19937_64& rng, double gap = 0.05);
/// Distinct values (a shuffled grid with step `step`): no ties for max-pool.
Tensor distinct(const broadnas::Shape& shape, std::mt19937_64& rng, double step = 0.01);

struct GradResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Compares reverse-mode gradients of sum(f(inputs) * R), R random, with
/// central differences for every input flagged in `differentiate`.
/// Relative error is ||analytic - numeric|| / max(||analytic||, ||numeric||).
GradResult check_gradients(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                           const std::vector<bool>& differentiate, std::mt19937_64& rng, double h = 1e-5);

struct PrimitiveCase {
    std::string name;
    broadnas::PrimitiveKind kind;
    std::vector<Tensor> inputs;
    std::vector<bool> differentiate;
    broadnas::PrimitiveAttrs attrs;
};

/// At least one randomized case per primitive kind, with inputs kept away
/// from kinks (ReLU at zero, max-pool ties).
std::vector<PrimitiveCase> primitive_cases(std::mt19937_64& rng);

GradResult check_case(const PrimitiveCase& c, std::mt19937_64& rng);

/// Violations of the broad wiring rules, found by walking layer edges.
std::vector<std::string> topology_violations(const broadnas::ComputeGraph& graph);

/// Trainable parameter count from per-layer arithmetic on the configuration
/// and genotype alone.
std::size_t parameter_count(const broadnas::Genotype& genotype, const broadnas::ArchConfig& cfg);

/// Computed nodes no other node reads.
std::vector<int> loose_ends(const broadnas::CellSpec& cell);

/// ceil(extent / 2^level)
int spatial(int extent, int level);

}  // namespace oracle
