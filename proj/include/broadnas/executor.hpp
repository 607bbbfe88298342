// SPDX-License-Identifier: Apache-2.0
//
// Binding a compiled graph to shared weights and running it.

#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "broadnas/autodiff.hpp"
#include "broadnas/broad_builder.hpp"
#include "broadnas/weight_store.hpp"

namespace broadnas {

enum class MissingKeys {
    Initialize,  // create them in the store
    Overlay,     // use private initial values; the store is left unchanged
    Reject,      // throw Error naming the key
};

/// A graph whose weight bindings alias store buffers. Layers that cannot
/// reach the classifier (e.g. the projection of a cell input no node reads)
/// are skipped.
class BoundModel {
public:
    BoundModel(std::shared_ptr<const ComputeGraph> graph, std::vector<std::vector<Tensor>> weights);

    const ComputeGraph& graph() const noexcept { return *graph_; }

    /// Logits (N, num_classes) for a (N, C, H, W) batch. Records on the
    /// active tape when one is installed.
    Tensor forward(const Tensor& batch, BnMode mode) const;

    /// Every live layer's output (undefined tensors for skipped layers).
    std::vector<Tensor> forward_layers(const Tensor& batch, BnMode mode) const;

    /// Unique trainable parameters used by live layers, sorted by key.
    std::vector<std::pair<std::string, Tensor>> parameters() const;

    const std::vector<bool>& live() const noexcept { return live_; }

private:
    std::shared_ptr<const ComputeGraph> graph_;
    std::vector<std::vector<Tensor>> weights_;
    std::vector<bool> live_;
};

BoundModel activate(WeightStore& store, const ComputeGraph& graph);
BoundModel activate(const WeightStore& store, const ComputeGraph& graph, MissingKeys policy);

/// Inference-mode logits with every key required to exist in `store`.
Tensor forward_classify(const ComputeGraph& graph, const WeightStore& store, const Tensor& batch,
                        BnMode mode = BnMode::Inference);

}  // namespace broadnas
