// SPDX-License-Identifier: Apache-2.0

#include "broadnas/executor.hpp"

#include <map>

namespace broadnas {

BoundModel::BoundModel(std::shared_ptr<const ComputeGraph> graph, std::vector<std::vector<Tensor>> weights)
    : graph_(std::move(graph)), weights_(std::move(weights)) {
    const auto& layers = graph_->layers;
    live_.assign(layers.size(), false);
    if (graph_->output >= 0) live_[static_cast<std::size_t>(graph_->output)] = true;
    for (std::size_t i = layers.size(); i-- > 0;) {
        if (!live_[i]) continue;
        for (int in : layers[i].inputs) live_[static_cast<std::size_t>(in)] = true;
    }
}

std::vector<Tensor> BoundModel::forward_layers(const Tensor& batch, BnMode mode) const {
    const auto& cfg = graph_->cfg;
    if (batch.rank() != 4 || static_cast<int>(batch.dim(1)) != cfg.input_shape[0] ||
        static_cast<int>(batch.dim(2)) != cfg.input_shape[1] || static_cast<int>(batch.dim(3)) != cfg.input_shape[2]) {
        throw ShapeError("forward", "batch shape " + shape_str(batch.shape()) + " does not match input (N," +
                                        std::to_string(cfg.input_shape[0]) + "," + std::to_string(cfg.input_shape[1]) +
                                        "," + std::to_string(cfg.input_shape[2]) + ")");
    }
    const auto& layers = graph_->layers;
    std::vector<Tensor> out(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!live_[i]) continue;
        const Layer& l = layers[i];
        auto w = weights_[i];
        auto x = [&](std::size_t j) -> const Tensor& { return out[static_cast<std::size_t>(l.inputs.at(j))]; };
        const auto stride = static_cast<std::size_t>(l.stride);
        switch (l.kind) {
            case LayerKind::Input: out[i] = batch; break;
            case LayerKind::Conv:
                out[i] = conv2d(x(0), w.size() == 1 ? w[0] : concat(w), stride);
                break;
            case LayerKind::SepConv: {
                SepConvWeights sw{w[0], w[1], w[2], w[3], w[4], w[5]};
                out[i] = sep_conv(x(0), sw, stride, mode);
                break;
            }
            case LayerKind::BatchNorm: out[i] = batch_norm(x(0), w[0], w[1], w[2], w[3], mode); break;
            case LayerKind::Relu: out[i] = relu(x(0)); break;
            case LayerKind::MaxPool: out[i] = max_pool3x3(x(0), stride); break;
            case LayerKind::AvgPool: out[i] = avg_pool3x3(x(0), stride); break;
            case LayerKind::Identity: out[i] = identity(x(0)); break;
            case LayerKind::Add: out[i] = add(x(0), x(1)); break;
            case LayerKind::Concat: {
                if (l.inputs.size() == 1) {
                    out[i] = x(0);
                    break;
                }
                std::vector<Tensor> parts;
                for (std::size_t j = 0; j < l.inputs.size(); ++j) parts.push_back(x(j));
                out[i] = concat(parts);
                break;
            }
            case LayerKind::GlobalAvgPool: out[i] = global_avg_pool(x(0)); break;
            case LayerKind::Affine: out[i] = affine(x(0), w[0], w[1]); break;
        }
    }
    return out;
}

Tensor BoundModel::forward(const Tensor& batch, BnMode mode) const {
    auto outs = forward_layers(batch, mode);
    return outs[static_cast<std::size_t>(graph_->output)];
}

std::vector<std::pair<std::string, Tensor>> BoundModel::parameters() const {
    std::map<std::string, Tensor> unique;
    const auto& layers = graph_->layers;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!live_[i]) continue;
        for (std::size_t b = 0; b < layers[i].weights.size(); ++b) {
            if (layers[i].weights[b].init.trainable) unique.emplace(layers[i].weights[b].key, weights_[i][b]);
        }
    }
    return {unique.begin(), unique.end()};
}

BoundModel activate(WeightStore& store, const ComputeGraph& graph) {
    std::vector<std::vector<Tensor>> weights(graph.layers.size());
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        for (const auto& b : graph.layers[i].weights) weights[i].push_back(store.get_or_init(b.key, b.shape, b.init));
    }
    return BoundModel(std::make_shared<const ComputeGraph>(graph), std::move(weights));
}

BoundModel activate(const WeightStore& store, const ComputeGraph& graph, MissingKeys policy) {
    if (policy == MissingKeys::Initialize) {
        throw Error("activate: a read-only store cannot initialize missing keys");
    }
    std::map<std::string, Tensor> overlay;
    std::vector<std::vector<Tensor>> weights(graph.layers.size());
    for (std::size_t i = 0; i < graph.layers.size(); ++i) {
        for (const auto& b : graph.layers[i].weights) {
            if (const ParamEntry* e = store.find(b.key)) {
                if (e->value.shape() != b.shape) {
                    throw Error("weight key '" + b.key + "' is bound with shape " + shape_str(e->value.shape()) +
                                ", requested " + shape_str(b.shape));
                }
                weights[i].push_back(e->value);
                continue;
            }
            if (policy == MissingKeys::Reject) throw Error("missing weight key '" + b.key + "'");
            auto it = overlay.find(b.key);
            if (it == overlay.end()) {
                it = overlay.emplace(b.key, WeightStore::initial_value(store.seed(), b.key, b.shape, b.init)).first;
            }
            weights[i].push_back(it->second);
        }
    }
    return BoundModel(std::make_shared<const ComputeGraph>(graph), std::move(weights));
}

Tensor forward_classify(const ComputeGraph& graph, const WeightStore& store, const Tensor& batch, BnMode mode) {
    if (mode == BnMode::Train) throw Error("forward_classify: training mode needs a mutable store");
    return activate(store, graph, MissingKeys::Reject).forward(batch, mode);
}

}  // namespace broadnas
