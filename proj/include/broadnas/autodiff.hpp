// SPDX-License-Identifier: Apache-2.0
//
// Recorded primitives and reverse-mode differentiation.
//
// Spatial primitives use "same" padding: a window of size k and stride s maps
// an extent H to ceil(H / s), with total padding max((out - 1) * s + k - H, 0)
// split so the extra row/column goes to the bottom/right.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "broadnas/tensor.hpp"

namespace broadnas {

enum class PrimitiveKind {
    Conv2d,
    SepConv,
    DepthwiseConv2d,
    MaxPool3x3,
    AvgPool3x3,
    Identity,
    BatchNorm,
    Relu,
    Add,
    Concat,
    GlobalAvgPool,
    Affine,
    SoftmaxCrossEntropy,
    Sum,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Exp,
    SliceCols,
    Embedding,
    LogSoftmax,
    Pick,
};

std::string_view primitive_name(PrimitiveKind kind);
/// Throws Error for names that are not primitives.
PrimitiveKind primitive_from_name(std::string_view name);

struct TapeEntry {
    PrimitiveKind kind;
    std::vector<Tensor> inputs;
    Tensor output;
    // Reads output.grad() and accumulates into the inputs' grads.
    std::function<void()> backward;
};

/// Ordered record of primitive applications. Entries are appended in
/// execution order, so every input precedes its consumer.
class Tape {
public:
    void record(TapeEntry entry) { entries_.push_back(std::move(entry)); }
    const std::vector<TapeEntry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    void clear() { entries_.clear(); }

private:
    std::vector<TapeEntry> entries_;
};

/// Makes `tape` the recording target on this thread for the scope lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape() noexcept;

/// Fills grad = d(loss)/d(t) for every grad-requiring tensor on the tape.
/// Tensors recorded on the tape but off the loss path end with zero grads.
void backward(Tape& tape, const Tensor& loss);

enum class BnMode {
    Train,       // batch statistics, running statistics updated
    BatchStats,  // batch statistics, running statistics left alone
    Inference,   // running statistics
};

inline constexpr double kBnMomentum = 0.9;
inline constexpr double kBnEps = 1e-5;

// ---- spatial primitives (inputs are (N, C, H, W)) --------------------------

std::size_t same_out(std::size_t extent, std::size_t stride);

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride);
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, std::size_t stride);
Tensor max_pool3x3(const Tensor& x, std::size_t stride);
Tensor avg_pool3x3(const Tensor& x, std::size_t stride);
Tensor identity(const Tensor& x);
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, BnMode mode);

struct SepConvWeights {
    Tensor depthwise;  // (C_in, 1, k, k)
    Tensor pointwise;  // (C_out, C_in, 1, 1)
    Tensor gamma, beta, running_mean, running_var;
};
/// ReLU -> depthwise k x k (stride) -> pointwise 1x1 -> batch-norm.
Tensor sep_conv(const Tensor& x, SepConvWeights& w, std::size_t stride, BnMode mode);

Tensor global_avg_pool(const Tensor& x);

// ---- general primitives -----------------------------------------------------

Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sum(const Tensor& x);
/// Concatenates along axis 1; all other extents must agree.
Tensor concat(std::span<const Tensor> parts);
/// x (N, D), weight (O, D), optional bias (O) -> (N, O).
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
/// Row `index` of a (V, D) table as a (1, D) tensor.
Tensor embedding(const Tensor& table, std::size_t index);
Tensor log_softmax(const Tensor& x);
/// out[n] = x[n, index[n]] for a (N, K) input.
Tensor pick(const Tensor& x, std::span<const std::size_t> index);
/// Mean over the batch of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// ---- generic dispatch -------------------------------------------------------

struct PrimitiveAttrs {
    std::size_t stride = 1;
    std::size_t begin = 0;
    std::size_t count = 0;
    double factor = 1.0;
    BnMode bn_mode = BnMode::Train;
    std::vector<std::size_t> indices;
    std::vector<int> labels;
};

/// Applies a primitive by kind. Input conventions follow the typed functions
/// above; batch-norm takes (x, gamma, beta, running_mean, running_var) and
/// sep-conv takes (x, depthwise, pointwise, gamma, beta, running_mean,
/// running_var).
Tensor apply_primitive(PrimitiveKind kind, std::span<const Tensor> inputs,
                       const PrimitiveAttrs& attrs = {});
Tensor apply_primitive(std::string_view kind, std::span<const Tensor> inputs,
                       const PrimitiveAttrs& attrs = {});

}  // namespace broadnas
