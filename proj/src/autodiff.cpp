// SPDX-License-Identifier: Apache-2.0

#include "broadnas/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <utility>

namespace broadnas {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local Tape* g_active_tape = nullptr;

constexpr std::array<std::pair<PrimitiveKind, std::string_view>, 23> kPrimitiveNames{{
    {PrimitiveKind::Conv2d, "conv2d"},
    {PrimitiveKind::SepConv, "sep_conv"},
    {PrimitiveKind::DepthwiseConv2d, "depthwise_conv2d"},
    {PrimitiveKind::MaxPool3x3, "max_pool3x3"},
    {PrimitiveKind::AvgPool3x3, "avg_pool3x3"},
    {PrimitiveKind::Identity, "identity"},
    {PrimitiveKind::BatchNorm, "batch_norm"},
    {PrimitiveKind::Relu, "relu"},
    {PrimitiveKind::Add, "add"},
    {PrimitiveKind::Concat, "concat"},
    {PrimitiveKind::GlobalAvgPool, "global_avg_pool"},
    {PrimitiveKind::Affine, "affine"},
    {PrimitiveKind::SoftmaxCrossEntropy, "softmax_cross_entropy"},
    {PrimitiveKind::Sum, "sum"},
    {PrimitiveKind::Mul, "mul"},
    {PrimitiveKind::Scale, "scale"},
    {PrimitiveKind::Sigmoid, "sigmoid"},
    {PrimitiveKind::Tanh, "tanh"},
    {PrimitiveKind::Exp, "exp"},
    {PrimitiveKind::SliceCols, "slice_cols"},
    {PrimitiveKind::Embedding, "embedding"},
    {PrimitiveKind::LogSoftmax, "log_softmax"},
    {PrimitiveKind::Pick, "pick"},
}};

bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

// Records `out` on the active tape. `bw` accumulates into the inputs' grads.
void record(PrimitiveKind kind, std::vector<Tensor> inputs, Tensor& out, std::function<void()> bw) {
    out.set_requires_grad(true);
    g_active_tape->record(TapeEntry{kind, std::move(inputs), out, std::move(bw)});
}

void expect_rank(std::string_view kind, const Tensor& t, std::size_t rank, std::string_view what) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(kind), std::string(what) + " must have rank " +
                                                std::to_string(rank) + ", got " +
                                                shape_str(t.shape()));
    }
}

struct Geometry {
    std::size_t n, c, h, w, k, stride, oh, ow, pad_top, pad_left;
};

Geometry spatial_geometry(const Tensor& x, std::size_t k, std::size_t stride) {
    Geometry g{};
    g.n = x.dim(0);
    g.c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.k = k;
    g.stride = stride;
    g.oh = same_out(g.h, stride);
    g.ow = same_out(g.w, stride);
    const auto pad_total = [&](std::size_t out, std::size_t in) -> std::size_t {
        const std::size_t need = (out - 1) * stride + k;
        return need > in ? need - in : 0;
    };
    g.pad_top = pad_total(g.oh, g.h) / 2;
    g.pad_left = pad_total(g.ow, g.w) / 2;
    return g;
}

// col has shape (c*k*k, oh*ow) for one image.
void im2col(const double* img, const Geometry& g, double* col) {
    const std::size_t plane = g.oh * g.ow;
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                double* row = col + ((c * g.k + ki) * g.k + kj) * plane;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad_left);
                        double v = 0.0;
                        if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) &&
                            ix < static_cast<std::ptrdiff_t>(g.w)) {
                            v = img[(c * g.h + iy) * g.w + ix];
                        }
                        row[oy * g.ow + ox] = v;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const Geometry& g, double* img) {
    const std::size_t plane = g.oh * g.ow;
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const double* row = col + ((c * g.k + ki) * g.k + kj) * plane;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad_left);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        img[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

bool is_pointwise(const Geometry& g) { return g.k == 1 && g.stride == 1; }

enum class PoolKind { Max, Avg };

Tensor pool3x3(const Tensor& x, std::size_t stride, PoolKind kind) {
    const char* name = kind == PoolKind::Max ? "max_pool3x3" : "avg_pool3x3";
    expect_rank(name, x, 4, "input");
    if (stride == 0) throw ShapeError(name, "stride must be positive");
    const Geometry g = spatial_geometry(x, 3, stride);
    Tensor out(Shape{g.n, g.c, g.oh, g.ow});
    auto od = out.data_mut();
    const auto xd = x.data();
    // For max pooling: flat input index of the winner; for avg: window size.
    std::vector<std::size_t> aux(out.numel());
    for (std::size_t nc = 0; nc < g.n * g.c; ++nc) {
        const double* plane = xd.data() + nc * g.h * g.w;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = 0;
                double acc = 0.0;
                std::size_t count = 0;
                for (std::size_t ki = 0; ki < 3; ++ki) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t kj = 0; kj < 3; ++kj) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad_left);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        const std::size_t idx = static_cast<std::size_t>(iy) * g.w + ix;
                        const double v = plane[idx];
                        acc += v;
                        ++count;
                        if (v > best) {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                const std::size_t o = (nc * g.oh + oy) * g.ow + ox;
                if (kind == PoolKind::Max) {
                    od[o] = best;
                    aux[o] = nc * g.h * g.w + best_idx;
                } else {
                    od[o] = acc / static_cast<double>(count);
                    aux[o] = count;
                }
            }
        }
    }
    if (tracking({&x})) {
        Tensor xin = x;
        Tensor o = out;
        const auto pkind = kind == PoolKind::Max ? PrimitiveKind::MaxPool3x3 : PrimitiveKind::AvgPool3x3;
        record(pkind, {x}, out, [xin, o, g, kind, aux = std::move(aux)]() mutable {
            auto gx = xin.grad_mut();
            const auto go = o.grad();
            if (kind == PoolKind::Max) {
                for (std::size_t i = 0; i < go.size(); ++i) gx[aux[i]] += go[i];
                return;
            }
            for (std::size_t nc = 0; nc < g.n * g.c; ++nc) {
                double* plane = gx.data() + nc * g.h * g.w;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const std::size_t oi = (nc * g.oh + oy) * g.ow + ox;
                        const double share = go[oi] / static_cast<double>(aux[oi]);
                        for (std::size_t ki = 0; ki < 3; ++ki) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                            static_cast<std::ptrdiff_t>(g.pad_top);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                            for (std::size_t kj = 0; kj < 3; ++kj) {
                                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                                static_cast<std::ptrdiff_t>(g.pad_left);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                                plane[static_cast<std::size_t>(iy) * g.w + ix] += share;
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename F, typename D>
Tensor unary(PrimitiveKind kind, const Tensor& x, F f, D dfdx_from_out) {
    Tensor out(x.shape());
    auto od = out.data_mut();
    const auto xd = x.data();
    for (std::size_t i = 0; i < xd.size(); ++i) od[i] = f(xd[i]);
    if (tracking({&x})) {
        Tensor xin = x;
        Tensor o = out;
        record(kind, {x}, out, [xin, o, dfdx_from_out]() mutable {
            auto gx = xin.grad_mut();
            const auto go = o.grad();
            const auto xv = xin.data();
            const auto ov = o.data();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * dfdx_from_out(xv[i], ov[i]);
        });
    }
    return out;
}

void expect_same_numel(std::string_view kind, const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape() || (a.numel() == 1 && b.numel() == 1);
    if (!same) {
        throw ShapeError(std::string(kind),
                         "operand shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

}  // namespace

std::string_view primitive_name(PrimitiveKind kind) {
    for (const auto& [k, name] : kPrimitiveNames) {
        if (k == kind) return name;
    }
    return "unknown";
}

PrimitiveKind primitive_from_name(std::string_view name) {
    for (const auto& [k, n] : kPrimitiveNames) {
        if (n == name) return k;
    }
    throw Error("unknown primitive kind '" + std::string(name) + "'");
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

void backward(Tape& tape, const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw Error("backward: loss must be scalar-shaped, got " +
                    (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    const auto& entries = tape.entries();
    const bool on_tape = std::any_of(entries.begin(), entries.end(), [&](const TapeEntry& e) {
        return e.output.shares_storage(loss);
    });
    if (!on_tape) throw Error("backward: loss was not produced on this tape");

    for (const auto& e : entries) {
        Tensor out = e.output;
        out.zero_grad();
        for (const auto& in : e.inputs) {
            if (in.requires_grad()) {
                Tensor t = in;
                t.zero_grad();
            }
        }
    }
    Tensor l = loss;
    l.grad_mut()[0] = 1.0;
    for (auto it = entries.rbegin(); it != entries.rend(); ++it) it->backward();
}

std::size_t same_out(std::size_t extent, std::size_t stride) { return (extent + stride - 1) / stride; }

Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride) {
    expect_rank("conv2d", x, 4, "input");
    expect_rank("conv2d", weight, 4, "weight");
    if (stride == 0) throw ShapeError("conv2d", "stride must be positive");
    if (weight.dim(1) != x.dim(1)) {
        throw ShapeError("conv2d", "weight expects " + std::to_string(weight.dim(1)) +
                                       " input channels, input " + shape_str(x.shape()) + " has " +
                                       std::to_string(x.dim(1)));
    }
    if (weight.dim(2) != weight.dim(3)) {
        throw ShapeError("conv2d", "kernel must be square, weight " + shape_str(weight.shape()));
    }
    const Geometry g = spatial_geometry(x, weight.dim(2), stride);
    const std::size_t cout = weight.dim(0);
    const std::size_t rows = g.c * g.k * g.k;
    const std::size_t plane = g.oh * g.ow;
    Tensor out(Shape{g.n, cout, g.oh, g.ow});
    const auto xd = x.data();
    auto od = out.data_mut();
    ConstMapMat wmat(weight.data().data(), cout, rows);
    std::vector<double> col(is_pointwise(g) ? 0 : rows * plane);
    for (std::size_t n = 0; n < g.n; ++n) {
        const double* img = xd.data() + n * g.c * g.h * g.w;
        const double* cptr = img;
        if (!is_pointwise(g)) {
            im2col(img, g, col.data());
            cptr = col.data();
        }
        MapMat o(od.data() + n * cout * plane, cout, plane);
        o.noalias() = wmat * ConstMapMat(cptr, rows, plane);
    }
    if (tracking({&x, &weight})) {
        Tensor xin = x;
        Tensor w = weight;
        Tensor o = out;
        record(PrimitiveKind::Conv2d, {x, weight}, out, [xin, w, o, g, cout, rows, plane]() mutable {
            const auto go = o.grad();
            const auto xd = xin.data();
            std::vector<double> col(is_pointwise(g) ? 0 : rows * plane);
            std::vector<double> dcol(rows * plane);
            ConstMapMat wmat(w.data().data(), cout, rows);
            for (std::size_t n = 0; n < g.n; ++n) {
                ConstMapMat dout(go.data() + n * cout * plane, cout, plane);
                const double* img = xd.data() + n * g.c * g.h * g.w;
                if (w.requires_grad()) {
                    const double* cptr = img;
                    if (!is_pointwise(g)) {
                        im2col(img, g, col.data());
                        cptr = col.data();
                    }
                    MapMat dw(w.grad_mut().data(), cout, rows);
                    dw.noalias() += dout * ConstMapMat(cptr, rows, plane).transpose();
                }
                if (xin.requires_grad()) {
                    double* gimg = xin.grad_mut().data() + n * g.c * g.h * g.w;
                    if (is_pointwise(g)) {
                        MapMat(gimg, rows, plane).noalias() += wmat.transpose() * dout;
                    } else {
                        MapMat(dcol.data(), rows, plane).noalias() = wmat.transpose() * dout;
                        col2im_add(dcol.data(), g, gimg);
                    }
                }
            }
        });
    }
    return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, std::size_t stride) {
    expect_rank("depthwise_conv2d", x, 4, "input");
    expect_rank("depthwise_conv2d", weight, 4, "weight");
    if (stride == 0) throw ShapeError("depthwise_conv2d", "stride must be positive");
    if (weight.dim(0) != x.dim(1) || weight.dim(1) != 1 || weight.dim(2) != weight.dim(3)) {
        throw ShapeError("depthwise_conv2d", "weight " + shape_str(weight.shape()) +
                                                 " incompatible with input " + shape_str(x.shape()) +
                                                 " (expected (C,1,k,k))");
    }
    const Geometry g = spatial_geometry(x, weight.dim(2), stride);
    Tensor out(Shape{g.n, g.c, g.oh, g.ow});
    const auto xd = x.data();
    const auto wd = weight.data();
    auto od = out.data_mut();
    const std::size_t k = g.k;
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t c = 0; c < g.c; ++c) {
            const double* in = xd.data() + (n * g.c + c) * g.h * g.w;
            const double* ker = wd.data() + c * k * k;
            double* o = od.data() + (n * g.c + c) * g.oh * g.ow;
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
                for (std::size_t ox = 0; ox < g.ow; ++ox) {
                    double acc = 0.0;
                    for (std::size_t ki = 0; ki < k; ++ki) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                                        static_cast<std::ptrdiff_t>(g.pad_top);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                        for (std::size_t kj = 0; kj < k; ++kj) {
                            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                            static_cast<std::ptrdiff_t>(g.pad_left);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                            acc += ker[ki * k + kj] * in[static_cast<std::size_t>(iy) * g.w + ix];
                        }
                    }
                    o[oy * g.ow + ox] = acc;
                }
            }
        }
    }
    if (tracking({&x, &weight})) {
        Tensor xin = x;
        Tensor w = weight;
        Tensor o = out;
        record(PrimitiveKind::DepthwiseConv2d, {x, weight}, out, [xin, w, o, g]() mutable {
            const auto go = o.grad();
            const auto xd = xin.data();
            const auto wd = w.data();
            const std::size_t k = g.k;
            const bool need_x = xin.requires_grad();
            const bool need_w = w.requires_grad();
            double* gx = need_x ? xin.grad_mut().data() : nullptr;
            double* gw = need_w ? w.grad_mut().data() : nullptr;
            for (std::size_t n = 0; n < g.n; ++n) {
                for (std::size_t c = 0; c < g.c; ++c) {
                    const std::size_t in_off = (n * g.c + c) * g.h * g.w;
                    const double* dout = go.data() + (n * g.c + c) * g.oh * g.ow;
                    for (std::size_t oy = 0; oy < g.oh; ++oy) {
                        for (std::size_t ox = 0; ox < g.ow; ++ox) {
                            const double d = dout[oy * g.ow + ox];
                            for (std::size_t ki = 0; ki < k; ++ki) {
                                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                                static_cast<std::ptrdiff_t>(g.pad_top);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                                for (std::size_t kj = 0; kj < k; ++kj) {
                                    const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                                    static_cast<std::ptrdiff_t>(g.pad_left);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                                    const std::size_t xi = in_off + static_cast<std::size_t>(iy) * g.w + ix;
                                    if (need_w) gw[c * k * k + ki * k + kj] += d * xd[xi];
                                    if (need_x) gx[xi] += d * wd[c * k * k + ki * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor max_pool3x3(const Tensor& x, std::size_t stride) { return pool3x3(x, stride, PoolKind::Max); }
Tensor avg_pool3x3(const Tensor& x, std::size_t stride) { return pool3x3(x, stride, PoolKind::Avg); }

Tensor identity(const Tensor& x) {
    Tensor out(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    if (tracking({&x})) {
        Tensor xin = x;
        Tensor o = out;
        record(PrimitiveKind::Identity, {x}, out, [xin, o]() mutable {
            auto gx = xin.grad_mut();
            const auto go = o.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        });
    }
    return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, BnMode mode) {
    if (x.rank() != 2 && x.rank() != 4) {
        throw ShapeError("batch_norm", "input must be (N,C) or (N,C,H,W), got " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0);
    const std::size_t c = x.dim(1);
    const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
        if (p->numel() != c) {
            throw ShapeError("batch_norm", "parameter " + shape_str(p->shape()) + " does not match " +
                                               std::to_string(c) + " channels of " + shape_str(x.shape()));
        }
    }
    const std::size_t count = n * hw;
    const bool batch_stats = mode != BnMode::Inference;
    if (batch_stats && count < 2) {
        throw ShapeError("batch_norm", "batch statistics need at least 2 values per channel, input " +
                                           shape_str(x.shape()));
    }
    std::vector<double> mean(c), inv_std(c);
    const auto xd = x.data();
    if (batch_stats) {
        std::vector<double> var(c);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const double* p = xd.data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(count);
            double ss = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const double* p = xd.data() + (b * c + ch) * hw;
                for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - m) * (p[i] - m);
            }
            mean[ch] = m;
            var[ch] = ss / static_cast<double>(count);
            inv_std[ch] = 1.0 / std::sqrt(var[ch] + kBnEps);
        }
        if (mode == BnMode::Train) {
            auto rm = running_mean.data_mut();
            auto rv = running_var.data_mut();
            const double unbias = static_cast<double>(count) / static_cast<double>(count - 1);
            for (std::size_t ch = 0; ch < c; ++ch) {
                rm[ch] = kBnMomentum * rm[ch] + (1.0 - kBnMomentum) * mean[ch];
                rv[ch] = kBnMomentum * rv[ch] + (1.0 - kBnMomentum) * var[ch] * unbias;
            }
        }
    } else {
        const auto rm = running_mean.data();
        const auto rv = running_var.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = rm[ch];
            inv_std[ch] = 1.0 / std::sqrt(rv[ch] + kBnEps);
        }
    }

    Tensor out(x.shape());
    auto od = out.data_mut();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    std::vector<double> xhat(x.numel());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const double xh = (xd[off + i] - mean[ch]) * inv_std[ch];
                xhat[off + i] = xh;
                od[off + i] = gd[ch] * xh + bd[ch];
            }
        }
    }
    if (tracking({&x, &gamma, &beta})) {
        Tensor xin = x;
        Tensor gm = gamma;
        Tensor bt = beta;
        Tensor o = out;
        record(PrimitiveKind::BatchNorm, {x, gamma, beta}, out,
               [xin, gm, bt, o, n, c, hw, count, batch_stats, xhat = std::move(xhat),
                inv_std = std::move(inv_std)]() mutable {
                   const auto go = o.grad();
                   const auto gd = gm.data();
                   std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
                   for (std::size_t b = 0; b < n; ++b) {
                       for (std::size_t ch = 0; ch < c; ++ch) {
                           const std::size_t off = (b * c + ch) * hw;
                           for (std::size_t i = 0; i < hw; ++i) {
                               sum_dy[ch] += go[off + i];
                               sum_dy_xhat[ch] += go[off + i] * xhat[off + i];
                           }
                       }
                   }
                   if (gm.requires_grad()) {
                       auto g = gm.grad_mut();
                       for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy_xhat[ch];
                   }
                   if (bt.requires_grad()) {
                       auto g = bt.grad_mut();
                       for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy[ch];
                   }
                   if (!xin.requires_grad()) return;
                   auto gx = xin.grad_mut();
                   const double m = static_cast<double>(count);
                   for (std::size_t b = 0; b < n; ++b) {
                       for (std::size_t ch = 0; ch < c; ++ch) {
                           const std::size_t off = (b * c + ch) * hw;
                           const double scale_c = gd[ch] * inv_std[ch];
                           for (std::size_t i = 0; i < hw; ++i) {
                               if (batch_stats) {
                                   gx[off + i] += scale_c * (go[off + i] - sum_dy[ch] / m -
                                                             xhat[off + i] * sum_dy_xhat[ch] / m);
                               } else {
                                   gx[off + i] += scale_c * go[off + i];
                               }
                           }
                       }
                   }
               });
    }
    return out;
}

Tensor sep_conv(const Tensor& x, SepConvWeights& w, std::size_t stride, BnMode mode) {
    Tensor h = relu(x);
    h = depthwise_conv2d(h, w.depthwise, stride);
    h = conv2d(h, w.pointwise, 1);
    return batch_norm(h, w.gamma, w.beta, w.running_mean, w.running_var, mode);
}

Tensor global_avg_pool(const Tensor& x) {
    expect_rank("global_avg_pool", x, 4, "input");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(Shape{n, c});
    auto od = out.data_mut();
    const auto xd = x.data();
    for (std::size_t i = 0; i < n * c; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += xd[i * hw + j];
        od[i] = s / static_cast<double>(hw);
    }
    if (tracking({&x})) {
        Tensor xin = x;
        Tensor o = out;
        record(PrimitiveKind::GlobalAvgPool, {x}, out, [xin, o, n, c, hw]() mutable {
            auto gx = xin.grad_mut();
            const auto go = o.grad();
            for (std::size_t i = 0; i < n * c; ++i) {
                const double share = go[i] / static_cast<double>(hw);
                for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += share;
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    return unary(
        PrimitiveKind::Relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        PrimitiveKind::Sigmoid, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double out) { return out * (1.0 - out); });
}

Tensor tanh(const Tensor& x) {
    return unary(
        PrimitiveKind::Tanh, x, [](double v) { return std::tanh(v); },
        [](double, double out) { return 1.0 - out * out; });
}

Tensor exp(const Tensor& x) {
    return unary(
        PrimitiveKind::Exp, x, [](double v) { return std::exp(v); }, [](double, double out) { return out; });
}

Tensor scale(const Tensor& x, double factor) {
    return unary(
        PrimitiveKind::Scale, x, [factor](double v) { return v * factor; },
        [factor](double, double) { return factor; });
}

Tensor add(const Tensor& a, const Tensor& b) {
    expect_same_numel("add", a, b);
    Tensor out(a.shape());
    auto od = out.data_mut();
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
    if (tracking({&a, &b})) {
        Tensor ta = a, tb = b, o = out;
        record(PrimitiveKind::Add, {a, b}, out, [ta, tb, o]() mutable {
            const auto go = o.grad();
            for (Tensor* t : {&ta, &tb}) {
                if (!t->requires_grad()) continue;
                auto g = t->grad_mut();
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    expect_same_numel("mul", a, b);
    Tensor out(a.shape());
    auto od = out.data_mut();
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
    if (tracking({&a, &b})) {
        Tensor ta = a, tb = b, o = out;
        record(PrimitiveKind::Mul, {a, b}, out, [ta, tb, o]() mutable {
            const auto go = o.grad();
            const auto av = ta.data();
            const auto bv = tb.data();
            if (ta.requires_grad()) {
                auto g = ta.grad_mut();
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * bv[i];
            }
            if (tb.requires_grad()) {
                auto g = tb.grad_mut();
                for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * av[i];
            }
        });
    }
    return out;
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (tracking({&x})) {
        Tensor xin = x, o = out;
        record(PrimitiveKind::Sum, {x}, out, [xin, o]() mutable {
            auto gx = xin.grad_mut();
            const double g = o.grad()[0];
            for (double& v : gx) v += g;
        });
    }
    return out;
}

Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat", "no inputs");
    const Tensor& first = parts.front();
    if (first.rank() < 2) throw ShapeError("concat", "inputs need rank >= 2, got " + shape_str(first.shape()));
    const std::size_t outer = first.dim(0);
    std::size_t inner = 1;
    for (std::size_t a = 2; a < first.rank(); ++a) inner *= first.dim(a);
    std::size_t total_c = 0;
    for (const auto& p : parts) {
        bool ok = p.rank() == first.rank() && p.dim(0) == outer;
        for (std::size_t a = 2; ok && a < first.rank(); ++a) ok = p.dim(a) == first.dim(a);
        if (!ok) {
            throw ShapeError("concat", "cannot join " + shape_str(p.shape()) + " with " + shape_str(first.shape()) +
                                           " along axis 1");
        }
        total_c += p.dim(1);
    }
    Shape shape = first.shape();
    shape[1] = total_c;
    Tensor out(shape);
    auto od = out.data_mut();
    std::size_t c_off = 0;
    for (const auto& p : parts) {
        const auto pd = p.data();
        const std::size_t chunk = p.dim(1) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pd.data() + o * chunk, chunk, od.data() + (o * total_c + c_off) * inner);
        }
        c_off += p.dim(1);
    }
    bool track = false;
    for (const auto& p : parts) track = track || tracking({&p});
    if (track) {
        std::vector<Tensor> ins(parts.begin(), parts.end());
        Tensor o = out;
        record(PrimitiveKind::Concat, ins, out, [ins, o, outer, inner, total_c]() mutable {
            const auto go = o.grad();
            std::size_t c_off = 0;
            for (auto& p : ins) {
                const std::size_t chunk = p.dim(1) * inner;
                if (p.requires_grad()) {
                    auto g = p.grad_mut();
                    for (std::size_t oi = 0; oi < outer; ++oi) {
                        const double* src = go.data() + (oi * total_c + c_off) * inner;
                        for (std::size_t i = 0; i < chunk; ++i) g[oi * chunk + i] += src[i];
                    }
                }
                c_off += p.dim(1);
            }
        });
    }
    return out;
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    expect_rank("affine", x, 2, "input");
    expect_rank("affine", weight, 2, "weight");
    const std::size_t n = x.dim(0), d = x.dim(1), o = weight.dim(0);
    if (weight.dim(1) != d) {
        throw ShapeError("affine", "weight " + shape_str(weight.shape()) + " incompatible with input " +
                                       shape_str(x.shape()));
    }
    if (bias.defined() && bias.numel() != o) {
        throw ShapeError("affine", "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(o) +
                                       " outputs");
    }
    Tensor out(Shape{n, o});
    MapMat om(out.data_mut().data(), n, o);
    om.noalias() = ConstMapMat(x.data().data(), n, d) * ConstMapMat(weight.data().data(), o, d).transpose();
    if (bias.defined()) {
        const auto bd = bias.data();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < o; ++j) om(r, j) += bd[j];
    }
    if (tracking({&x, &weight, &bias})) {
        Tensor xin = x, w = weight, b = bias, out_t = out;
        std::vector<Tensor> ins{x, weight};
        if (bias.defined()) ins.push_back(bias);
        record(PrimitiveKind::Affine, ins, out, [xin, w, b, out_t, n, d, o]() mutable {
            ConstMapMat go(out_t.grad().data(), n, o);
            if (xin.requires_grad()) {
                MapMat(xin.grad_mut().data(), n, d).noalias() += go * ConstMapMat(w.data().data(), o, d);
            }
            if (w.requires_grad()) {
                MapMat(w.grad_mut().data(), o, d).noalias() += go.transpose() * ConstMapMat(xin.data().data(), n, d);
            }
            if (b.defined() && b.requires_grad()) {
                auto gb = b.grad_mut();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < o; ++j) gb[j] += go(r, j);
            }
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
    expect_rank("slice_cols", x, 2, "input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (begin + count > d) {
        throw ShapeError("slice_cols", "columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                           ") exceed width " + std::to_string(d));
    }
    Tensor out(Shape{n, count});
    auto od = out.data_mut();
    const auto xd = x.data();
    for (std::size_t r = 0; r < n; ++r) std::copy_n(xd.data() + r * d + begin, count, od.data() + r * count);
    if (tracking({&x})) {
        Tensor xin = x, o = out;
        record(PrimitiveKind::SliceCols, {x}, out, [xin, o, n, d, begin, count]() mutable {
            auto gx = xin.grad_mut();
            const auto go = o.grad();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < count; ++j) gx[r * d + begin + j] += go[r * count + j];
        });
    }
    return out;
}

Tensor embedding(const Tensor& table, std::size_t index) {
    expect_rank("embedding", table, 2, "table");
    const std::size_t v = table.dim(0), d = table.dim(1);
    if (index >= v) {
        throw ShapeError("embedding", "index " + std::to_string(index) + " outside table of " + std::to_string(v) +
                                          " rows");
    }
    const auto td = table.data();
    Tensor out(Shape{1, d}, std::vector<double>(td.begin() + index * d, td.begin() + (index + 1) * d));
    if (tracking({&table})) {
        Tensor t = table, o = out;
        record(PrimitiveKind::Embedding, {table}, out, [t, o, index, d]() mutable {
            auto g = t.grad_mut();
            const auto go = o.grad();
            for (std::size_t j = 0; j < d; ++j) g[index * d + j] += go[j];
        });
    }
    return out;
}

Tensor log_softmax(const Tensor& x) {
    expect_rank("log_softmax", x, 2, "input");
    const std::size_t n = x.dim(0), k = x.dim(1);
    Tensor out(x.shape());
    auto od = out.data_mut();
    const auto xd = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = xd.data() + r * k;
        const double mx = *std::max_element(row, row + k);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < k; ++j) od[r * k + j] = row[j] - lse;
    }
    if (tracking({&x})) {
        Tensor xin = x, o = out;
        record(PrimitiveKind::LogSoftmax, {x}, out, [xin, o, n, k]() mutable {
            auto gx = xin.grad_mut();
            const auto go = o.grad();
            const auto ov = o.data();
            for (std::size_t r = 0; r < n; ++r) {
                double s = 0.0;
                for (std::size_t j = 0; j < k; ++j) s += go[r * k + j];
                for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += go[r * k + j] - std::exp(ov[r * k + j]) * s;
            }
        });
    }
    return out;
}

Tensor pick(const Tensor& x, std::span<const std::size_t> index) {
    expect_rank("pick", x, 2, "input");
    const std::size_t n = x.dim(0), k = x.dim(1);
    if (index.size() != n) {
        throw ShapeError("pick", std::to_string(index.size()) + " indices for " + std::to_string(n) + " rows");
    }
    Tensor out(Shape{n});
    auto od = out.data_mut();
    const auto xd = x.data();
    std::vector<std::size_t> idx(index.begin(), index.end());
    for (std::size_t r = 0; r < n; ++r) {
        if (idx[r] >= k) {
            throw ShapeError("pick", "index " + std::to_string(idx[r]) + " outside " + std::to_string(k) + " columns");
        }
        od[r] = xd[r * k + idx[r]];
    }
    if (tracking({&x})) {
        Tensor xin = x, o = out;
        record(PrimitiveKind::Pick, {x}, out, [xin, o, k, idx = std::move(idx)]() mutable {
            auto gx = xin.grad_mut();
            const auto go = o.grad();
            for (std::size_t r = 0; r < idx.size(); ++r) gx[r * k + idx[r]] += go[r];
        });
    }
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    expect_rank("softmax_cross_entropy", logits, 2, "logits");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) {
        throw ShapeError("softmax_cross_entropy",
                         std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
    }
    const auto ld = logits.data();
    std::vector<double> probs(n * k);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
            throw ShapeError("softmax_cross_entropy",
                             "label " + std::to_string(labels[r]) + " outside " + std::to_string(k) + " classes");
        }
        const double* row = ld.data() + r * k;
        const double mx = *std::max_element(row, row + k);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            probs[r * k + j] = std::exp(row[j] - mx);
            s += probs[r * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= s;
        loss += -(row[labels[r]] - mx - std::log(s));
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(n));
    if (tracking({&logits})) {
        Tensor lin = logits, o = out;
        std::vector<int> lab(labels.begin(), labels.end());
        record(PrimitiveKind::SoftmaxCrossEntropy, {logits}, out,
               [lin, o, n, k, probs = std::move(probs), lab = std::move(lab)]() mutable {
                   auto g = lin.grad_mut();
                   const double scale_n = o.grad()[0] / static_cast<double>(n);
                   for (std::size_t r = 0; r < n; ++r) {
                       for (std::size_t j = 0; j < k; ++j) {
                           const double onehot = static_cast<int>(j) == lab[r] ? 1.0 : 0.0;
                           g[r * k + j] += scale_n * (probs[r * k + j] - onehot);
                       }
                   }
               });
    }
    return out;
}

Tensor apply_primitive(PrimitiveKind kind, std::span<const Tensor> in, const PrimitiveAttrs& attrs) {
    const auto need = [&](std::size_t count) {
        if (in.size() != count) {
            throw ShapeError(std::string(primitive_name(kind)),
                             "expected " + std::to_string(count) + " inputs, got " + std::to_string(in.size()));
        }
    };
    switch (kind) {
        case PrimitiveKind::Conv2d: need(2); return conv2d(in[0], in[1], attrs.stride);
        case PrimitiveKind::DepthwiseConv2d: need(2); return depthwise_conv2d(in[0], in[1], attrs.stride);
        case PrimitiveKind::SepConv: {
            need(7);
            SepConvWeights w{in[1], in[2], in[3], in[4], in[5], in[6]};
            return sep_conv(in[0], w, attrs.stride, attrs.bn_mode);
        }
        case PrimitiveKind::MaxPool3x3: need(1); return max_pool3x3(in[0], attrs.stride);
        case PrimitiveKind::AvgPool3x3: need(1); return avg_pool3x3(in[0], attrs.stride);
        case PrimitiveKind::Identity: need(1); return identity(in[0]);
        case PrimitiveKind::BatchNorm: {
            need(5);
            Tensor rm = in[3], rv = in[4];
            return batch_norm(in[0], in[1], in[2], rm, rv, attrs.bn_mode);
        }
        case PrimitiveKind::Relu: need(1); return relu(in[0]);
        case PrimitiveKind::Add: need(2); return add(in[0], in[1]);
        case PrimitiveKind::Concat: return concat(in);
        case PrimitiveKind::GlobalAvgPool: need(1); return global_avg_pool(in[0]);
        case PrimitiveKind::Affine:
            if (in.size() == 2) return affine(in[0], in[1]);
            need(3);
            return affine(in[0], in[1], in[2]);
        case PrimitiveKind::SoftmaxCrossEntropy: need(1); return softmax_cross_entropy(in[0], attrs.labels);
        case PrimitiveKind::Sum: need(1); return sum(in[0]);
        case PrimitiveKind::Mul: need(2); return mul(in[0], in[1]);
        case PrimitiveKind::Scale: need(1); return scale(in[0], attrs.factor);
        case PrimitiveKind::Sigmoid: need(1); return sigmoid(in[0]);
        case PrimitiveKind::Tanh: need(1); return tanh(in[0]);
        case PrimitiveKind::Exp: need(1); return exp(in[0]);
        case PrimitiveKind::SliceCols: need(1); return slice_cols(in[0], attrs.begin, attrs.count);
        case PrimitiveKind::Embedding:
            need(1);
            if (attrs.indices.size() != 1) throw ShapeError("embedding", "expects exactly one index");
            return embedding(in[0], attrs.indices[0]);
        case PrimitiveKind::LogSoftmax: need(1); return log_softmax(in[0]);
        case PrimitiveKind::Pick: need(1); return pick(in[0], attrs.indices);
    }
    throw Error("unknown primitive kind");
}

Tensor apply_primitive(std::string_view kind, std::span<const Tensor> inputs, const PrimitiveAttrs& attrs) {
    return apply_primitive(primitive_from_name(kind), inputs, attrs);
}

}  // namespace broadnas
