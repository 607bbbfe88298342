// SPDX-License-Identifier: Apache-2.0

#include "broadnas/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace broadnas {

namespace {

#if defined(__GLIBC__)
[[maybe_unused]] const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
    return true;
}();
#endif

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

ShapeError::ShapeError(std::string kind, std::string detail)
    : Error(kind + ": " + detail), kind_(std::move(kind)) {}

namespace {
std::atomic<std::uint64_t> next_tensor_id{1};
}

struct Tensor::Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::uint64_t id = next_tensor_id.fetch_add(1, std::memory_order_relaxed);
};

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<Impl>()) {
    const auto n = shape_numel(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(n, fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("tensor", "shape " + shape_str(shape) + " holds " +
                                       std::to_string(shape_numel(shape)) + " elements, got " +
                                       std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw ShapeError("tensor", "axis " + std::to_string(axis) + " out of range for " +
                                       shape_str(impl_->shape));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::data_mut() { return impl_->data; }

double Tensor::item() const {
    if (impl_->data.size() != 1) {
        throw ShapeError("item", "expected one element, shape " + shape_str(impl_->shape));
    }
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
}

bool Tensor::has_grad() const { return impl_->has_grad; }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::grad_mut() {
    if (!impl_->has_grad) zero_grad();
    return impl_->grad;
}

void Tensor::zero_grad() {
    impl_->grad.assign(impl_->data.size(), 0.0);
    impl_->has_grad = true;
}

void Tensor::clear_grad() {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
    impl_->has_grad = false;
}

std::uint64_t Tensor::id() const { return impl_->id; }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data); }

}  // namespace broadnas
