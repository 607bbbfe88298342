// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors with optional gradient buffers.

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace broadnas {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Base class for every error the engine raises.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a primitive receives inputs that violate its shape rule.
class ShapeError : public Error {
public:
    ShapeError(std::string kind, std::string detail);
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

/// Raised when a NaN or Inf would enter an update.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Reference-counted handle to a row-major buffer. Copies alias the same
/// storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);

    bool defined() const noexcept { return impl_ != nullptr; }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> data_mut();
    double item() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    /// Allocates (if needed) and zero-fills the gradient buffer.
    void zero_grad();
    void clear_grad();

    std::uint64_t id() const;
    bool shares_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

    /// Deep copy of values only; the copy does not require grad.
    Tensor clone() const;

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
};

}  // namespace broadnas
