// Copyright 2026 The quantlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#include "quantlab/tensor/tensor.hpp"

#include "quantlab/error.hpp"

#include <cstring>
#include <sstream>

namespace quantlab {

std::string to_string(DType dtype)
{
    return dtype == DType::f32 ? "f32" : "f64";
}

std::int64_t numel(const Shape& shape)
{
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0)
            throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, DType dtype) : Tensor(std::move(shape), dtype, 0.0) {}

Tensor::Tensor(Shape shape, DType dtype, double fill)
    : shape_(std::move(shape)), dtype_(dtype), size_(numel(shape_))
{
    if (dtype_ == DType::f32)
        f32_.assign(static_cast<std::size_t>(size_), static_cast<float>(fill));
    else
        f64_.assign(static_cast<std::size_t>(size_), fill);
}

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype)
{
    Tensor t(std::move(shape), dtype);
    if (static_cast<std::int64_t>(values.size()) != t.size_)
        throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape "
                         + shape_str(t.shape_));
    for (std::int64_t i = 0; i < t.size_; ++i)
        t.set(i, values[static_cast<std::size_t>(i)]);
    return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dtype)
{
    return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::scalar(double value, DType dtype)
{
    return Tensor({}, dtype, value);
}

std::int64_t Tensor::dim(int axis) const
{
    if (axis < 0)
        axis += rank();
    if (axis < 0 || axis >= rank())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::at(std::int64_t flat) const
{
    return dtype_ == DType::f32 ? static_cast<double>(f32_[static_cast<std::size_t>(flat)])
                                : f64_[static_cast<std::size_t>(flat)];
}

void Tensor::set(std::int64_t flat, double value)
{
    if (dtype_ == DType::f32)
        f32_[static_cast<std::size_t>(flat)] = static_cast<float>(value);
    else
        f64_[static_cast<std::size_t>(flat)] = value;
}

std::vector<double> Tensor::to_vector() const
{
    std::vector<double> out(static_cast<std::size_t>(size_));
    for (std::int64_t i = 0; i < size_; ++i)
        out[static_cast<std::size_t>(i)] = at(i);
    return out;
}

Tensor Tensor::cast(DType dtype) const
{
    if (dtype == dtype_)
        return *this;
    Tensor out(shape_, dtype);
    for (std::int64_t i = 0; i < size_; ++i)
        out.set(i, at(i));
    return out;
}

Tensor Tensor::reshaped(Shape shape) const
{
    if (numel(shape) != size_)
        throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
}

bool Tensor::identical(const Tensor& other) const
{
    if (shape_ != other.shape_ || dtype_ != other.dtype_)
        return false;
    if (dtype_ == DType::f32)
        return std::memcmp(f32_.data(), other.f32_.data(), f32_.size() * sizeof(float)) == 0;
    return std::memcmp(f64_.data(), other.f64_.data(), f64_.size() * sizeof(double)) == 0;
}

void Tensor::check_type(DType requested) const
{
    if (requested != dtype_)
        throw ContractError("tensor holds " + to_string(dtype_) + " data, accessed as "
                            + to_string(requested));
}

} // namespace quantlab
