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

#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace quantlab {

enum class DType : std::uint8_t { f32, f64 };

std::string to_string(DType dtype);

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Calls `fn.template operator()<T>()` with T = float or double.
template <typename Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn)
{
    if (dtype == DType::f32)
        return fn.template operator()<float>();
    return fn.template operator()<double>();
}

template <typename T>
constexpr DType dtype_of()
{
    if constexpr (std::is_same_v<T, float>)
        return DType::f32;
    else
        return DType::f64;
}

/// Dense row-major array of float or double with an explicit shape.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, DType dtype);
    Tensor(Shape shape, DType dtype, double fill);

    static Tensor from(Shape shape, std::span<const double> values, DType dtype = DType::f64);
    static Tensor from(Shape shape, std::initializer_list<double> values, DType dtype = DType::f64);
    static Tensor scalar(double value, DType dtype = DType::f64);

    const Shape& shape() const { return shape_; }
    DType dtype() const { return dtype_; }
    std::int64_t size() const { return size_; }
    std::int64_t dim(int axis) const;
    int rank() const { return static_cast<int>(shape_.size()); }

    template <typename T>
    std::span<T> data()
    {
        check_type(dtype_of<T>());
        if constexpr (std::is_same_v<T, float>)
            return f32_;
        else
            return f64_;
    }

    template <typename T>
    std::span<const T> data() const
    {
        check_type(dtype_of<T>());
        if constexpr (std::is_same_v<T, float>)
            return f32_;
        else
            return f64_;
    }

    double at(std::int64_t flat) const;
    void set(std::int64_t flat, double value);

    std::vector<double> to_vector() const;
    Tensor cast(DType dtype) const;
    Tensor reshaped(Shape shape) const;

    /// Bitwise equality of shape, dtype and payload.
    bool identical(const Tensor& other) const;

private:
    void check_type(DType requested) const;

    Shape shape_;
    DType dtype_ = DType::f64;
    std::int64_t size_ = 0;
    std::vector<float> f32_;
    std::vector<double> f64_;
};

} // namespace quantlab
