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

#include "quantlab/tensor/tensor.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace quantlab {

class Model;

struct QuantSpec {
    int bits = 4;
    int group_size = 64;
    bool symmetric = false;
    /// false leaves weights untouched (full-precision passthrough)
    bool enabled = true;

    void validate() const;
    int max_code() const { return (1 << bits) - 1; }
};

/// Per-group scale and zero-point. The scale is kept in single precision, the
/// precision it is persisted in, so stored and in-memory grids agree.
struct QuantParams {
    float scale = 1.0f;
    std::int16_t zero_point = 0;
};

struct ClipParams {
    double upper = 1.0;
    double lower = 1.0;
};

inline constexpr double kClipMax = 1.2;
inline constexpr double kConstantGroupScale = 1e-8;

/// Scale and zero-point of one group; clipping defaults to upper = lower = 1.
QuantParams quant_params(std::span<const double> group, int bits, std::optional<ClipParams> clip = std::nullopt,
                         bool symmetric = false);

/// clamp(round(w / scale) + zero_point, 0, 2^bits - 1) with ties to even.
int quantize_value(double w, QuantParams p, int bits);
double dequantize_value(int code, QuantParams p);

enum class GroupAxis : std::uint8_t {
    /// groups run along each row (input dimension)
    input,
    /// groups run down each column (output dimension)
    output,
};

/// Packed quantized matrix [d_out, d_in].
struct QuantizedLinear {
    Shape shape;
    int bits = 0;
    int group_size = 0;
    GroupAxis axis = GroupAxis::input;
    /// line-major: for input grouping params[row * groups_per_line + g]
    std::vector<QuantParams> params;
    std::vector<std::uint8_t> packed;

    std::int64_t rows() const { return shape.at(0); }
    std::int64_t cols() const { return shape.at(1); }
    std::int64_t line_length() const { return axis == GroupAxis::input ? cols() : rows(); }
    std::int64_t lines() const { return axis == GroupAxis::input ? rows() : cols(); }
    std::int64_t groups_per_line() const { return (line_length() + group_size - 1) / group_size; }

    const QuantParams& params_at(std::int64_t row, std::int64_t col) const;
    int code(std::int64_t row, std::int64_t col) const;
    std::vector<std::uint8_t> codes() const;
};

/// Builds a QuantizedLinear from explicit codes and parameters.
QuantizedLinear make_quantized(Shape shape, int bits, int group_size, GroupAxis axis,
                               std::vector<QuantParams> params, std::span<const std::uint8_t> codes);

/// Group-wise quantization of a [d_out, d_in] matrix (a vector is treated as one row).
/// `clip` holds one entry per group, in params order, or is empty.
QuantizedLinear quantize(const Tensor& w, const QuantSpec& spec, std::span<const ClipParams> clip = {},
                         GroupAxis axis = GroupAxis::input);

/// Dequantized weights as f32 [d_out, d_in].
Tensor dequantize(const QuantizedLinear& q);

/// Codes packed LSB-first, `bits` per code.
std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits);
std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::int64_t count, int bits);

struct Ternary {
    std::vector<std::int8_t> codes;
    double scale = 0.0;
};

/// Absolute-mean ternarization: scale = mean |W|, codes = clamp(round(W / scale), -1, 1).
Ternary ternarize(std::span<const double> w);
Tensor ternary_dequantize(const Ternary& t, const Shape& shape);

/// Round-to-nearest on every projection; embeddings, norms and the output head
/// stay in full precision.
Model quantize_model_rtn(const Model& model, const QuantSpec& spec);

} // namespace quantlab
