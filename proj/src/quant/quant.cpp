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

#include "quantlab/quant/quant.hpp"

#include "quantlab/error.hpp"
#include "quantlab/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace quantlab {

namespace {

double round_even(double x)
{
    return std::nearbyint(x);
}

std::int16_t to_zero_point(double value)
{
    if (value < std::numeric_limits<std::int16_t>::min() || value > std::numeric_limits<std::int16_t>::max())
        throw NumericalError("zero-point " + std::to_string(value) + " does not fit in 16 bits");
    return static_cast<std::int16_t>(value);
}

} // namespace

void QuantSpec::validate() const
{
    if (bits < 1 || bits > 8)
        throw ConfigError("quant bits must lie in [1, 8], got " + std::to_string(bits));
    if (group_size < 1)
        throw ConfigError("quant group_size must be >= 1, got " + std::to_string(group_size));
}

QuantParams quant_params(std::span<const double> group, int bits, std::optional<ClipParams> clip, bool symmetric)
{
    if (group.empty())
        throw InputError("quant_params: empty group");
    if (bits < 1 || bits > 8)
        throw InputError("quant_params: bits must lie in [1, 8]");
    const auto [lo_it, hi_it] = std::minmax_element(group.begin(), group.end());
    const double lo = *lo_it;
    const double hi = *hi_it;
    if (!std::isfinite(lo) || !std::isfinite(hi))
        throw InputError("quant_params: non-finite weight");
    const double levels = static_cast<double>((1 << bits) - 1);
    const ClipParams c = clip.value_or(ClipParams{});

    QuantParams p;
    if (hi == lo) {
        // constant group: represented exactly by a single code
        if (lo == 0.0) {
            p.scale = static_cast<float>(kConstantGroupScale);
            p.zero_point = 0;
        } else {
            p.scale = static_cast<float>(std::abs(lo));
            p.zero_point = lo > 0.0 ? 0 : 1;
        }
        return p;
    }
    if (symmetric) {
        const double amax = std::max(std::abs(c.upper * hi), std::abs(c.lower * lo));
        p.scale = static_cast<float>(2.0 * amax / levels);
        p.zero_point = to_zero_point(std::ldexp(1.0, bits - 1));
    } else {
        const double step = (c.upper * hi - c.lower * lo) / levels;
        p.scale = static_cast<float>(step);
        p.zero_point = to_zero_point(-round_even(c.lower * lo / static_cast<double>(p.scale)));
    }
    if (!(p.scale > 0.0f) || !std::isfinite(p.scale))
        throw NumericalError("quant_params: degenerate scale " + std::to_string(p.scale));
    return p;
}

int quantize_value(double w, QuantParams p, int bits)
{
    const double q = round_even(w / static_cast<double>(p.scale)) + p.zero_point;
    return static_cast<int>(std::clamp(q, 0.0, static_cast<double>((1 << bits) - 1)));
}

double dequantize_value(int code, QuantParams p)
{
    return static_cast<double>(p.scale) * static_cast<double>(code - p.zero_point);
}

const QuantParams& QuantizedLinear::params_at(std::int64_t row, std::int64_t col) const
{
    const std::int64_t line = axis == GroupAxis::input ? row : col;
    const std::int64_t pos = axis == GroupAxis::input ? col : row;
    return params[static_cast<std::size_t>(line * groups_per_line() + pos / group_size)];
}

int QuantizedLinear::code(std::int64_t row, std::int64_t col) const
{
    const std::int64_t idx = row * cols() + col;
    std::int64_t bit = idx * bits;
    int v = 0;
    for (int b = 0; b < bits; ++b, ++bit)
        v |= ((packed[static_cast<std::size_t>(bit >> 3)] >> (bit & 7)) & 1) << b;
    return v;
}

std::vector<std::uint8_t> QuantizedLinear::codes() const
{
    return unpack_codes(packed, rows() * cols(), bits);
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, int bits)
{
    if (bits < 1 || bits > 8)
        throw InputError("pack_codes: bits must lie in [1, 8]");
    const std::size_t total = codes.size() * static_cast<std::size_t>(bits);
    std::vector<std::uint8_t> out((total + 7) / 8, 0);
    std::size_t bit = 0;
    for (std::uint8_t c : codes) {
        if (c >> bits)
            throw InputError("pack_codes: code " + std::to_string(c) + " exceeds " + std::to_string(bits) + " bits");
        for (int b = 0; b < bits; ++b, ++bit)
            out[bit >> 3] = static_cast<std::uint8_t>(out[bit >> 3] | (((c >> b) & 1) << (bit & 7)));
    }
    return out;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> packed, std::int64_t count, int bits)
{
    if (bits < 1 || bits > 8)
        throw FormatError("unpack_codes: bits must lie in [1, 8]");
    const auto needed = static_cast<std::size_t>((count * bits + 7) / 8);
    if (packed.size() != needed)
        throw FormatError("packed code block holds " + std::to_string(packed.size()) + " bytes, expected "
                          + std::to_string(needed));
    std::vector<std::uint8_t> out(static_cast<std::size_t>(count));
    std::size_t bit = 0;
    for (auto& c : out) {
        int v = 0;
        for (int b = 0; b < bits; ++b, ++bit)
            v |= ((packed[bit >> 3] >> (bit & 7)) & 1) << b;
        c = static_cast<std::uint8_t>(v);
    }
    return out;
}

QuantizedLinear make_quantized(Shape shape, int bits, int group_size, GroupAxis axis,
                               std::vector<QuantParams> params, std::span<const std::uint8_t> codes)
{
    QuantizedLinear q;
    q.shape = std::move(shape);
    q.bits = bits;
    q.group_size = group_size;
    q.axis = axis;
    if (q.shape.size() != 2)
        throw ShapeError("quantized weights must be 2-D, got " + shape_str(q.shape));
    if (static_cast<std::int64_t>(params.size()) != q.lines() * q.groups_per_line())
        throw FormatError("quantized block has " + std::to_string(params.size()) + " groups, expected "
                          + std::to_string(q.lines() * q.groups_per_line()));
    if (static_cast<std::int64_t>(codes.size()) != q.rows() * q.cols())
        throw FormatError("quantized block code count mismatch");
    q.params = std::move(params);
    q.packed = pack_codes(codes, bits);
    return q;
}

QuantizedLinear quantize(const Tensor& w, const QuantSpec& spec, std::span<const ClipParams> clip, GroupAxis axis)
{
    spec.validate();
    if (w.rank() != 1 && w.rank() != 2)
        throw ShapeError("quantize expects a vector or matrix, got " + shape_str(w.shape()));
    const Shape shape = w.rank() == 1 ? Shape{1, w.dim(0)} : w.shape();
    const std::int64_t rows = shape[0];
    const std::int64_t cols = shape[1];
    const std::vector<double> values = w.to_vector();
    for (double v : values)
        if (!std::isfinite(v))
            throw InputError("quantize: weights contain NaN or Inf");

    const std::int64_t lines = axis == GroupAxis::input ? rows : cols;
    const std::int64_t len = axis == GroupAxis::input ? cols : rows;
    const std::int64_t groups = (len + spec.group_size - 1) / spec.group_size;
    if (!clip.empty() && static_cast<std::int64_t>(clip.size()) != lines * groups)
        throw ShapeError("quantize: " + std::to_string(clip.size()) + " clip entries for "
                         + std::to_string(lines * groups) + " groups");

    auto at = [&](std::int64_t line, std::int64_t pos) -> std::size_t {
        return static_cast<std::size_t>(axis == GroupAxis::input ? line * cols + pos : pos * cols + line);
    };
    std::vector<QuantParams> params;
    std::vector<std::uint8_t> codes(values.size());
    std::vector<double> buf;
    for (std::int64_t line = 0; line < lines; ++line) {
        for (std::int64_t g = 0; g < groups; ++g) {
            const std::int64_t start = g * spec.group_size;
            const std::int64_t stop = std::min(len, start + spec.group_size);
            buf.clear();
            for (std::int64_t i = start; i < stop; ++i)
                buf.push_back(values[at(line, i)]);
            std::optional<ClipParams> c;
            if (!clip.empty())
                c = clip[static_cast<std::size_t>(line * groups + g)];
            const QuantParams p = quant_params(buf, spec.bits, c, spec.symmetric);
            params.push_back(p);
            for (std::int64_t i = start; i < stop; ++i)
                codes[at(line, i)] = static_cast<std::uint8_t>(quantize_value(values[at(line, i)], p, spec.bits));
        }
    }
    return make_quantized(shape, spec.bits, spec.group_size, axis, std::move(params), codes);
}

Tensor dequantize(const QuantizedLinear& q)
{
    const auto codes = q.codes();
    Tensor out(q.shape, DType::f32);
    auto d = out.data<float>();
    for (std::int64_t r = 0; r < q.rows(); ++r)
        for (std::int64_t c = 0; c < q.cols(); ++c) {
            const auto idx = static_cast<std::size_t>(r * q.cols() + c);
            d[idx] = static_cast<float>(dequantize_value(codes[idx], q.params_at(r, c)));
        }
    return out;
}

Ternary ternarize(std::span<const double> w)
{
    Ternary t;
    double abs_sum = 0.0;
    for (double v : w) {
        if (!std::isfinite(v))
            throw InputError("ternarize: weights contain NaN or Inf");
        abs_sum += std::abs(v);
    }
    t.scale = w.empty() ? 0.0 : abs_sum / static_cast<double>(w.size());
    const double s = t.scale == 0.0 ? kConstantGroupScale : t.scale;
    if (t.scale == 0.0)
        t.scale = kConstantGroupScale;
    for (double v : w)
        t.codes.push_back(static_cast<std::int8_t>(std::clamp(round_even(v / s), -1.0, 1.0)));
    return t;
}

Tensor ternary_dequantize(const Ternary& t, const Shape& shape)
{
    Tensor out(shape, DType::f32);
    if (out.size() != static_cast<std::int64_t>(t.codes.size()))
        throw ShapeError("ternary_dequantize: shape " + shape_str(shape) + " does not match code count");
    auto d = out.data<float>();
    for (std::size_t i = 0; i < t.codes.size(); ++i)
        d[i] = static_cast<float>(t.scale * t.codes[i]);
    return out;
}

Model quantize_model_rtn(const Model& model, const QuantSpec& spec)
{
    Model out = model;
    if (!spec.enabled)
        return out;
    for (const auto& name : model.linear_names()) {
        auto q = std::make_shared<QuantizedLinear>(quantize(model.param(name), spec));
        out.set_param(name, dequantize(*q));
        out.set_quantized(name, std::move(q));
    }
    out.set_precision(Precision::quantized);
    return out;
}

} // namespace quantlab
