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

#include "kernels.hpp"

#include "quantlab/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace quantlab::detail {

namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::string& what)
{
    throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Broadcast {
    Shape out;
    std::vector<std::int64_t> stride_a;
    std::vector<std::int64_t> stride_b;
};

std::vector<std::int64_t> padded_strides(const Shape& s, std::size_t rank)
{
    Shape padded(rank - s.size(), 1);
    padded.insert(padded.end(), s.begin(), s.end());
    std::vector<std::int64_t> strides(rank, 0);
    std::int64_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
        strides[i] = padded[i] == 1 ? 0 : acc;
        acc *= padded[i];
    }
    return strides;
}

template <typename T, typename F>
void binary_kernel(OpKind kind, const Tensor& a, const Tensor& b, Tensor& out, F f)
{
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.data<T>();
    const std::int64_t n = out.size();
    if (a.shape() == b.shape()) {
        for (std::int64_t i = 0; i < n; ++i)
            po[i] = f(pa[i], pb[i]);
        return;
    }
    if (b.size() == 1 && a.size() == n) {
        const T s = pb[0];
        for (std::int64_t i = 0; i < n; ++i)
            po[i] = f(pa[i], s);
        return;
    }
    if (a.size() == 1 && b.size() == n) {
        const T s = pa[0];
        for (std::int64_t i = 0; i < n; ++i)
            po[i] = f(s, pb[i]);
        return;
    }
    const auto& os = out.shape();
    // b is a trailing row vector broadcast over leading axes
    if (a.size() == n && b.rank() >= 1 && b.rank() <= out.rank()
        && std::equal(b.shape().begin(), b.shape().end(), os.end() - b.rank())) {
        const std::int64_t inner = b.size();
        for (std::int64_t r = 0; r < n / inner; ++r)
            for (std::int64_t j = 0; j < inner; ++j)
                po[r * inner + j] = f(pa[r * inner + j], pb[j]);
        return;
    }
    // b is [..., 1] broadcast along the last axis
    if (a.size() == n && b.rank() == out.rank() && b.shape().back() == 1 && out.rank() >= 1
        && std::equal(b.shape().begin(), b.shape().end() - 1, os.begin())) {
        const std::int64_t inner = os.back();
        for (std::int64_t r = 0; r < n / inner; ++r)
            for (std::int64_t j = 0; j < inner; ++j)
                po[r * inner + j] = f(pa[r * inner + j], pb[r]);
        return;
    }
    if (b.size() == n && a.rank() == out.rank() && a.shape().back() == 1 && out.rank() >= 1
        && std::equal(a.shape().begin(), a.shape().end() - 1, os.begin())) {
        const std::int64_t inner = os.back();
        for (std::int64_t r = 0; r < n / inner; ++r)
            for (std::int64_t j = 0; j < inner; ++j)
                po[r * inner + j] = f(pa[r], pb[r * inner + j]);
        return;
    }
    // general strided broadcast
    const std::size_t rank = os.size();
    auto sa = padded_strides(a.shape(), rank);
    auto sb = padded_strides(b.shape(), rank);
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t ia = 0;
    std::int64_t ib = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        po[i] = f(pa[ia], pb[ib]);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < os[d])
                break;
            ia -= sa[d] * os[d];
            ib -= sb[d] * os[d];
            idx[d] = 0;
        }
    }
    (void)kind;
}

template <typename T>
void sum_to_kernel(const Tensor& x, Tensor& out)
{
    auto px = x.data<T>();
    auto po = out.data<T>();
    const std::int64_t n = x.size();
    const std::int64_t m = out.size();
    if (m == n) {
        std::copy(px.begin(), px.end(), po.begin());
        return;
    }
    if (m == 1) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i)
            acc += px[i];
        po[0] = static_cast<T>(acc);
        return;
    }
    const auto& xs = x.shape();
    const auto& ts = out.shape();
    if (ts.size() == xs.size() && ts.back() == 1
        && std::equal(ts.begin(), ts.end() - 1, xs.begin())) {
        const std::int64_t inner = xs.back();
        for (std::int64_t r = 0; r < m; ++r) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < inner; ++j)
                acc += px[r * inner + j];
            po[r] = static_cast<T>(acc);
        }
        return;
    }
    if (ts.size() <= xs.size() && std::equal(ts.begin(), ts.end(), xs.end() - ts.size())) {
        std::vector<double> acc(static_cast<std::size_t>(m), 0.0);
        for (std::int64_t r = 0; r < n / m; ++r)
            for (std::int64_t j = 0; j < m; ++j)
                acc[j] += px[r * m + j];
        for (std::int64_t j = 0; j < m; ++j)
            po[j] = static_cast<T>(acc[j]);
        return;
    }
    const std::size_t rank = xs.size();
    auto st = padded_strides(ts, rank);
    std::vector<double> acc(static_cast<std::size_t>(m), 0.0);
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t it = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        acc[static_cast<std::size_t>(it)] += px[i];
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            it += st[d];
            if (idx[d] < xs[d])
                break;
            it -= st[d] * xs[d];
            idx[d] = 0;
        }
    }
    for (std::int64_t j = 0; j < m; ++j)
        po[j] = static_cast<T>(acc[j]);
}

bool broadcastable_to(const Shape& from, const Shape& to)
{
    if (from.size() > to.size())
        return false;
    for (std::size_t i = 0; i < from.size(); ++i) {
        auto f = from[from.size() - 1 - i];
        auto t = to[to.size() - 1 - i];
        if (f != t && f != 1)
            return false;
    }
    return true;
}

template <typename T>
Tensor compute_typed(OpKind kind, const OpAttrs& at, const std::vector<const Tensor*>& in)
{
    constexpr DType dt = dtype_of<T>();
    auto unary = [&](auto f) {
        Tensor out(in[0]->shape(), dt);
        auto px = in[0]->data<T>();
        auto po = out.data<T>();
        for (std::int64_t i = 0; i < out.size(); ++i)
            po[i] = f(px[i]);
        return out;
    };

    switch (kind) {
    case OpKind::leaf:
        shape_fail(kind, "leaf has no forward rule");

    case OpKind::matmul: {
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        if (a.rank() < 2 || a.rank() > 3 || a.rank() != b.rank())
            shape_fail(kind, "operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
        const bool ta = at.flag_a;
        const bool tb = at.flag_b;
        const std::int64_t batch = a.rank() == 3 ? a.dim(0) : 1;
        if (a.rank() == 3 && b.dim(0) != batch)
            shape_fail(kind, "batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        const std::int64_t ar = a.dim(-2), ac = a.dim(-1), br = b.dim(-2), bc = b.dim(-1);
        const std::int64_t m = ta ? ac : ar;
        const std::int64_t k = ta ? ar : ac;
        const std::int64_t kb = tb ? bc : br;
        const std::int64_t n = tb ? br : bc;
        if (k != kb)
            shape_fail(kind, "inner dimensions " + shape_str(a.shape()) + (ta ? "^T" : "") + " x "
                                 + shape_str(b.shape()) + (tb ? "^T" : ""));
        Shape os = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
        Tensor out(os, dt);
        for (std::int64_t s = 0; s < batch; ++s) {
            Eigen::Map<const RowMat<T>> A(a.data<T>().data() + s * ar * ac, ar, ac);
            Eigen::Map<const RowMat<T>> B(b.data<T>().data() + s * br * bc, br, bc);
            Eigen::Map<RowMat<T>> C(out.data<T>().data() + s * m * n, m, n);
            if (!ta && !tb)
                C.noalias() = A * B;
            else if (!ta && tb)
                C.noalias() = A * B.transpose();
            else if (ta && !tb)
                C.noalias() = A.transpose() * B;
            else
                C.noalias() = A.transpose() * B.transpose();
        }
        return out;
    }

    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul: {
        Tensor out(broadcast_shape(in[0]->shape(), in[1]->shape(), kind), dt);
        if (kind == OpKind::add)
            binary_kernel<T>(kind, *in[0], *in[1], out, [](T x, T y) { return x + y; });
        else if (kind == OpKind::sub)
            binary_kernel<T>(kind, *in[0], *in[1], out, [](T x, T y) { return x - y; });
        else
            binary_kernel<T>(kind, *in[0], *in[1], out, [](T x, T y) { return x * y; });
        return out;
    }

    case OpKind::scale: {
        const T c = static_cast<T>(at.scalar);
        return unary([c](T x) { return x * c; });
    }

    case OpKind::sum:
    case OpKind::mean: {
        double acc = 0.0;
        for (T v : in[0]->data<T>())
            acc += v;
        if (kind == OpKind::mean) {
            if (in[0]->size() == 0)
                shape_fail(kind, "empty operand");
            acc /= static_cast<double>(in[0]->size());
        }
        return Tensor::scalar(acc, dt);
    }

    case OpKind::sum_to: {
        if (!broadcastable_to(at.shape, in[0]->shape()))
            shape_fail(kind, shape_str(in[0]->shape()) + " cannot reduce to " + shape_str(at.shape));
        Tensor out(at.shape, dt);
        sum_to_kernel<T>(*in[0], out);
        return out;
    }

    case OpKind::broadcast_to: {
        if (!broadcastable_to(in[0]->shape(), at.shape))
            shape_fail(kind, shape_str(in[0]->shape()) + " cannot broadcast to " + shape_str(at.shape));
        Tensor out(at.shape, dt);
        binary_kernel<T>(kind, out, *in[0], out, [](T, T y) { return y; });
        return out;
    }

    case OpKind::exp:
        return unary([](T x) { return std::exp(x); });
    case OpKind::log:
        return unary([](T x) { return std::log(x); });
    case OpKind::power: {
        const T p = static_cast<T>(at.scalar);
        if (at.scalar == 1.0)
            return *in[0];
        if (at.scalar == 2.0)
            return unary([](T x) { return x * x; });
        return unary([p](T x) { return std::pow(x, p); });
    }
    case OpKind::sigmoid:
        return unary([](T x) { return static_cast<T>(1) / (static_cast<T>(1) + std::exp(-x)); });
    case OpKind::silu:
        return unary([](T x) { return x / (static_cast<T>(1) + std::exp(-x)); });

    case OpKind::softmax: {
        const Tensor& x = *in[0];
        if (x.rank() < 1)
            shape_fail(kind, "scalar operand");
        const std::int64_t n = x.dim(-1);
        const std::int64_t rows = n ? x.size() / n : 0;
        const std::int64_t m = x.rank() >= 2 ? x.dim(-2) : 1;
        Tensor out(x.shape(), dt);
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
            const std::int64_t valid = at.flag_a ? std::min<std::int64_t>(n, r % m + 1) : n;
            const T* xr = px.data() + r * n;
            T* yr = po.data() + r * n;
            T mx = xr[0];
            for (std::int64_t j = 1; j < valid; ++j)
                mx = std::max(mx, xr[j]);
            double z = 0.0;
            for (std::int64_t j = 0; j < valid; ++j) {
                yr[j] = std::exp(xr[j] - mx);
                z += yr[j];
            }
            const T inv = static_cast<T>(1.0 / z);
            for (std::int64_t j = 0; j < valid; ++j)
                yr[j] *= inv;
            for (std::int64_t j = valid; j < n; ++j)
                yr[j] = 0;
        }
        return out;
    }

    case OpKind::layer_norm:
    case OpKind::rms_norm: {
        const Tensor& x = *in[0];
        if (x.rank() < 1)
            shape_fail(kind, "scalar operand");
        const std::int64_t n = x.dim(-1);
        const std::int64_t rows = n ? x.size() / n : 0;
        Tensor out(x.shape(), dt);
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xr = px.data() + r * n;
            T* yr = po.data() + r * n;
            double mu = 0.0;
            if (kind == OpKind::layer_norm) {
                for (std::int64_t j = 0; j < n; ++j)
                    mu += xr[j];
                mu /= static_cast<double>(n);
            }
            double var = 0.0;
            for (std::int64_t j = 0; j < n; ++j)
                var += (xr[j] - mu) * (xr[j] - mu);
            var /= static_cast<double>(n);
            const double rstd = 1.0 / std::sqrt(var + at.scalar);
            for (std::int64_t j = 0; j < n; ++j)
                yr[j] = static_cast<T>((xr[j] - mu) * rstd);
        }
        return out;
    }

    case OpKind::embedding: {
        const Tensor& table = *in[0];
        if (table.rank() != 2)
            shape_fail(kind, "table must be 2-D, got " + shape_str(table.shape()));
        const auto& ids = *at.index;
        const std::int64_t d = table.dim(1);
        Tensor out({static_cast<std::int64_t>(ids.size()), d}, dt);
        auto pt = table.data<T>();
        auto po = out.data<T>();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= table.dim(0))
                throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of "
                                 + std::to_string(table.dim(0)) + " rows");
            std::copy_n(pt.data() + ids[i] * d, d, po.data() + static_cast<std::int64_t>(i) * d);
        }
        return out;
    }

    case OpKind::embedding_scatter: {
        const Tensor& rows = *in[0];
        const auto& ids = *at.index;
        if (rows.rank() != 2 || rows.dim(0) != static_cast<std::int64_t>(ids.size()))
            shape_fail(kind, "rows " + shape_str(rows.shape()) + " for " + std::to_string(ids.size())
                                 + " ids");
        const std::int64_t d = rows.dim(1);
        Tensor out({at.length, d}, dt);
        auto pr = rows.data<T>();
        auto po = out.data<T>();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= at.length)
                throw InputError("embedding_scatter: id out of range");
            for (std::int64_t j = 0; j < d; ++j)
                po[ids[i] * d + j] += pr[static_cast<std::int64_t>(i) * d + j];
        }
        return out;
    }

    case OpKind::transpose: {
        const Tensor& x = *in[0];
        if (x.rank() < 2)
            shape_fail(kind, "needs rank >= 2, got " + shape_str(x.shape()));
        const std::int64_t r = x.dim(-2), c = x.dim(-1);
        const std::int64_t batch = x.size() / std::max<std::int64_t>(1, r * c);
        Shape os = x.shape();
        std::swap(os[os.size() - 1], os[os.size() - 2]);
        Tensor out(os, dt);
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (std::int64_t s = 0; s < batch; ++s)
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < c; ++j)
                    po[s * r * c + j * r + i] = px[s * r * c + i * c + j];
        return out;
    }

    case OpKind::reshape:
        if (numel(at.shape) != in[0]->size())
            shape_fail(kind, shape_str(in[0]->shape()) + " -> " + shape_str(at.shape));
        return in[0]->reshaped(at.shape);

    case OpKind::concat: {
        const Tensor& first = *in[0];
        int axis = at.axis < 0 ? at.axis + first.rank() : at.axis;
        if (axis < 0 || axis >= first.rank())
            shape_fail(kind, "axis out of range");
        Shape os = first.shape();
        os[static_cast<std::size_t>(axis)] = 0;
        for (const Tensor* t : in) {
            if (t->rank() != first.rank())
                shape_fail(kind, "rank mismatch");
            for (int d = 0; d < first.rank(); ++d)
                if (d != axis && t->dim(d) != first.dim(d))
                    shape_fail(kind, "parts " + shape_str(first.shape()) + " and " + shape_str(t->shape()));
            os[static_cast<std::size_t>(axis)] += t->dim(axis);
        }
        Tensor out(os, dt);
        std::int64_t outer = 1;
        for (int d = 0; d < axis; ++d)
            outer *= os[static_cast<std::size_t>(d)];
        const std::int64_t out_row = out.size() / std::max<std::int64_t>(outer, 1);
        auto po = out.data<T>();
        std::int64_t offset = 0;
        for (const Tensor* t : in) {
            const std::int64_t row = t->size() / std::max<std::int64_t>(outer, 1);
            auto pt = t->data<T>();
            for (std::int64_t o = 0; o < outer; ++o)
                std::copy_n(pt.data() + o * row, row, po.data() + o * out_row + offset);
            offset += row;
        }
        return out;
    }

    case OpKind::slice: {
        const Tensor& x = *in[0];
        int axis = at.axis < 0 ? at.axis + x.rank() : at.axis;
        if (axis < 0 || axis >= x.rank())
            shape_fail(kind, "axis out of range");
        if (at.start < 0 || at.length < 0 || at.start + at.length > x.dim(axis))
            shape_fail(kind, "range [" + std::to_string(at.start) + ", +" + std::to_string(at.length)
                                 + ") outside " + shape_str(x.shape()));
        Shape os = x.shape();
        os[static_cast<std::size_t>(axis)] = at.length;
        Tensor out(os, dt);
        std::int64_t outer = 1;
        for (int d = 0; d < axis; ++d)
            outer *= os[static_cast<std::size_t>(d)];
        std::int64_t inner = 1;
        for (int d = axis + 1; d < x.rank(); ++d)
            inner *= os[static_cast<std::size_t>(d)];
        const std::int64_t in_row = x.dim(axis) * inner;
        const std::int64_t out_row = at.length * inner;
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(px.data() + o * in_row + at.start * inner, out_row, po.data() + o * out_row);
        return out;
    }

    case OpKind::cross_entropy: {
        const Tensor& x = *in[0];
        const auto& tg = *at.index;
        if (x.rank() != 2 || x.dim(0) != static_cast<std::int64_t>(tg.size()))
            shape_fail(kind, "logits " + shape_str(x.shape()) + " for " + std::to_string(tg.size())
                                 + " targets");
        const std::int64_t v = x.dim(1);
        auto px = x.data<T>();
        double total = 0.0;
        std::int64_t valid = 0;
        for (std::size_t r = 0; r < tg.size(); ++r) {
            if (tg[r] < 0)
                continue;
            if (tg[r] >= v)
                throw InputError("cross_entropy: target " + std::to_string(tg[r]) + " >= vocabulary "
                                 + std::to_string(v));
            const T* xr = px.data() + static_cast<std::int64_t>(r) * v;
            double mx = xr[0];
            for (std::int64_t j = 1; j < v; ++j)
                mx = std::max<double>(mx, xr[j]);
            double z = 0.0;
            for (std::int64_t j = 0; j < v; ++j)
                z += std::exp(static_cast<double>(xr[j]) - mx);
            total += std::log(z) + mx - static_cast<double>(xr[tg[r]]);
            ++valid;
        }
        if (valid == 0)
            throw ContractError("cross_entropy: no valid targets");
        return Tensor::scalar(total / static_cast<double>(valid), dt);
    }

    case OpKind::straight_through: {
        if (at.st == StraightThrough::round_half_even)
            return unary([](T x) { return static_cast<T>(round_half_even(x)); });
        double abs_sum = 0.0;
        for (T v : in[0]->data<T>())
            abs_sum += std::abs(static_cast<double>(v));
        double s = in[0]->size() ? abs_sum / static_cast<double>(in[0]->size()) : 0.0;
        if (s == 0.0)
            s = 1e-8;
        return unary([s](T x) {
            const double c = std::clamp(round_half_even(x / s), -1.0, 1.0);
            return static_cast<T>(s * c);
        });
    }

    case OpKind::clamp: {
        const T lo = static_cast<T>(at.scalar);
        const T hi = static_cast<T>(at.scalar2);
        return unary([lo, hi](T x) { return std::clamp(x, lo, hi); });
    }

    case OpKind::frobenius_sq: {
        double acc = 0.0;
        for (T v : in[0]->data<T>())
            acc += static_cast<double>(v) * v;
        return Tensor::scalar(acc, dt);
    }

    case OpKind::cosine_similarity: {
        if (in[0]->size() != in[1]->size())
            shape_fail(kind, shape_str(in[0]->shape()) + " vs " + shape_str(in[1]->shape()));
        auto pa = in[0]->data<T>();
        auto pb = in[1]->data<T>();
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::int64_t i = 0; i < in[0]->size(); ++i) {
            dot += static_cast<double>(pa[i]) * pb[i];
            na += static_cast<double>(pa[i]) * pa[i];
            nb += static_cast<double>(pb[i]) * pb[i];
        }
        const double den = std::sqrt(na) * std::sqrt(nb);
        return Tensor::scalar(den > 0 ? dot / den : 0.0, dt);
    }

    case OpKind::opaque: {
        std::vector<const Tensor*> args(in.begin(), in.end());
        return at.custom->forward(args).cast(dt);
    }

    case OpKind::opaque_grad: {
        const std::size_t n_in = static_cast<std::size_t>(at.length);
        std::vector<const Tensor*> args(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(n_in));
        auto grads = at.custom->vjp(args, *in[n_in], *in[n_in + 1]);
        return grads.at(static_cast<std::size_t>(at.axis)).cast(dt);
    }
    }
    shape_fail(kind, "unknown op");
}

} // namespace

double round_half_even(double x)
{
    return std::nearbyint(x);
}

Shape broadcast_shape(const Shape& a, const Shape& b, OpKind kind)
{
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            shape_fail(kind, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[rank - 1 - i] = da == 1 ? db : da;
    }
    return out;
}

Tensor compute_forward(OpKind kind, const OpAttrs& attrs, const std::vector<const Tensor*>& in,
                       DType dtype)
{
    return dispatch(dtype, [&]<typename T>() { return compute_typed<T>(kind, attrs, in); });
}

} // namespace quantlab::detail
