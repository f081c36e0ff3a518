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

#include "quantlab/tensor/graph.hpp"

#include "kernels.hpp"
#include "quantlab/error.hpp"

#include <algorithm>
#include <cmath>

namespace quantlab {

std::string_view op_name(OpKind kind)
{
    switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::sum_to: return "sum_to";
    case OpKind::broadcast_to: return "broadcast_to";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::power: return "power";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::silu: return "silu";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::rms_norm: return "rms_norm";
    case OpKind::embedding: return "embedding";
    case OpKind::embedding_scatter: return "embedding_scatter";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::straight_through: return "straight_through";
    case OpKind::clamp: return "clamp";
    case OpKind::frobenius_sq: return "frobenius_sq";
    case OpKind::cosine_similarity: return "cosine_similarity";
    case OpKind::opaque: return "opaque";
    case OpKind::opaque_grad: return "opaque_grad";
    }
    return "?";
}

const Tensor& Var::value() const
{
    return graph_->node(id_).value;
}

const Shape& Var::shape() const
{
    return value().shape();
}

bool Var::requires_grad() const
{
    return graph_->node(id_).requires_grad;
}

Var Graph::param(Tensor value, std::string label)
{
    Node n;
    n.value = value.cast(dtype_);
    n.requires_grad = true;
    n.label = std::move(label);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value, std::string label)
{
    Node n;
    n.value = value.cast(dtype_);
    n.label = std::move(label);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(double value)
{
    return constant(Tensor::scalar(value, dtype_));
}

Var Graph::zeros(const Shape& shape)
{
    return constant(Tensor(shape, dtype_));
}

void Graph::set_value(Var leaf, Tensor value)
{
    Node& n = nodes_.at(static_cast<std::size_t>(leaf.id()));
    if (n.kind != OpKind::leaf)
        throw ContractError("set_value on a non-leaf node");
    if (value.shape() != n.value.shape())
        throw ShapeError("set_value: " + shape_str(value.shape()) + " into leaf of shape "
                         + shape_str(n.value.shape()));
    n.value = value.cast(dtype_);
}

Tensor Graph::compute(const Node& node) const
{
    std::vector<const Tensor*> in;
    in.reserve(node.inputs.size());
    for (int id : node.inputs)
        in.push_back(&nodes_[static_cast<std::size_t>(id)].value);
    return detail::compute_forward(node.kind, node.attrs, in, dtype_);
}

Var Graph::add_node(OpKind kind, std::span<const Var> inputs, OpAttrs attrs)
{
    Node n;
    n.kind = kind;
    n.attrs = std::move(attrs);
    for (const Var& v : inputs) {
        if (&v.graph() != this)
            throw ContractError(std::string(op_name(kind)) + ": operands from different graphs");
        n.inputs.push_back(v.id());
        n.requires_grad = n.requires_grad || v.requires_grad();
    }
    n.value = compute(n);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Graph::evaluate(Var root)
{
    const int r = root.id();
    std::vector<char> needed(static_cast<std::size_t>(r) + 1, 0);
    needed[static_cast<std::size_t>(r)] = 1;
    for (int id = r; id >= 0; --id) {
        if (!needed[static_cast<std::size_t>(id)])
            continue;
        for (int in : nodes_[static_cast<std::size_t>(id)].inputs)
            needed[static_cast<std::size_t>(in)] = 1;
    }
    for (int id = 0; id <= r; ++id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (needed[static_cast<std::size_t>(id)] && n.kind != OpKind::leaf)
            n.value = compute(n);
    }
    return nodes_[static_cast<std::size_t>(r)].value;
}

const Tensor& evaluate(Var root)
{
    return root.graph().evaluate(root);
}

// ---------------------------------------------------------------------------

namespace {

Var make(OpKind kind, std::initializer_list<Var> inputs, OpAttrs attrs = {})
{
    Graph& g = inputs.begin()->graph();
    return g.add_node(kind, std::span<const Var>(inputs.begin(), inputs.size()), std::move(attrs));
}

Shape last_axis_one(const Shape& s)
{
    Shape out = s;
    if (!out.empty())
        out.back() = 1;
    return out;
}

} // namespace

Var matmul(Var a, Var b, bool transpose_a, bool transpose_b)
{
    OpAttrs at;
    at.flag_a = transpose_a;
    at.flag_b = transpose_b;
    return make(OpKind::matmul, {a, b}, std::move(at));
}

Var add(Var a, Var b) { return make(OpKind::add, {a, b}); }
Var sub(Var a, Var b) { return make(OpKind::sub, {a, b}); }
Var mul(Var a, Var b) { return make(OpKind::mul, {a, b}); }

Var scale(Var a, double factor)
{
    OpAttrs at;
    at.scalar = factor;
    return make(OpKind::scale, {a}, std::move(at));
}

Var sum(Var a) { return make(OpKind::sum, {a}); }
Var mean(Var a) { return make(OpKind::mean, {a}); }

Var sum_to(Var a, Shape shape)
{
    if (a.shape() == shape)
        return a;
    OpAttrs at;
    at.shape = std::move(shape);
    return make(OpKind::sum_to, {a}, std::move(at));
}

Var broadcast_to(Var a, Shape shape)
{
    if (a.shape() == shape)
        return a;
    OpAttrs at;
    at.shape = std::move(shape);
    return make(OpKind::broadcast_to, {a}, std::move(at));
}

Var exp(Var a) { return make(OpKind::exp, {a}); }
Var log(Var a) { return make(OpKind::log, {a}); }

Var pow(Var a, double exponent)
{
    OpAttrs at;
    at.scalar = exponent;
    return make(OpKind::power, {a}, std::move(at));
}

Var sigmoid(Var a) { return make(OpKind::sigmoid, {a}); }
Var silu(Var a) { return make(OpKind::silu, {a}); }

Var softmax(Var a, bool causal)
{
    OpAttrs at;
    at.flag_a = causal;
    return make(OpKind::softmax, {a}, std::move(at));
}

Var layer_norm(Var a, double eps)
{
    OpAttrs at;
    at.scalar = eps;
    return make(OpKind::layer_norm, {a}, std::move(at));
}

Var rms_norm(Var a, double eps)
{
    OpAttrs at;
    at.scalar = eps;
    return make(OpKind::rms_norm, {a}, std::move(at));
}

Var embedding(Var table, std::shared_ptr<const std::vector<std::int64_t>> ids)
{
    OpAttrs at;
    at.index = std::move(ids);
    return make(OpKind::embedding, {table}, std::move(at));
}

Var embedding_scatter(Var rows_in, std::shared_ptr<const std::vector<std::int64_t>> ids,
                      std::int64_t rows)
{
    OpAttrs at;
    at.index = std::move(ids);
    at.length = rows;
    return make(OpKind::embedding_scatter, {rows_in}, std::move(at));
}

Var transpose(Var a) { return make(OpKind::transpose, {a}); }

Var reshape(Var a, Shape shape)
{
    if (a.shape() == shape)
        return a;
    OpAttrs at;
    at.shape = std::move(shape);
    return make(OpKind::reshape, {a}, std::move(at));
}

Var concat(std::span<const Var> parts, int axis)
{
    if (parts.empty())
        throw ShapeError("concat: no operands");
    if (parts.size() == 1)
        return parts[0];
    OpAttrs at;
    at.axis = axis;
    return parts[0].graph().add_node(OpKind::concat, parts, std::move(at));
}

Var slice(Var a, int axis, std::int64_t start, std::int64_t length)
{
    OpAttrs at;
    at.axis = axis < 0 ? axis + static_cast<int>(a.shape().size()) : axis;
    at.start = start;
    at.length = length;
    return make(OpKind::slice, {a}, std::move(at));
}

Var cross_entropy(Var logits, std::shared_ptr<const std::vector<std::int64_t>> targets)
{
    OpAttrs at;
    at.index = std::move(targets);
    return make(OpKind::cross_entropy, {logits}, std::move(at));
}

Var straight_through(Var a, StraightThrough rule)
{
    OpAttrs at;
    at.st = rule;
    return make(OpKind::straight_through, {a}, std::move(at));
}

Var clamp(Var a, double lo, double hi)
{
    OpAttrs at;
    at.scalar = lo;
    at.scalar2 = hi;
    return make(OpKind::clamp, {a}, std::move(at));
}

Var frobenius_sq(Var a) { return make(OpKind::frobenius_sq, {a}); }
Var cosine_similarity(Var a, Var b) { return make(OpKind::cosine_similarity, {a, b}); }

Var custom(std::shared_ptr<const CustomOp> op, std::span<const Var> inputs)
{
    if (inputs.empty())
        throw ContractError("custom op without inputs");
    OpAttrs at;
    at.custom = std::move(op);
    return inputs[0].graph().add_node(OpKind::opaque, inputs, std::move(at));
}

// ---------------------------------------------------------------------------
// Derivative rules. Each returns one contribution per input (invalid Var when
// the input does not need a gradient); all are built from primitives above.

namespace {

struct RuleContext {
    Graph& g;
    const Node& node;
    Var self;
    Var grad;
    std::vector<Var> in;
    const std::vector<char>& needs;

    bool need(std::size_t i) const { return needs[static_cast<std::size_t>(in[i].id())] != 0; }
};

Var mean_last(Var x)
{
    const double n = static_cast<double>(x.shape().back());
    return scale(sum_to(x, last_axis_one(x.shape())), 1.0 / n);
}

std::vector<Var> vjp(const RuleContext& c)
{
    Graph& g = c.g;
    const Var gy = c.grad;
    const auto& at = c.node.attrs;
    std::vector<Var> out(c.in.size());
    switch (c.node.kind) {
    case OpKind::leaf:
        break;

    case OpKind::matmul: {
        const bool ta = at.flag_a;
        const bool tb = at.flag_b;
        Var a = c.in[0];
        Var b = c.in[1];
        if (c.need(0))
            out[0] = ta ? matmul(b, gy, tb, true) : matmul(gy, b, false, !tb);
        if (c.need(1))
            out[1] = tb ? matmul(gy, a, true, ta) : matmul(a, gy, !ta, false);
        break;
    }

    case OpKind::add:
        if (c.need(0))
            out[0] = sum_to(gy, c.in[0].shape());
        if (c.need(1))
            out[1] = sum_to(gy, c.in[1].shape());
        break;

    case OpKind::sub:
        if (c.need(0))
            out[0] = sum_to(gy, c.in[0].shape());
        if (c.need(1))
            out[1] = scale(sum_to(gy, c.in[1].shape()), -1.0);
        break;

    case OpKind::mul:
        if (c.need(0))
            out[0] = sum_to(mul(gy, c.in[1]), c.in[0].shape());
        if (c.need(1))
            out[1] = sum_to(mul(gy, c.in[0]), c.in[1].shape());
        break;

    case OpKind::scale:
        out[0] = scale(gy, at.scalar);
        break;

    case OpKind::sum:
        out[0] = broadcast_to(gy, c.in[0].shape());
        break;

    case OpKind::mean:
        out[0] = scale(broadcast_to(gy, c.in[0].shape()), 1.0 / static_cast<double>(c.in[0].value().size()));
        break;

    case OpKind::sum_to:
        out[0] = broadcast_to(gy, c.in[0].shape());
        break;

    case OpKind::broadcast_to:
        out[0] = sum_to(gy, c.in[0].shape());
        break;

    case OpKind::exp:
        out[0] = mul(gy, c.self);
        break;

    case OpKind::log:
        out[0] = mul(gy, pow(c.in[0], -1.0));
        break;

    case OpKind::power: {
        const double p = at.scalar;
        if (p == 1.0)
            out[0] = gy;
        else if (p == 2.0)
            out[0] = mul(gy, scale(c.in[0], 2.0));
        else
            out[0] = mul(gy, scale(pow(c.in[0], p - 1.0), p));
        break;
    }

    case OpKind::sigmoid: {
        Var one_minus = add(scale(c.self, -1.0), g.constant(1.0));
        out[0] = mul(gy, mul(c.self, one_minus));
        break;
    }

    case OpKind::silu: {
        Var x = c.in[0];
        Var s = sigmoid(x);
        Var one = g.constant(1.0);
        Var d = mul(s, add(one, mul(x, sub(one, s))));
        out[0] = mul(gy, d);
        break;
    }

    case OpKind::softmax: {
        Var y = c.self;
        Var inner = sum_to(mul(gy, y), last_axis_one(y.shape()));
        out[0] = mul(y, sub(gy, inner));
        break;
    }

    case OpKind::layer_norm: {
        Var x = c.in[0];
        Var y = c.self;
        Var xc = sub(x, mean_last(x));
        Var var = mean_last(mul(xc, xc));
        Var rstd = pow(add(var, g.constant(at.scalar)), -0.5);
        Var centered = sub(sub(gy, mean_last(gy)), mul(y, mean_last(mul(gy, y))));
        out[0] = mul(rstd, centered);
        break;
    }

    case OpKind::rms_norm: {
        Var x = c.in[0];
        Var y = c.self;
        Var r = pow(add(mean_last(mul(x, x)), g.constant(at.scalar)), -0.5);
        out[0] = mul(r, sub(gy, mul(y, mean_last(mul(gy, y)))));
        break;
    }

    case OpKind::embedding:
        out[0] = embedding_scatter(gy, at.index, c.in[0].shape()[0]);
        break;

    case OpKind::embedding_scatter:
        out[0] = embedding(gy, at.index);
        break;

    case OpKind::transpose:
        out[0] = transpose(gy);
        break;

    case OpKind::reshape:
        out[0] = reshape(gy, c.in[0].shape());
        break;

    case OpKind::concat: {
        std::int64_t offset = 0;
        for (std::size_t i = 0; i < c.in.size(); ++i) {
            const std::int64_t len = c.in[i].shape()[static_cast<std::size_t>(
                at.axis < 0 ? at.axis + static_cast<int>(c.in[i].shape().size()) : at.axis)];
            if (c.need(i))
                out[i] = slice(gy, at.axis, offset, len);
            offset += len;
        }
        break;
    }

    case OpKind::slice: {
        const Shape& xs = c.in[0].shape();
        const auto axis = static_cast<std::size_t>(at.axis);
        std::vector<Var> parts;
        if (at.start > 0) {
            Shape s = xs;
            s[axis] = at.start;
            parts.push_back(g.zeros(s));
        }
        parts.push_back(gy);
        const std::int64_t tail = xs[axis] - at.start - at.length;
        if (tail > 0) {
            Shape s = xs;
            s[axis] = tail;
            parts.push_back(g.zeros(s));
        }
        out[0] = concat(parts, at.axis);
        break;
    }

    case OpKind::cross_entropy: {
        Var logits = c.in[0];
        const auto& tg = *at.index;
        const std::int64_t v = logits.shape()[1];
        Tensor onehot(logits.shape(), g.dtype());
        Tensor rowmask({logits.shape()[0], 1}, g.dtype());
        std::int64_t valid = 0;
        for (std::size_t r = 0; r < tg.size(); ++r) {
            if (tg[r] < 0)
                continue;
            onehot.set(static_cast<std::int64_t>(r) * v + tg[r], 1.0);
            rowmask.set(static_cast<std::int64_t>(r), 1.0);
            ++valid;
        }
        Var diff = mul(sub(softmax(logits), g.constant(std::move(onehot))), g.constant(std::move(rowmask)));
        out[0] = mul(scale(diff, 1.0 / static_cast<double>(valid)), gy);
        break;
    }

    case OpKind::straight_through:
        out[0] = gy;
        break;

    case OpKind::clamp: {
        const Tensor& x = c.in[0].value();
        Tensor mask(x.shape(), g.dtype());
        for (std::int64_t i = 0; i < x.size(); ++i)
            mask.set(i, (x.at(i) >= at.scalar && x.at(i) <= at.scalar2) ? 1.0 : 0.0);
        out[0] = mul(gy, g.constant(std::move(mask)));
        break;
    }

    case OpKind::frobenius_sq:
        out[0] = mul(scale(c.in[0], 2.0), gy);
        break;

    case OpKind::cosine_similarity: {
        Var a = c.in[0];
        Var b = c.in[1];
        Var na2 = frobenius_sq(a);
        Var nb2 = frobenius_sq(b);
        Var inv = pow(mul(na2, nb2), -0.5);
        if (c.need(0)) {
            Var t = sub(mul(b, inv), mul(a, mul(c.self, pow(na2, -1.0))));
            out[0] = mul(t, gy);
        }
        if (c.need(1)) {
            Var t = sub(mul(a, inv), mul(b, mul(c.self, pow(nb2, -1.0))));
            out[1] = mul(t, gy);
        }
        break;
    }

    case OpKind::opaque: {
        std::vector<Var> args = c.in;
        args.push_back(c.self);
        args.push_back(gy);
        for (std::size_t i = 0; i < c.in.size(); ++i) {
            if (!c.need(i))
                continue;
            OpAttrs ga;
            ga.custom = at.custom;
            ga.axis = static_cast<int>(i);
            ga.length = static_cast<std::int64_t>(c.in.size());
            out[i] = g.add_node(OpKind::opaque_grad, args, std::move(ga));
        }
        break;
    }

    case OpKind::opaque_grad:
        throw UnsupportedOpError("no derivative rule for the gradient of custom op '"
                                 + c.node.attrs.custom->name + "'");
    }
    return out;
}

} // namespace

Var Gradients::operator[](Var wrt) const
{
    for (std::size_t i = 0; i < ids_.size(); ++i)
        if (ids_[i] == wrt.id())
            return grads_[i];
    throw ContractError("gradient requested for a node that was not a differentiation target");
}

bool Gradients::unreachable(Var wrt) const
{
    for (std::size_t i = 0; i < ids_.size(); ++i)
        if (ids_[i] == wrt.id())
            return unreachable_[i];
    throw ContractError("gradient requested for a node that was not a differentiation target");
}

bool Gradients::any_unreachable() const
{
    return std::any_of(unreachable_.begin(), unreachable_.end(), [](bool b) { return b; });
}

Gradients backward(Var root, std::span<const Var> wrt)
{
    Graph& g = root.graph();
    if (root.value().size() != 1)
        throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape()));
    const int r = root.id();
    for (const Var& w : wrt) {
        if (&w.graph() != &g)
            throw ContractError("backward: target from another graph");
        if (!w.requires_grad())
            throw ContractError("backward: target node " + std::to_string(w.id())
                                + " does not require grad");
    }

    // needs[i]: node i lies on a path from some target to the root
    const auto n = static_cast<std::size_t>(std::max(r, 0)) + 1;
    std::vector<char> depends(n, 0);
    for (const Var& w : wrt)
        if (w.id() <= r)
            depends[static_cast<std::size_t>(w.id())] = 1;
    for (std::size_t id = 0; id < n; ++id) {
        if (depends[id])
            continue;
        for (int in : g.node(static_cast<int>(id)).inputs)
            if (depends[static_cast<std::size_t>(in)]) {
                depends[id] = 1;
                break;
            }
    }
    std::vector<char> reaches(n, 0);
    reaches[static_cast<std::size_t>(r)] = 1;
    for (std::size_t id = n; id-- > 0;) {
        if (!reaches[id])
            continue;
        for (int in : g.node(static_cast<int>(id)).inputs)
            reaches[static_cast<std::size_t>(in)] = 1;
    }
    std::vector<char> needs(n, 0);
    for (std::size_t id = 0; id < n; ++id)
        needs[id] = depends[id] && reaches[id];

    std::vector<Var> adj(n);
    if (needs[static_cast<std::size_t>(r)])
        adj[static_cast<std::size_t>(r)] = g.constant(Tensor(root.shape(), g.dtype(), 1.0));

    for (std::size_t id = n; id-- > 0;) {
        if (!needs[id] || !adj[id].valid())
            continue;
        const Node& node = g.node(static_cast<int>(id));
        if (node.kind == OpKind::leaf)
            continue;
        RuleContext ctx{g, node, Var(&g, static_cast<int>(id)), adj[id], {}, needs};
        for (int in : node.inputs)
            ctx.in.emplace_back(&g, in);
        auto contrib = vjp(ctx);
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            const auto in = static_cast<std::size_t>(node.inputs[i]);
            if (!needs[in] || !contrib[i].valid())
                continue;
            adj[in] = adj[in].valid() ? add(adj[in], contrib[i]) : contrib[i];
        }
    }

    Gradients out;
    for (const Var& w : wrt) {
        out.ids_.push_back(w.id());
        const auto id = static_cast<std::size_t>(w.id());
        if (id < n && adj[id].valid()) {
            out.grads_.push_back(adj[id]);
            out.unreachable_.push_back(false);
        } else {
            out.grads_.push_back(g.zeros(w.shape()));
            out.unreachable_.push_back(true);
        }
    }
    return out;
}

Gradients backward(Var root, std::initializer_list<Var> wrt)
{
    return backward(root, std::span<const Var>(wrt.begin(), wrt.size()));
}

Gradients grad_of_grad(Var root, Var inner, std::span<const Var> outer)
{
    Var inner_grad = backward(root, {inner})[inner];
    return backward(frobenius_sq(inner_grad), outer);
}

} // namespace quantlab
