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

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace quantlab {

/// Primitive operations. Every kind except `opaque_grad` has a derivative rule
/// that is itself written with these primitives, so gradients can be
/// differentiated again.
enum class OpKind : std::uint8_t {
    leaf,
    matmul,
    add,
    sub,
    mul,
    scale,
    sum,
    mean,
    sum_to,
    broadcast_to,
    exp,
    log,
    power,
    sigmoid,
    silu,
    softmax,
    layer_norm,
    rms_norm,
    embedding,
    embedding_scatter,
    transpose,
    reshape,
    concat,
    slice,
    cross_entropy,
    straight_through,
    clamp,
    frobenius_sq,
    cosine_similarity,
    opaque,
    opaque_grad,
};

std::string_view op_name(OpKind kind);

/// Forward rule of a straight-through node; the backward rule is always identity.
enum class StraightThrough : std::uint8_t {
    round_half_even,
    /// scale * clamp(round(w / scale), -1, 1) with scale = mean |w|
    ternary_absmean,
};

/// User-supplied op with a numeric first-order rule only. Differentiating its
/// gradient raises UnsupportedOpError.
struct CustomOp {
    std::string name;
    std::function<Tensor(std::span<const Tensor* const>)> forward;
    /// Returns one gradient per input given inputs, output and output gradient.
    std::function<std::vector<Tensor>(std::span<const Tensor* const>, const Tensor&, const Tensor&)> vjp;
};

struct OpAttrs {
    double scalar = 0.0;
    double scalar2 = 0.0;
    int axis = 0;
    std::int64_t start = 0;
    std::int64_t length = 0;
    bool flag_a = false;
    bool flag_b = false;
    Shape shape;
    std::shared_ptr<const std::vector<std::int64_t>> index;
    StraightThrough st = StraightThrough::round_half_even;
    std::shared_ptr<const CustomOp> custom;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;
    Var(Graph* graph, int id) : graph_(graph), id_(id) {}

    bool valid() const { return graph_ != nullptr && id_ >= 0; }
    Graph& graph() const { return *graph_; }
    int id() const { return id_; }

    const Tensor& value() const;
    const Shape& shape() const;
    bool requires_grad() const;

private:
    Graph* graph_ = nullptr;
    int id_ = -1;
};

struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<int> inputs;
    OpAttrs attrs;
    Tensor value;
    bool requires_grad = false;
    std::string label;
};

/// Define-by-run computation graph. Nodes are evaluated when created and kept
/// in creation order, which is also a valid topological order.
class Graph {
public:
    explicit Graph(DType dtype = DType::f32) : dtype_(dtype) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    DType dtype() const { return dtype_; }

    /// Differentiable leaf (parameters, probed hidden states).
    Var param(Tensor value, std::string label = {});
    /// Leaf that is not a differentiation target.
    Var constant(Tensor value, std::string label = {});
    Var constant(double value);
    Var zeros(const Shape& shape);

    /// Replaces a leaf's value; call evaluate() to refresh dependents.
    void set_value(Var leaf, Tensor value);

    /// Recomputes every ancestor of root from the leaves and returns root's value.
    const Tensor& evaluate(Var root);

    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    Var add_node(OpKind kind, std::span<const Var> inputs, OpAttrs attrs);

private:
    Tensor compute(const Node& node) const;

    DType dtype_;
    std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitive constructors.

/// Matrix product over the last two axes; optional leading batch axis shared by both.
Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
/// Elementwise with broadcasting of either operand (numpy rules).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var mean(Var a);
/// Reduces a by summation to a shape that broadcasts to a's shape.
Var sum_to(Var a, Shape shape);
Var broadcast_to(Var a, Shape shape);
Var exp(Var a);
Var log(Var a);
Var pow(Var a, double exponent);
Var sigmoid(Var a);
Var silu(Var a);
/// Softmax over the last axis. With `causal`, entries above the diagonal of the
/// last two axes are excluded (output zero).
Var softmax(Var a, bool causal = false);
Var layer_norm(Var a, double eps = 1e-5);
Var rms_norm(Var a, double eps = 1e-6);
/// Gathers rows of a [V, d] table.
Var embedding(Var table, std::shared_ptr<const std::vector<std::int64_t>> ids);
/// Scatter-adds rows of a [n, d] tensor into a [rows, d] zero tensor.
Var embedding_scatter(Var rows_in, std::shared_ptr<const std::vector<std::int64_t>> ids,
                      std::int64_t rows);
/// Swaps the last two axes.
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var concat(std::span<const Var> parts, int axis);
Var slice(Var a, int axis, std::int64_t start, std::int64_t length);
/// Mean cross-entropy of logits [N, V] against targets; target -1 is ignored.
Var cross_entropy(Var logits, std::shared_ptr<const std::vector<std::int64_t>> targets);
Var straight_through(Var a, StraightThrough rule);
Var clamp(Var a, double lo, double hi);
Var frobenius_sq(Var a);
/// Cosine similarity of the flattened operands.
Var cosine_similarity(Var a, Var b);
Var custom(std::shared_ptr<const CustomOp> op, std::span<const Var> inputs);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Differentiation.

class Gradients {
public:
    /// Gradient node for a differentiation target passed to backward().
    Var operator[](Var wrt) const;
    bool unreachable(Var wrt) const;
    bool any_unreachable() const;
    std::size_t size() const { return ids_.size(); }

private:
    friend Gradients backward(Var root, std::span<const Var> wrt);
    std::vector<int> ids_;
    std::vector<Var> grads_;
    std::vector<bool> unreachable_;
};

/// Reverse-mode gradients of a scalar root. The returned gradients are graph
/// nodes built from primitives and may themselves be differentiated.
Gradients backward(Var root, std::span<const Var> wrt);
Gradients backward(Var root, std::initializer_list<Var> wrt);

/// d ||d root / d inner||^2 / d theta for each theta in outer.
Gradients grad_of_grad(Var root, Var inner, std::span<const Var> outer);

const Tensor& evaluate(Var root);

} // namespace quantlab
