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

#include "quantlab/tensor/graph.hpp"

#include <vector>

namespace quantlab::detail {

Shape broadcast_shape(const Shape& a, const Shape& b, OpKind kind);

/// Forward evaluation of one node from its input values.
Tensor compute_forward(OpKind kind, const OpAttrs& attrs, const std::vector<const Tensor*>& in,
                       DType dtype);

double round_half_even(double x);

} // namespace quantlab::detail
