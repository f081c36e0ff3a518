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

#include <functional>

namespace quantlab {

/// Central-difference gradient of a scalar function. Test oracle only.
Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& point,
                          double step);

/// max_i |a_i - b_i| / max(max_i |b_i|, floor)
double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12);

} // namespace quantlab
