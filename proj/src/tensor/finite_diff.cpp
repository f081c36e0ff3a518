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

#include "quantlab/tensor/finite_diff.hpp"

#include "quantlab/error.hpp"

#include <algorithm>
#include <cmath>

namespace quantlab {

Tensor finite_diff_oracle(const std::function<double(const Tensor&)>& f, const Tensor& point,
                          double step)
{
    Tensor probe = point.cast(DType::f64);
    Tensor grad(point.shape(), DType::f64);
    for (std::int64_t i = 0; i < probe.size(); ++i) {
        const double x0 = probe.at(i);
        probe.set(i, x0 + step);
        const double up = f(probe);
        probe.set(i, x0 - step);
        const double down = f(probe);
        probe.set(i, x0);
        grad.set(i, (up - down) / (2.0 * step));
    }
    return grad;
}

double max_relative_error(const Tensor& a, const Tensor& b, double floor)
{
    if (a.shape() != b.shape())
        throw ShapeError("max_relative_error: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double diff = 0.0;
    double scale = floor;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
        scale = std::max(scale, std::abs(b.at(i)));
    }
    return diff / scale;
}

} // namespace quantlab
