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

#include <stdexcept>
#include <string>

namespace quantlab {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes incompatible for an op; the message names the op kind.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
public:
    using Error::Error;
};

/// Differentiation reached an op without a higher-order derivative rule.
class UnsupportedOpError : public Error {
public:
    using Error::Error;
};

/// Bad user data: token ids out of range, empty corpora, non-finite weights.
class InputError : public Error {
public:
    using Error::Error;
};

/// Corrupted or unrecognised serialized data.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Divergence, failed factorizations and other numerical breakdowns.
class NumericalError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace quantlab
