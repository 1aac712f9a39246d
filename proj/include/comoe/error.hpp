// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace comoe {

// Base for every error thrown by the library. The C API maps subclasses
// onto status codes, so new error kinds should subclass one of these.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible (matmul inner dims, elementwise mismatch).
struct ShapeError : Error {
    using Error::Error;
};

// A value is outside an operation's mathematical domain (log of a
// non-positive number, normalizing the zero vector).
struct DomainError : Error {
    using Error::Error;
};

// A caller broke an API contract (non-scalar loss, k out of range,
// empty positive/negative set).
struct ContractError : Error {
    using Error::Error;
};

// Structured input failed validation (malformed joint distribution,
// mismatched marginals, corrupt logs or config values).
struct ValidationError : Error {
    using Error::Error;
};

// Filesystem / parse failures.
struct IoError : Error {
    using Error::Error;
};

}  // namespace comoe
