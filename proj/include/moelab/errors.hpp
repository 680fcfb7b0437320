// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

/// Base of every error raised by the library. Callers that only need to
/// report a failure can catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or width mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A precondition on an argument value was violated.
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// The object is in a state where the operation is undefined
/// (all experts masked, empty pool, missing reference, ...).
class StateError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf produced where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Filesystem or parse failure on an artifact.
class IoError : public Error {
public:
    using Error::Error;
};

/// A pruning rule could not produce a valid plan (strict threshold wipe-out).
class PlanError : public Error {
public:
    using Error::Error;
};

} // namespace moelab
