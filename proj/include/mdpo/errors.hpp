// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mdpo {

/// Operands with incompatible shapes; the message names the op and both shapes.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input outside an op's documented domain (e.g. log of a non-positive value).
class DomainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration, including unknown config keys.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input files (datasets, checkpoints, metrics logs).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training aborted; carries the diagnostics assembled at the failing step.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mdpo
