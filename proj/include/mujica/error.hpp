// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mujica {

// Error kinds map onto CLI exit codes: Validation -> 1, Runtime -> 2.
enum class ErrorKind {
    Validation,
    Runtime,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline Error validation_error(const std::string& message) {
    return Error(ErrorKind::Validation, message);
}

inline Error runtime_error(const std::string& message) {
    return Error(ErrorKind::Runtime, message);
}

} // namespace mujica
