// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tinymoe {

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError/ParamError/SchemaError -> 2, NumericError -> 3, IoError -> 4.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ParamError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class SchemaError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <class E = ParamError>
inline void check(bool cond, const std::string& msg) {
    if (!cond) throw E(msg);
}

} // namespace tinymoe
