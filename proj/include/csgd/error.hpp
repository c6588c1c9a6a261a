#pragma once

#include <stdexcept>
#include <string>

namespace csgd {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes that do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid argument value (cluster count out of range, negative strength, ...).
class InputError : public Error {
public:
    using Error::Error;
};

/// Malformed experiment configuration or network spec. The message carries the field path.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Graph or constraint-group violation (follower clusters differ from the pacesetter, ...).
class StructuralError : public Error {
public:
    using Error::Error;
};

/// Trim refused because clustered filters have not collapsed.
class NotIdenticalError : public Error {
public:
    using Error::Error;
};

/// Model file with bad magic, version, CRC or truncated payload.
class CorruptFileError : public Error {
public:
    using Error::Error;
};

/// Training diverged (non-finite loss).
class TrainingError : public Error {
public:
    using Error::Error;
};

} // namespace csgd
