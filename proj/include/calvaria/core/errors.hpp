#pragma once

#include <stdexcept>
#include <string>

namespace calvaria {

/// Base class for all calvaria errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument to a public operation (bad shape, out-of-range value, ...).
class ArgumentError : public Error {
public:
    using Error::Error;
};

/// Tensor/volume shape incompatible with the requested operation.
class ShapeError : public ArgumentError {
public:
    using ArgumentError::ArgumentError;
};

/// File payload inconsistent with its header.
class FormatError : public Error {
public:
    using Error::Error;
};

/// File header declares a version this build does not understand.
class VersionError : public Error {
public:
    using Error::Error;
};

/// Input outside the mathematical domain of the operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Requested phantom geometry cannot be realized.
class GenerationError : public Error {
public:
    using Error::Error;
};

/// No foreground voxels above threshold.
class EmptyForegroundError : public Error {
public:
    using Error::Error;
};

/// Operation invoked before its prerequisites exist (weights, artifacts, splits).
class StateError : public Error {
public:
    using Error::Error;
};

/// Bad or inconsistent experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Too few usable observations for a statistical test.
class InsufficientDataError : public Error {
public:
    using Error::Error;
};

/// Surface distance undefined because a label is empty in one of the masks.
class UndefinedDistanceError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss; carries the offending batch id.
class TrainingAbort : public Error {
public:
    using Error::Error;
};

} // namespace calvaria
