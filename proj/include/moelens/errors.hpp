#pragma once

#include <stdexcept>
#include <string>

namespace moelens {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// An argument is outside its documented range.
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Caller-supplied data (token ids, sequence length, files) is unusable.
class InputError : public Error {
public:
    using Error::Error;
};

class DivergedError : public Error {
public:
    DivergedError(int step, const std::string& what)
        : Error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}
    int step() const noexcept { return step_; }

private:
    int step_;
};

// Checkpoint loading failures. Each cause has its own type so callers can
// tell a foreign file from a damaged one.
class LoadError : public Error {
public:
    using Error::Error;
};

class BadMagicError : public LoadError {
public:
    using LoadError::LoadError;
};

class VersionError : public LoadError {
public:
    using LoadError::LoadError;
};

class TruncatedError : public LoadError {
public:
    using LoadError::LoadError;
};

class ConsistencyError : public LoadError {
public:
    using LoadError::LoadError;
};

}  // namespace moelens
