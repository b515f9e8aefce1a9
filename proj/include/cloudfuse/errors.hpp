#ifndef CLOUDFUSE_ERRORS_HPP
#define CLOUDFUSE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace cloudfuse {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad argument values (ranges, thresholds, negative DNs, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// Malformed patch/checkpoint header.
class FormatError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// Header is readable but the payload disagrees with it.
class CorruptionError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ConfigMismatchError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// NaN/Inf encountered during training.
class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace cloudfuse

#endif  // CLOUDFUSE_ERRORS_HPP
