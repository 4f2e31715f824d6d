#pragma once

#include <stdexcept>
#include <string>

namespace omtl {

/// Malformed input: bad files, inconsistent shapes, invalid configuration.
/// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Failure while computing: non-finite losses or gradients, broken
/// internal invariants. The CLI maps this to exit code 2.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

}  // namespace omtl
