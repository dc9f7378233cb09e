#pragma once

#include <stdexcept>
#include <string>

namespace bdistill {

/// Argument outside its mathematical domain (p <= 0, gamma >= 1, V < 2, ...).
class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Requested model exceeds a configured table-size cap.
class SizeLimitError : public std::length_error {
public:
    using std::length_error::length_error;
};

/// Fixed-point iteration did not reach tolerance within its iteration budget.
class ConvergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A projection was asked to renormalize a row with zero in-set mass.
class DegenerateSupportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Finite value read from an entry the top-p mask removes.
class MaskedAccessError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// NaN or infinity appeared where a finite value is required.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace bdistill
