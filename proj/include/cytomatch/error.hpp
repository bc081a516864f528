#ifndef CYTOMATCH_ERROR_HPP
#define CYTOMATCH_ERROR_HPP

#include <stdexcept>
#include <string>

/**
 * @file error.hpp
 *
 * @brief Exception hierarchy shared by every cytomatch module.
 *
 * Two families exist so that the command-line front end can map them onto exit codes:
 * `InputError` covers I/O and configuration problems (exit status 2),
 * `NumericalError` covers failures of the numerical machinery (exit status 1).
 */

namespace cytomatch {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InputError : public Error {
public:
    using Error::Error;
};

/** Malformed or unreadable delimited-text input. */
class LoadError : public InputError {
public:
    using InputError::InputError;
};

/** Unknown columns, missing levels, inconsistent panel definitions and the like. */
class ConfigError : public InputError {
public:
    using InputError::InputError;
};

/** Requested row counts do not fit the source matrix. */
class SizeError : public InputError {
public:
    using InputError::InputError;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

/** A marginal covariance block could not be factorized even after jitter. */
class ConditioningError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/** Non-finite log-likelihood or parameters during fitting. */
class FitError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ImputationError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class EvaluationError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/** Histogram with no spread, so no peaks can be located. */
class DegenerateHistogramError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}

#endif
