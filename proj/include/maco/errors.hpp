#pragma once

#include <stdexcept>
#include <string>

namespace maco {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Extents of two operands disagree.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A scalar hyperparameter or argument is outside its domain.
class ParameterError : public Error {
public:
    using Error::Error;
};

// Malformed user input (text, ids, missing prompts, single-class data).
class InputError : public Error {
public:
    using Error::Error;
};

// Non-finite values during optimisation; carries the parameter name in what().
class TrainingError : public Error {
public:
    using Error::Error;
};

class OracleError : public Error {
public:
    using Error::Error;
};

class ObjectiveError : public Error {
public:
    using Error::Error;
};

class MetricError : public Error {
public:
    using Error::Error;
};

// Model or checkpoint not in a usable state.
class StateError : public Error {
public:
    using Error::Error;
};

// Corpus or configuration violates a structural constraint.
class SpecError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace maco
