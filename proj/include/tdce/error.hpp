#pragma once

#include <stdexcept>
#include <string>

namespace tdce {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dimension or layout mismatch between arrays, networks, or schemas.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite losses or gradients encountered while fitting a model.
class TrainingError : public Error {
public:
    using Error::Error;
};

/// Problems with raw tabular input (CSV, manifest, vocabulary).
class DataError : public Error {
public:
    using Error::Error;
};

/// Invalid argument to a numerical routine (temperature, step index, simplex).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Reverse-process failure during counterfactual generation.
class GenerationError : public Error {
public:
    using Error::Error;
};

/// Checkpoint bundle is inconsistent (missing file, version, schema hash).
class CheckpointError : public Error {
public:
    using Error::Error;
};

}  // namespace tdce
