#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace segcal {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A caller-supplied value is out of its allowed domain. Maps to CLI exit code 1.
class ValidationError : public Error {
public:
    using Error::Error;
};

class DimensionError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ParameterError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ConfigError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class SplitError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class GenerationError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class MetricError : public Error {
public:
    using Error::Error;
};

class DegenerateError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class CompatibilityError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class InternalError : public Error {
public:
    using Error::Error;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double learning_rate = 0.0;
};

using TrainingLog = std::vector<EpochRecord>;

/// Training diverged; carries the log up to the failing epoch.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, TrainingLog log)
        : Error(what), log_(std::move(log)) {}

    const TrainingLog& log() const noexcept { return log_; }

private:
    TrainingLog log_;
};

}  // namespace segcal
