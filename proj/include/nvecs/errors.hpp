#pragma once

#include <stdexcept>
#include <string>

namespace nvecs {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operator/state dimensions that do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Unknown, duplicate or missing factor labels.
class LabelError : public Error {
public:
    using Error::Error;
};

// Fock truncation too small for the requested coherent amplitude.
class TruncationError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Requested parameters cannot be realized (e.g. target |beta| above the
// reachable displacement).
class InfeasibleError : public Error {
public:
    using Error::Error;
};

// Integrator failure. Carries the simulation time at which it happened.
class IntegrationError : public Error {
public:
    IntegrationError(const std::string& what, double time)
        : Error(what + " (t = " + std::to_string(time) + " us)"), time_(time) {}

    double time() const noexcept { return time_; }

private:
    double time_;
};

// Integration finished but a conserved quantity drifted beyond tolerance.
class AccuracyError : public Error {
public:
    using Error::Error;
};

}  // namespace nvecs
