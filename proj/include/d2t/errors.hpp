#pragma once

#include <stdexcept>
#include <string>

namespace d2t {

// Error hierarchy shared by all modules. Everything derives from
// std::runtime_error so callers can catch broadly at the CLI boundary.

struct MalformedMR : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnknownId : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonFiniteValue : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LengthMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyBeam : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyCandidate : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace d2t
