#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace idp {

enum class ErrorKind {
    SingularSystem,
    DimensionMismatch,
    NonFiniteGradient,
    BadMagic,
    VersionUnsupported,
    CorruptRecord,
    NonFiniteFeature,
    IoFailure,
    InsufficientSamples,
    DivergedLoss,
    EmptyBank,
    EmptyBatch,
    UnpairedInput,
    InvalidArgument,
    ConfigError,
};

inline constexpr std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::SingularSystem: return "SingularSystem";
        case ErrorKind::DimensionMismatch: return "DimensionMismatch";
        case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorKind::BadMagic: return "BadMagic";
        case ErrorKind::VersionUnsupported: return "VersionUnsupported";
        case ErrorKind::CorruptRecord: return "CorruptRecord";
        case ErrorKind::NonFiniteFeature: return "NonFiniteFeature";
        case ErrorKind::IoFailure: return "IoFailure";
        case ErrorKind::InsufficientSamples: return "InsufficientSamples";
        case ErrorKind::DivergedLoss: return "DivergedLoss";
        case ErrorKind::EmptyBank: return "EmptyBank";
        case ErrorKind::EmptyBatch: return "EmptyBatch";
        case ErrorKind::UnpairedInput: return "UnpairedInput";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
    if (!cond) fail(kind, what);
}

}  // namespace idp
