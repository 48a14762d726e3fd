#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lvlmlens {

enum class ErrorCode {
    MissingFile,
    ManifestSchemaError,
    ShapeMismatch,
    MaskViolation,
    IoError,
    IndexOutOfRange,
    InvalidConfig,
    VocabOverflow,
    NotAGeneratedToken,
    EmptySelection,
    NoImage,
    NotNormalized,
    MissingGradients,
    ZeroDimension,
    EmptyModality,
    DegenerateRow,
    InsufficientSamples,
    NotDisjoint,
    OracleFailure,
    CyclicGraph,
    RootNotFound,
    VerifierFailure,
    PortInUse,
    BadTracesDir,
    BadParams,
};

std::string_view to_string(ErrorCode code) noexcept;

// Single exception type for every module; the code is what callers branch on.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace lvlmlens
