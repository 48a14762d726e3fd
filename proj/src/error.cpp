#include "lvlmlens/error.hpp"

namespace lvlmlens {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::MissingFile: return "MissingFile";
        case ErrorCode::ManifestSchemaError: return "ManifestSchemaError";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::MaskViolation: return "MaskViolation";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::VocabOverflow: return "VocabOverflow";
        case ErrorCode::NotAGeneratedToken: return "NotAGeneratedToken";
        case ErrorCode::EmptySelection: return "EmptySelection";
        case ErrorCode::NoImage: return "NoImage";
        case ErrorCode::NotNormalized: return "NotNormalized";
        case ErrorCode::MissingGradients: return "MissingGradients";
        case ErrorCode::ZeroDimension: return "ZeroDimension";
        case ErrorCode::EmptyModality: return "EmptyModality";
        case ErrorCode::DegenerateRow: return "DegenerateRow";
        case ErrorCode::InsufficientSamples: return "InsufficientSamples";
        case ErrorCode::NotDisjoint: return "NotDisjoint";
        case ErrorCode::OracleFailure: return "OracleFailure";
        case ErrorCode::CyclicGraph: return "CyclicGraph";
        case ErrorCode::RootNotFound: return "RootNotFound";
        case ErrorCode::VerifierFailure: return "VerifierFailure";
        case ErrorCode::PortInUse: return "PortInUse";
        case ErrorCode::BadTracesDir: return "BadTracesDir";
        case ErrorCode::BadParams: return "BadParams";
    }
    return "Unknown";
}

}  // namespace lvlmlens
