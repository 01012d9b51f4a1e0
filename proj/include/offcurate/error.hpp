#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace offcurate {

enum class ErrorCode {
    ZeroNorm,
    NonFinite,
    DimensionMismatch,
    InsufficientData,
    EmptyCorpus,
    InvalidArgument,
    DecodeFailure,
    BackendFailure,
    TokenizeFailure,
    NoImagesFound,
    CorruptCache,
    VersionUnsupported,
    IoFailure,
    InvalidThresholds,
    RatingOutOfRange,
    MissingColumn,
    DuplicateId,
    ParseFailure,
    TooFewExamples,
    TooFewFolds,
    IdMismatch,
    BadTemplate,
    EmptyBatch,
    EmptyTrainSet,
    Divergence,
    SingularProblem,
    EmptyDataset,
    MissingEmbeddings,
    UnknownRun,
    UnknownRecord,
    BadCursor,
    StorageFailure,
    InsufficientVerdicts,
    NotFound,
    Forbidden,
    UnknownJob,
    AddressInUse,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::ZeroNorm: return "ZeroNorm";
        case ErrorCode::NonFinite: return "NonFinite";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::EmptyCorpus: return "EmptyCorpus";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::DecodeFailure: return "DecodeFailure";
        case ErrorCode::BackendFailure: return "BackendFailure";
        case ErrorCode::TokenizeFailure: return "TokenizeFailure";
        case ErrorCode::NoImagesFound: return "NoImagesFound";
        case ErrorCode::CorruptCache: return "CorruptCache";
        case ErrorCode::VersionUnsupported: return "VersionUnsupported";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::InvalidThresholds: return "InvalidThresholds";
        case ErrorCode::RatingOutOfRange: return "RatingOutOfRange";
        case ErrorCode::MissingColumn: return "MissingColumn";
        case ErrorCode::DuplicateId: return "DuplicateId";
        case ErrorCode::ParseFailure: return "ParseFailure";
        case ErrorCode::TooFewExamples: return "TooFewExamples";
        case ErrorCode::TooFewFolds: return "TooFewFolds";
        case ErrorCode::IdMismatch: return "IdMismatch";
        case ErrorCode::BadTemplate: return "BadTemplate";
        case ErrorCode::EmptyBatch: return "EmptyBatch";
        case ErrorCode::EmptyTrainSet: return "EmptyTrainSet";
        case ErrorCode::Divergence: return "Divergence";
        case ErrorCode::SingularProblem: return "SingularProblem";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::MissingEmbeddings: return "MissingEmbeddings";
        case ErrorCode::UnknownRun: return "UnknownRun";
        case ErrorCode::UnknownRecord: return "UnknownRecord";
        case ErrorCode::BadCursor: return "BadCursor";
        case ErrorCode::StorageFailure: return "StorageFailure";
        case ErrorCode::InsufficientVerdicts: return "InsufficientVerdicts";
        case ErrorCode::NotFound: return "NotFound";
        case ErrorCode::Forbidden: return "Forbidden";
        case ErrorCode::UnknownJob: return "UnknownJob";
        case ErrorCode::AddressInUse: return "AddressInUse";
    }
    return "Unknown";
}

/// Every failure the library raises carries a machine-readable code; the
/// message is for humans.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace offcurate
