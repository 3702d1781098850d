#ifndef PERMPRED_ERROR_HPP
#define PERMPRED_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace permpred {

/// Stable machine-readable error codes. The string forms appear in CLI error
/// envelopes and HTTP problem documents, so they must not change.
enum class ErrorCode {
    SchemaError,
    IntegrityError,
    RangeError,
    EmptyDataset,
    InvalidK,
    UnknownUser,
    InvalidSpec,
    DuplicateObservation,
    EmptyGraph,
    Divergence,
    ProviderUnavailable,
    UnparseableResponse,
    EmptyInput,
    AlreadyDecided,
    UnknownItem,
    NoSuchRule,
    TrainingFailure,
    InvalidConfig,
    InvalidArgument,
    StoreError,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::IntegrityError: return "IntegrityError";
    case ErrorCode::RangeError: return "RangeError";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::InvalidK: return "InvalidK";
    case ErrorCode::UnknownUser: return "UnknownUser";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::DuplicateObservation: return "DuplicateObservation";
    case ErrorCode::EmptyGraph: return "EmptyGraph";
    case ErrorCode::Divergence: return "Divergence";
    case ErrorCode::ProviderUnavailable: return "ProviderUnavailable";
    case ErrorCode::UnparseableResponse: return "UnparseableResponse";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::AlreadyDecided: return "AlreadyDecided";
    case ErrorCode::UnknownItem: return "UnknownItem";
    case ErrorCode::NoSuchRule: return "NoSuchRule";
    case ErrorCode::TrainingFailure: return "TrainingFailure";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::StoreError: return "StoreError";
    }
    return "Unknown";
}

/// Exception carrying an ErrorCode plus optional detail lines (offending
/// records for validation errors, raw provider text for provider errors).
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message, std::vector<std::string> details = {})
        : std::runtime_error(message), code_(code), details_(std::move(details)) {}

    ErrorCode code() const noexcept { return code_; }
    const std::vector<std::string>& details() const noexcept { return details_; }

private:
    ErrorCode code_;
    std::vector<std::string> details_;
};

} // namespace permpred

#endif // PERMPRED_ERROR_HPP
