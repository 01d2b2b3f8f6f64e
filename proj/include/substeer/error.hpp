#pragma once

#include <stdexcept>
#include <string>

namespace substeer {

// Error categories map onto CLI exit codes: usage/parameter -> 1,
// data/format -> 2, numeric -> 3.
enum class ErrorKind {
    parameter,
    usage,
    data,
    format,
    numeric,
    degeneracy,
    shortfall,
    internal,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ParameterError : Error {
    explicit ParameterError(const std::string& what) : Error(ErrorKind::parameter, what) {}
};

struct UsageError : Error {
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

struct DegeneracyError : Error {
    DegeneracyError(std::size_t index, const std::string& what)
        : Error(ErrorKind::degeneracy, what), index(index) {}
    std::size_t index;
};

struct ShortfallError : Error {
    ShortfallError(std::size_t found, std::size_t wanted, const std::string& what)
        : Error(ErrorKind::shortfall, what), found(found), wanted(wanted) {}
    std::size_t found;
    std::size_t wanted;
};

struct TrainingError : Error {
    TrainingError(std::size_t step, const std::string& what)
        : Error(ErrorKind::numeric, what), step(step) {}
    std::size_t step;
};

struct EmptyMatrixError : Error {
    explicit EmptyMatrixError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct InternalError : Error {
    explicit InternalError(const std::string& what) : Error(ErrorKind::internal, what) {}
};

enum class FormatErrorCode {
    bad_magic,
    bad_version,
    truncated,
    invariant,
    empty_matrix,
    metadata,
    io,
};

const char* to_string(FormatErrorCode code) noexcept;

struct FormatError : Error {
    FormatError(FormatErrorCode code, const std::string& what)
        : Error(ErrorKind::format, std::string(to_string(code)) + ": " + what), code(code) {}
    FormatErrorCode code;
};

inline const char* to_string(FormatErrorCode code) noexcept {
    switch (code) {
    case FormatErrorCode::bad_magic: return "bad magic";
    case FormatErrorCode::bad_version: return "unsupported version";
    case FormatErrorCode::truncated: return "truncated file";
    case FormatErrorCode::invariant: return "invariant violation";
    case FormatErrorCode::empty_matrix: return "empty matrix";
    case FormatErrorCode::metadata: return "bad metadata";
    case FormatErrorCode::io: return "io error";
    }
    return "format error";
}

// Exit code used by the CLI for an error of the given kind.
inline int exit_code_for(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::parameter:
    case ErrorKind::usage:
    case ErrorKind::shortfall:
        return 1;
    case ErrorKind::data:
    case ErrorKind::format:
    case ErrorKind::degeneracy:
        return 2;
    case ErrorKind::numeric:
        return 3;
    case ErrorKind::internal:
        return 2;
    }
    return 2;
}

} // namespace substeer
