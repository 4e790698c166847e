#pragma once

#include <stdexcept>
#include <string>

namespace kdrop {

/// Process exit codes used by the command line tool.
enum class ErrorKind { Config = 2, Data = 3, Numeric = 4 };

inline const char *to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Data: return "data";
    case ErrorKind::Numeric: return "numeric";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string &what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }
    int exit_code() const noexcept { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string &what) : Error(ErrorKind::Config, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string &what) : Error(ErrorKind::Data, what) {}
};

struct NumericError : Error {
    explicit NumericError(const std::string &what) : Error(ErrorKind::Numeric, what) {}
};

/// Distinct failure modes of the binary readers.
enum class FormatFault { BadMagic, Version, Truncated, Checksum, Invalid, Io };

class FormatError : public DataError {
public:
    FormatError(FormatFault fault, const std::string &what, long long offset = -1)
        : DataError(what), fault_(fault), offset_(offset) {}
    FormatFault fault() const noexcept { return fault_; }
    long long offset() const noexcept { return offset_; }

private:
    FormatFault fault_;
    long long offset_;
};

} // namespace kdrop
