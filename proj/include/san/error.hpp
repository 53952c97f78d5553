#pragma once

#include <stdexcept>
#include <string>

namespace san {

/// Base class for all errors raised by the library. The exit code is what
/// the command-line front end returns when the error escapes a command.
class Error : public std::runtime_error {
public:
    Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error("config error: " + what, 2) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(what, 3) {}
};

class MissingFileError : public DataError {
public:
    explicit MissingFileError(const std::string& path) : DataError("missing file: " + path), path_(path) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

class SizeMismatchError : public DataError {
public:
    explicit SizeMismatchError(const std::string& what) : DataError("size mismatch: " + what) {}
};

class LabelRangeError : public DataError {
public:
    explicit LabelRangeError(const std::string& what) : DataError("label out of range: " + what) {}
};

class SplitOverlapError : public DataError {
public:
    explicit SplitOverlapError(const std::string& what) : DataError("train/test identity overlap: " + what) {}
};

class EmptyResultError : public DataError {
public:
    explicit EmptyResultError(const std::string& what) : DataError("empty result: " + what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error("numeric failure: " + what, 4) {}
};

class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& what) : std::invalid_argument("shape mismatch: " + what) {}
};

}  // namespace san
