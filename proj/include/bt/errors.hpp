#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace bt {

enum class ErrorKind {
    not_positive_definite,
    dimension_mismatch,
    non_convergence,
    empty_dataset,
    invalid_class_pair,
    pool_too_small,
    enumeration_too_large,
    degenerate_weights,
    protocol_error,
    scorer_error,
    timeout,
    bad_magic,
    truncated_file,
    label_out_of_range,
    io_error,
    invalid_argument,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Base of every error raised by the library. `kind()` is stable and is what
/// the CLI reports in its structured error line.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class NotPositiveDefinite : public Error {
public:
    NotPositiveDefinite(std::size_t dim, double attempted_jitter);
    double attempted_jitter() const noexcept { return jitter_; }

private:
    double jitter_;
};

class NonConvergence : public Error {
public:
    NonConvergence(int iterations, double grad_norm);
    double grad_norm() const noexcept { return grad_norm_; }

private:
    double grad_norm_;
};

class TruncatedFile : public Error {
public:
    explicit TruncatedFile(std::uint64_t offset);
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class ScorerError : public Error {
public:
    explicit ScorerError(const std::string& remote_message)
        : Error(ErrorKind::scorer_error, "scorer reported error: " + remote_message),
          remote_(remote_message) {}
    const std::string& remote_message() const noexcept { return remote_; }

private:
    std::string remote_;
};

[[noreturn]] void throw_dimension_mismatch(const std::string& what);

}  // namespace bt
