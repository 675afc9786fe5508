#include "bt/errors.hpp"

#include <sstream>

namespace bt {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::not_positive_definite: return "NotPositiveDefinite";
        case ErrorKind::dimension_mismatch: return "DimensionMismatch";
        case ErrorKind::non_convergence: return "NonConvergence";
        case ErrorKind::empty_dataset: return "EmptyDataset";
        case ErrorKind::invalid_class_pair: return "InvalidClassPair";
        case ErrorKind::pool_too_small: return "PoolTooSmall";
        case ErrorKind::enumeration_too_large: return "EnumerationTooLarge";
        case ErrorKind::degenerate_weights: return "DegenerateWeights";
        case ErrorKind::protocol_error: return "ProtocolError";
        case ErrorKind::scorer_error: return "ScorerError";
        case ErrorKind::timeout: return "Timeout";
        case ErrorKind::bad_magic: return "BadMagic";
        case ErrorKind::truncated_file: return "TruncatedFile";
        case ErrorKind::label_out_of_range: return "LabelOutOfRange";
        case ErrorKind::io_error: return "IoError";
        case ErrorKind::invalid_argument: return "InvalidArgument";
    }
    return "Unknown";
}

namespace {

std::string npd_message(std::size_t dim, double jitter) {
    std::ostringstream os;
    os << "matrix of dimension " << dim << " is not positive definite (last jitter tried: "
       << jitter << ")";
    return os.str();
}

std::string nc_message(int iterations, double grad_norm) {
    std::ostringstream os;
    os << "optimizer did not converge after " << iterations
       << " iterations (gradient inf-norm " << grad_norm << ")";
    return os.str();
}

}  // namespace

NotPositiveDefinite::NotPositiveDefinite(std::size_t dim, double attempted_jitter)
    : Error(ErrorKind::not_positive_definite, npd_message(dim, attempted_jitter)),
      jitter_(attempted_jitter) {}

NonConvergence::NonConvergence(int iterations, double grad_norm)
    : Error(ErrorKind::non_convergence, nc_message(iterations, grad_norm)),
      grad_norm_(grad_norm) {}

TruncatedFile::TruncatedFile(std::uint64_t offset)
    : Error(ErrorKind::truncated_file, "file truncated at byte offset " + std::to_string(offset)),
      offset_(offset) {}

void throw_dimension_mismatch(const std::string& what) {
    throw Error(ErrorKind::dimension_mismatch, what);
}

}  // namespace bt
