#pragma once

#include "bt/errors.hpp"
#include "bt/image.hpp"
#include "bt/learner.hpp"

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bt {

struct ScoreRequest {
    std::uint64_t id = 0;
    Image image;
    std::vector<std::uint32_t> classes;
};

struct ScoreResponse {
    std::uint64_t id = 0;
    std::vector<double> probs;        // aligned to the requested classes
    std::optional<std::string> error;  // set when the remote reported a failure
};

/// Finite and within [0,1]; a full-class response must also sum to 1 within
/// 1e-9. Throws ScorerError.
void check_probabilities(std::span<const double> probs, bool full_class);

/// Distinct class indices below `classes`, at least one. Throws InvalidArgument.
void check_class_list(std::span<const std::uint32_t> requested, std::size_t classes);

/// Q(Y | image) for a subset of classes.
class Scorer {
public:
    virtual ~Scorer() = default;

    virtual std::size_t classes() const = 0;
    virtual std::string id() const = 0;
    virtual std::vector<double> score(const Image& img, std::span<const std::uint32_t> classes) = 0;

    /// An independent scorer with the same behaviour; used to give each
    /// worker its own connection.
    virtual std::unique_ptr<Scorer> clone() const = 0;

    /// True when score() may be called concurrently on one instance.
    virtual bool thread_safe() const { return false; }

    double score_one(const Image& img, std::uint32_t cls);
};

/// Softmax head over grid × grid area-averaged grayscale features.
class ToyScorer final : public Scorer {
public:
    explicit ToyScorer(HeadWeights head, std::size_t grid = 16);

    std::size_t classes() const override { return head_.classes(); }
    std::string id() const override;
    std::vector<double> score(const Image& img, std::span<const std::uint32_t> classes) override;
    std::unique_ptr<Scorer> clone() const override { return std::make_unique<ToyScorer>(head_, grid_); }
    bool thread_safe() const override { return true; }

    /// Softmax over every class.
    Vector probabilities(const Image& img) const;
    const HeadWeights& head() const noexcept { return head_; }

private:
    HeadWeights head_;
    std::size_t grid_;
};

// ---------------------------------------------------------------------------
// bt-scorer/1 wire format

namespace protocol {

inline constexpr std::string_view name = "bt-scorer/1";

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);  // throws ProtocolError

std::string encode_handshake(std::size_t classes);
std::size_t decode_handshake(std::string_view line);

/// Pixels travel as little-endian float32, so decoded images hold the float
/// rounding of the original values.
std::string encode_request(const ScoreRequest& req);
ScoreRequest decode_request(std::string_view line);

std::string encode_response(const ScoreResponse& resp);
ScoreResponse decode_response(std::string_view line);

}  // namespace protocol

struct ExternalScorerConfig {
    std::string command;  // run with /bin/sh -c
    std::chrono::milliseconds timeout{30000};
    int max_restarts = 2;

    /// BT_SCORER_CMD and BT_SCORER_TIMEOUT_MS.
    static ExternalScorerConfig from_env();
};

/// One child process speaking bt-scorer/1 over stdin/stdout. Requests are
/// strictly serial. A child that exits or closes its output is restarted and
/// the request resent, at most max_restarts times over the scorer's life; a
/// timed-out child is killed and restarted on the next request.
class ExternalScorer final : public Scorer {
public:
    explicit ExternalScorer(ExternalScorerConfig cfg);
    ~ExternalScorer() override;
    ExternalScorer(const ExternalScorer&) = delete;
    ExternalScorer& operator=(const ExternalScorer&) = delete;

    std::size_t classes() const override { return classes_; }
    std::string id() const override { return "external:" + cfg_.command; }
    std::vector<double> score(const Image& img, std::span<const std::uint32_t> classes) override;
    std::unique_ptr<Scorer> clone() const override;

    /// Sends one request and returns the validated response.
    ScoreResponse request(const ScoreRequest& req);

    std::uint64_t next_id() const noexcept { return next_id_; }
    int restarts() const noexcept { return restarts_; }

private:
    struct Process;

    void start();
    void stop();
    std::string exchange(const std::string& line);

    ExternalScorerConfig cfg_;
    std::unique_ptr<Process> proc_;
    std::size_t classes_ = 0;
    std::uint64_t next_id_ = 0;
    int restarts_ = 0;
};

/// Failures from batch_score, one per image that could not be scored.
class BatchScoreError : public Error {
public:
    struct Failure {
        std::size_t index;
        ErrorKind kind;
        std::string message;
    };
    explicit BatchScoreError(std::vector<Failure> failures);
    const std::vector<Failure>& failures() const noexcept { return failures_; }

private:
    std::vector<Failure> failures_;
};

/// Q(c | images[i]) in input order. With parallelism > 1, scorers that are
/// not thread safe are cloned so each worker owns one.
std::vector<double> batch_score(Scorer& scorer, std::span<const Image> images, std::uint32_t cls,
                                std::size_t parallelism = 1);

}  // namespace bt
