#pragma once

#include "bt/datastore.hpp"
#include "bt/learner.hpp"
#include "bt/random.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace bt {

/// Two target-class and two alternative-class example ids; each pair sorted.
struct CandidateSet {
    std::array<std::uint32_t, 2> target_pair{};
    std::array<std::uint32_t, 2> alternative_pair{};

    auto operator<=>(const CandidateSet&) const = default;
    std::array<std::uint32_t, 4> ids() const {
        return {target_pair[0], target_pair[1], alternative_pair[0], alternative_pair[1]};
    }
};

struct TeachingPools {
    std::vector<std::uint32_t> target;
    std::vector<std::uint32_t> alternative;
};

/// Standard-train examples of each category, minus the trial's own example,
/// in ascending id order.
TeachingPools resolve_pools(const TrialSpec& trial, const FeatureStore& store);

/// C(a,2)·C(b,2), saturating.
std::uint64_t candidate_count(const TeachingPools& pools);

/// Up to `budget` distinct candidates in sampled order. When every candidate
/// fits in the budget they are all returned, shuffled; otherwise candidates
/// are drawn uniformly (pairs without replacement) and repeats skipped.
/// Throws PoolTooSmall.
std::vector<CandidateSet> sample_candidates(const TeachingPools& pools, std::size_t budget, RandomStream& rng);

/// Every candidate in ascending order.
std::vector<CandidateSet> enumerate_candidates(const TeachingPools& pools);

struct TeachingConfig {
    double threshold = 0.8;
    std::size_t mc_samples = 100;
    std::size_t budget = 200;
    std::size_t enumeration_cap = 100;
    FitConfig fit;
    std::size_t jobs = 1;
};

/// Fits the two-class learner on the candidate (target → 0, alternative → 1)
/// and returns its Monte Carlo predictive that the trial's example is class 0.
/// Draws come from rng.child(h) with h a hash of the four feature vectors, so
/// the value depends on the examples' content and not on ids or call order.
double evaluate_candidate(const CandidateSet& cand, const TrialSpec& trial, const NormalPrior& prior2,
                          const FeatureStore& store, const TeachingConfig& cfg, const RandomStream& rng);

enum class TeachingStatus { accepted, exhausted };
std::string_view to_string(TeachingStatus status) noexcept;

struct TeachingResult {
    TrialSpec trial;
    TeachingStatus status = TeachingStatus::exhausted;
    std::optional<CandidateSet> accepted;
    /// The accepted candidate's predictive, or the best one tried.
    double predictive = 0.0;
    std::size_t candidates_tried = 0;
    std::uint64_t seed = 0;
};

/// Seed of a trial's stream: a function of the run seed and the trial id.
std::uint64_t trial_seed(std::uint64_t run_seed, std::string_view trial_id);

/// The first sampled candidate whose predictive exceeds the threshold.
/// Candidates are evaluated ahead in parallel and committed in order.
TeachingResult select_teaching_set(const TrialSpec& trial, const NormalPrior& prior2, const FeatureStore& store,
                                   const TeachingConfig& cfg, std::uint64_t seed);

/// Predictives of every candidate, normalised to sum to one, in ascending
/// candidate order. Throws EnumerationTooLarge above cfg.enumeration_cap.
std::vector<std::pair<CandidateSet, double>> teacher_distribution(const TrialSpec& trial, const NormalPrior& prior2,
                                                                  const FeatureStore& store,
                                                                  const TeachingConfig& cfg, std::uint64_t seed);

std::string teaching_result_to_json(const TeachingResult& result);
TeachingResult teaching_result_from_json(std::string_view line);

}  // namespace bt
