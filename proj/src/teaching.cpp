#include "bt/teaching.hpp"

#include "bt/errors.hpp"
#include "bt/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <set>

namespace bt {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t fnv_bytes(std::uint64_t h, const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

std::uint64_t fnv_u64(std::uint64_t h, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    return fnv_bytes(h, b, 8);
}

std::uint64_t feature_hash(const Vector& x) {
    std::uint64_t h = kFnvOffset;
    for (Eigen::Index i = 0; i < x.size(); ++i) h = fnv_u64(h, std::bit_cast<std::uint64_t>(x(i)));
    return h;
}

std::uint64_t choose2(std::uint64_t n) { return n < 2 ? 0 : n * (n - 1) / 2; }

std::array<std::uint32_t, 2> draw_pair(const std::vector<std::uint32_t>& pool, RandomStream& rng) {
    const auto i = rng.below(pool.size());
    auto j = rng.below(pool.size() - 1);
    if (j >= i) ++j;
    std::array<std::uint32_t, 2> p{pool[i], pool[j]};
    if (p[0] > p[1]) std::swap(p[0], p[1]);
    return p;
}

void check_pools(const TeachingPools& pools) {
    if (pools.target.size() < 2 || pools.alternative.size() < 2)
        throw Error(ErrorKind::pool_too_small, "teaching pools need at least two examples each (have " +
                                                   std::to_string(pools.target.size()) + " and " +
                                                   std::to_string(pools.alternative.size()) + ")");
}

const Record& record_of(const FeatureStore& store, std::uint32_t id, std::size_t label) {
    const Record& r = store.at(id);
    if (r.label != label)
        throw Error(ErrorKind::invalid_argument,
                    "example " + std::to_string(id) + " is not in category " + std::to_string(label));
    return r;
}

}  // namespace

TeachingPools resolve_pools(const TrialSpec& trial, const FeatureStore& store) {
    if (trial.target_category == trial.alternative_category)
        throw Error(ErrorKind::invalid_class_pair, "target and alternative categories are the same");
    if (trial.target_category >= store.classes || trial.alternative_category >= store.classes)
        throw Error(ErrorKind::invalid_class_pair, "trial category out of range");
    TeachingPools pools;
    for (const Record& r : store.records) {
        if (r.tag != Tag::standard_train || r.id == trial.target_example_id) continue;
        if (r.label == trial.target_category) pools.target.push_back(r.id);
        if (r.label == trial.alternative_category) pools.alternative.push_back(r.id);
    }
    std::sort(pools.target.begin(), pools.target.end());
    std::sort(pools.alternative.begin(), pools.alternative.end());
    return pools;
}

std::uint64_t candidate_count(const TeachingPools& pools) {
    const std::uint64_t a = choose2(pools.target.size()), b = choose2(pools.alternative.size());
    if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) return std::numeric_limits<std::uint64_t>::max();
    return a * b;
}

std::vector<CandidateSet> enumerate_candidates(const TeachingPools& pools) {
    check_pools(pools);
    std::vector<CandidateSet> out;
    const auto& t = pools.target;
    const auto& a = pools.alternative;
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t j = i + 1; j < t.size(); ++j)
            for (std::size_t k = 0; k < a.size(); ++k)
                for (std::size_t l = k + 1; l < a.size(); ++l) out.push_back({{t[i], t[j]}, {a[k], a[l]}});
    return out;
}

std::vector<CandidateSet> sample_candidates(const TeachingPools& pools, std::size_t budget, RandomStream& rng) {
    check_pools(pools);
    const std::uint64_t total = candidate_count(pools);
    if (total <= budget) {
        std::vector<CandidateSet> all = enumerate_candidates(pools);
        for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng.below(i)]);
        return all;
    }
    std::vector<CandidateSet> out;
    std::set<CandidateSet> seen;
    out.reserve(budget);
    while (out.size() < budget) {
        CandidateSet c{draw_pair(pools.target, rng), draw_pair(pools.alternative, rng)};
        if (seen.insert(c).second) out.push_back(c);
    }
    return out;
}

double evaluate_candidate(const CandidateSet& cand, const TrialSpec& trial, const NormalPrior& prior2,
                          const FeatureStore& store, const TeachingConfig& cfg, const RandomStream& rng) {
    struct Item {
        std::uint64_t hash;
        const Record* rec;
    };
    auto pair_items = [&](const std::array<std::uint32_t, 2>& ids, std::size_t label) {
        std::array<Item, 2> p{};
        for (int i = 0; i < 2; ++i) {
            const Record& r = record_of(store, ids[i], label);
            p[i] = {feature_hash(r.features), &r};
        }
        if (p[1].hash < p[0].hash) std::swap(p[0], p[1]);
        return p;
    };
    const auto t = pair_items(cand.target_pair, trial.target_category);
    const auto a = pair_items(cand.alternative_pair, trial.alternative_category);

    std::uint64_t h = kFnvOffset;
    std::vector<LabeledFeature> data;
    for (const Item& it : t) {
        h = fnv_u64(h, it.hash);
        data.push_back({it.rec->id, it.rec->features, 0});
    }
    for (const Item& it : a) {
        h = fnv_u64(h, it.hash);
        data.push_back({it.rec->id, it.rec->features, 1});
    }

    const Record& target = store.at(trial.target_example_id);
    const LearnerPosterior post = laplace_posterior(data, prior2, cfg.fit);
    RandomStream draws = rng.child(h);
    return posterior_predictive(post, target.features, 0, cfg.mc_samples, draws);
}

std::string_view to_string(TeachingStatus status) noexcept {
    return status == TeachingStatus::accepted ? "accepted" : "exhausted";
}

std::uint64_t trial_seed(std::uint64_t run_seed, std::string_view trial_id) {
    const std::uint64_t h = fnv_bytes(kFnvOffset, reinterpret_cast<const unsigned char*>(trial_id.data()), trial_id.size());
    return derive_seed(run_seed, h);
}

TeachingResult select_teaching_set(const TrialSpec& trial, const NormalPrior& prior2, const FeatureStore& store,
                                   const TeachingConfig& cfg, std::uint64_t seed) {
    if (!(cfg.threshold >= 0.0 && cfg.threshold < 1.0)) throw Error(ErrorKind::invalid_argument, "threshold must be in [0,1)");
    const TeachingPools pools = resolve_pools(trial, store);
    const RandomStream root(seed);
    RandomStream sampling = root.child(0);
    const RandomStream evaluation = root.child(1);
    const std::vector<CandidateSet> stream = sample_candidates(pools, cfg.budget, sampling);

    TeachingResult result;
    result.trial = trial;
    result.seed = seed;
    result.predictive = 0.0;
    const std::size_t window = std::max<std::size_t>(1, cfg.jobs);
    std::vector<double> values;
    for (std::size_t start = 0; start < stream.size(); start += window) {
        const std::size_t end = std::min(stream.size(), start + window);
        values.assign(end - start, 0.0);
        parallel_for(end - start, cfg.jobs, [&](std::size_t i) {
            values[i] = evaluate_candidate(stream[start + i], trial, prior2, store, cfg, evaluation);
        });
        for (std::size_t i = 0; i < values.size(); ++i) {
            result.candidates_tried = start + i + 1;
            if (values[i] > cfg.threshold) {
                result.status = TeachingStatus::accepted;
                result.accepted = stream[start + i];
                result.predictive = values[i];
                return result;
            }
            result.predictive = std::max(result.predictive, values[i]);
        }
    }
    result.status = TeachingStatus::exhausted;
    result.candidates_tried = stream.size();
    return result;
}

std::vector<std::pair<CandidateSet, double>> teacher_distribution(const TrialSpec& trial, const NormalPrior& prior2,
                                                                  const FeatureStore& store,
                                                                  const TeachingConfig& cfg, std::uint64_t seed) {
    const TeachingPools pools = resolve_pools(trial, store);
    check_pools(pools);
    const std::uint64_t total = candidate_count(pools);
    if (total > cfg.enumeration_cap)
        throw Error(ErrorKind::enumeration_too_large, std::to_string(total) + " candidates exceed the enumeration cap of " +
                                                          std::to_string(cfg.enumeration_cap));
    const std::vector<CandidateSet> all = enumerate_candidates(pools);
    const RandomStream evaluation = RandomStream(seed).child(1);
    std::vector<double> q(all.size());
    parallel_for(all.size(), cfg.jobs,
                 [&](std::size_t i) { q[i] = evaluate_candidate(all[i], trial, prior2, store, cfg, evaluation); });
    double sum = 0.0, comp = 0.0;
    for (double v : q) {
        const double t = sum + v;
        comp += std::fabs(sum) >= std::fabs(v) ? (sum - t) + v : (v - t) + sum;
        sum = t;
    }
    sum += comp;
    if (!(sum > 0.0)) throw Error(ErrorKind::degenerate_weights, "every candidate has predictive zero");
    std::vector<std::pair<CandidateSet, double>> out;
    out.reserve(all.size());
    for (std::size_t i = 0; i < all.size(); ++i) out.emplace_back(all[i], q[i] / sum);
    return out;
}

std::string teaching_result_to_json(const TeachingResult& r) {
    nlohmann::ordered_json j;
    j["trial_id"] = r.trial.trial_id;
    j["status"] = to_string(r.status);
    j["examples"] = nlohmann::ordered_json::array();
    if (r.accepted)
        for (std::uint32_t id : r.accepted->ids()) j["examples"].push_back(id);
    j["predictive"] = r.predictive;
    j["candidates_tried"] = r.candidates_tried;
    j["seed"] = r.seed;
    return j.dump();
}

TeachingResult teaching_result_from_json(std::string_view line) {
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorKind::io_error, "teaching result is not a JSON object");
    TeachingResult r;
    try {
        r.trial.trial_id = j.at("trial_id").get<std::string>();
        const auto status = j.at("status").get<std::string>();
        if (status == "accepted")
            r.status = TeachingStatus::accepted;
        else if (status == "exhausted")
            r.status = TeachingStatus::exhausted;
        else
            throw Error(ErrorKind::io_error, "unknown teaching status " + status);
        const auto ids = j.at("examples").get<std::vector<std::uint32_t>>();
        if (r.status == TeachingStatus::accepted) {
            if (ids.size() != 4) throw Error(ErrorKind::io_error, "accepted teaching set needs four examples");
            r.accepted = CandidateSet{{ids[0], ids[1]}, {ids[2], ids[3]}};
        } else if (!ids.empty()) {
            throw Error(ErrorKind::io_error, "exhausted teaching result lists examples");
        }
        r.predictive = j.at("predictive").get<double>();
        r.candidates_tried = j.at("candidates_tried").get<std::size_t>();
        r.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::io_error, std::string("teaching result: ") + e.what());
    }
    return r;
}

}  // namespace bt
