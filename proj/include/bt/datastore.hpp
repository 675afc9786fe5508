#pragma once

#include "bt/image.hpp"
#include "bt/kfac_prior.hpp"
#include "bt/learner.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace bt {

enum class Tag : std::uint8_t { standard_train = 0, standard_eval = 1, adversarial = 2 };

std::string_view to_string(Tag tag) noexcept;
Tag tag_from_string(std::string_view name);  // throws InvalidArgument

struct Record {
    std::uint32_t id = 0;
    std::uint16_t label = 0;
    Tag tag = Tag::standard_train;
    Vector features;
};

/// Labeled feature vectors. Features are held at float32 precision; every
/// on-disk format stores them as 32-bit floats.
struct FeatureStore {
    std::size_t features = 0;
    std::size_t classes = 0;
    std::vector<Record> records;

    /// Unique ids, labels < classes, feature length, finite values.
    void validate() const;
    const Record& at(std::uint32_t id) const;
    const Record* find(std::uint32_t id) const;
    std::size_t count(Tag tag) const;
    std::vector<LabeledFeature> labeled(std::optional<Tag> tag = std::nullopt) const;
};

enum class StoreFormat { binary, csv, jsonl };

/// From the extension: .fst, .csv, .jsonl.
StoreFormat format_for_path(const std::string& path);

std::string encode_store(const FeatureStore& store, StoreFormat format);
/// `classes` applies to CSV only, which does not record K; by default it is
/// one more than the largest label.
FeatureStore decode_store(std::string_view data, StoreFormat format,
                          std::optional<std::size_t> classes = std::nullopt);

void save_store(const FeatureStore& store, const std::string& path);
FeatureStore load_store(const std::string& path);

/// Images keyed by example id, all with the same dimensions.
struct ImageStore {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::uint32_t channels = 1;
    std::map<std::uint32_t, Image> images;

    const Image& at(std::uint32_t id) const;
};

std::string encode_images(const ImageStore& images);
ImageStore decode_images(std::string_view data);
void save_images(const ImageStore& images, const std::string& path);
ImageStore load_images(const std::string& path);

void save_head(const HeadWeights& head, const std::string& path);
HeadWeights load_head(const std::string& path);

struct StoredPrior {
    HeadWeights head;
    KfacFactors factors;
};
void save_prior(const HeadWeights& head, const KfacFactors& factors, const std::string& path);
StoredPrior load_prior(const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticConfig {
    std::size_t classes = 6;
    std::size_t train_per_class = 600;
    std::size_t eval_per_class = 50;
    std::size_t adversarial_per_class = 20;
    std::uint32_t width = 64;
    std::uint32_t height = 64;
    std::uint32_t channels = 1;
    std::size_t feature_grid = 16;
    /// Share of standard examples rendered from another class's pattern but
    /// keeping their own label.
    double hard_fraction = 0.12;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Corpus {
    FeatureStore store;
    ImageStore images;
};

/// Blob-and-stripe class patterns with noise. Adversarial examples add a
/// strong blob of the next class, so heads fitted on standard data err on
/// them more often.
Corpus generate_synthetic(const SyntheticConfig& cfg, std::size_t jobs = 1);

// ---------------------------------------------------------------------------
// Predictions and trials

/// Index of the largest entry, lowest index on ties.
std::size_t argmax_class(const Vector& probs);

std::vector<std::size_t> predict_labels(const HeadWeights& head, const std::vector<const Record*>& records,
                                        std::size_t jobs = 1);

struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::size_t> counts;  // row = truth, column = prediction

    std::size_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
    std::size_t row_sum(std::size_t truth) const;
    std::size_t total() const;
    double accuracy(std::size_t truth) const;  // 0 for an empty row
};

ConfusionMatrix confusion_matrix(const HeadWeights& head, const FeatureStore& store,
                                 Tag tag = Tag::standard_eval, std::size_t jobs = 1);

struct Confusable {
    std::size_t cls = 0;
    bool fallback = false;  // every off-diagonal count involving target was zero
};

/// Largest symmetric confusion mass counts[t][c] + counts[c][t], lowest index
/// on ties.
Confusable most_confusable(const ConfusionMatrix& cm, std::size_t target);

enum class TrialType { standard_correct, standard_incorrect, adversarial_incorrect };
std::string_view to_string(TrialType type) noexcept;
TrialType trial_type_from_string(std::string_view name);

struct TrialSpec {
    std::string trial_id;
    std::uint32_t target_example_id = 0;
    std::size_t target_category = 0;
    std::size_t alternative_category = 0;
    TrialType type = TrialType::standard_correct;
    std::size_t true_category = 0;
};

struct MissingTrial {
    std::size_t category = 0;
    TrialType type = TrialType::standard_correct;
    std::size_t wanted = 0;
    std::size_t available = 0;
};

struct TrialConfig {
    std::size_t categories = 0;  // 0 selects every class
    std::size_t per_category = 1;
    std::uint64_t seed = 0;
};

struct TrialPlan {
    std::vector<double> accuracy;             // per class, standard_eval
    std::vector<std::size_t> categories;      // selected, in rank order
    std::vector<TrialSpec> trials;
    std::vector<MissingTrial> missing;
};

/// Classes ranked by accuracy (ascending, ties by index); `m` evenly spaced
/// ranks including both ends.
std::vector<std::size_t> spectrum_categories(const std::vector<double>& accuracy, std::size_t m);

TrialPlan generate_trials(const HeadWeights& head, const FeatureStore& store, const TrialConfig& cfg,
                          std::size_t jobs = 1);

std::string trial_to_json(const TrialSpec& trial);
TrialSpec trial_from_json(std::string_view line);
void save_trials(const std::vector<TrialSpec>& trials, const std::string& path);
std::vector<TrialSpec> load_trials(const std::string& path);

}  // namespace bt
