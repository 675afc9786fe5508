#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace bt {

/// Everything a pipeline command depends on. Paths left empty resolve to
/// fixed names under `out`.
struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::string out = ".";
    std::string store;
    std::string head;
    std::string prior;
    std::string scorer = "toy";

    double threshold = 0.8;
    std::size_t mc_samples = 100;
    std::size_t budget = 200;
    std::size_t masks = 1000;
    std::optional<double> gp_mean;          // −100
    std::optional<double> gp_amplitude;     // 100
    std::optional<double> gp_length_scale;  // 0.1·width

    std::size_t classes = 6;
    std::size_t train_per_class = 600;
    std::size_t eval_per_class = 50;
    std::size_t adversarial_per_class = 20;
    std::size_t categories = 0;  // 0: every class
    std::size_t per_category = 1;
};

/// Runs one subcommand (gen-corpus, fit-head, build-prior, gen-trials, teach,
/// saliency, report). `args` excludes the program name. Returns 0 on success,
/// 2 on a usage error (message and usage on `err`), 1 on a pipeline error
/// (one JSON object {"error","message"} on `err`).
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bt
