#include "bt/cli.hpp"

#include "bt/datastore.hpp"
#include "bt/errors.hpp"
#include "bt/kfac_prior.hpp"
#include "bt/saliency.hpp"
#include "bt/scorer.hpp"
#include "bt/teaching.hpp"
#include "binary_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>

namespace bt {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

constexpr std::uint64_t kValidationTask = 0x7661;
constexpr std::uint64_t kMaskTask = 0x6d61736b;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One configurable field: its flag, how it reads from a config file and how
// it is echoed.
struct Field {
    std::string name;
    std::function<CLI::Option*(CLI::App&, RunConfig&)> add;
    std::function<void(const nlohmann::json&, RunConfig&)> load;
    std::function<void(const RunConfig&, RunConfig&)> copy;
    std::function<void(ojson&, const RunConfig&)> echo;
};

template <class T>
Field field(std::string name, T RunConfig::*member, std::string help) {
    Field f;
    f.name = name;
    f.add = [name, member, help](CLI::App& app, RunConfig& cfg) {
        return app.add_option("--" + name, cfg.*member, help);
    };
    std::string key = name;
    std::replace(key.begin(), key.end(), '-', '_');
    f.load = [key, member](const nlohmann::json& j, RunConfig& cfg) {
        if (!j.contains(key)) return;
        if constexpr (std::is_same_v<T, std::optional<double>>) {
            if (j.at(key).is_null())
                (cfg.*member).reset();
            else
                cfg.*member = j.at(key).get<double>();
        } else {
            cfg.*member = j.at(key).get<T>();
        }
    };
    f.copy = [member](const RunConfig& from, RunConfig& to) { to.*member = from.*member; };
    f.echo = [key, member](ojson& j, const RunConfig& cfg) {
        if constexpr (std::is_same_v<T, std::optional<double>>) {
            if (cfg.*member)
                j[key] = *(cfg.*member);
            else
                j[key] = nullptr;
        } else {
            j[key] = cfg.*member;
        }
    };
    return f;
}

std::vector<Field> fields() {
    return {
        field("seed", &RunConfig::seed, "Run seed"),
        field("jobs", &RunConfig::jobs, "Worker threads"),
        field("out", &RunConfig::out, "Output directory"),
        field("store", &RunConfig::store, "Feature store (default <out>/corpus.fst; images beside it as .img)"),
        field("head", &RunConfig::head, "Head weights (default <out>/head.bin)"),
        field("prior", &RunConfig::prior, "Prior (default <out>/prior.bin)"),
        field("scorer", &RunConfig::scorer, "Saliency scorer: toy or external"),
        field("threshold", &RunConfig::threshold, "Teaching acceptance threshold"),
        field("mc-samples", &RunConfig::mc_samples, "Monte Carlo weight draws per predictive"),
        field("budget", &RunConfig::budget, "Candidate teaching sets per trial"),
        field("masks", &RunConfig::masks, "Saliency masks"),
        field("gp-mean", &RunConfig::gp_mean, "Mask field mean (default -100)"),
        field("gp-amplitude", &RunConfig::gp_amplitude, "Mask field standard deviation (default 100)"),
        field("gp-length-scale", &RunConfig::gp_length_scale, "Mask field length scale in pixels (default 0.1*width)"),
        field("classes", &RunConfig::classes, "Synthetic corpus classes"),
        field("train-per-class", &RunConfig::train_per_class, "Synthetic training examples per class"),
        field("eval-per-class", &RunConfig::eval_per_class, "Synthetic evaluation examples per class"),
        field("adversarial-per-class", &RunConfig::adversarial_per_class, "Synthetic adversarial examples per class"),
        field("categories", &RunConfig::categories, "Trial categories (0: all)"),
        field("per-category", &RunConfig::per_category, "Trials per type per category"),
    };
}

struct Paths {
    fs::path out, store, images, head, prior, trials, trials_report, teaching, validation, maps, saliency, report;
};

Paths resolve_paths(const RunConfig& cfg) {
    Paths p;
    p.out = cfg.out;
    p.store = cfg.store.empty() ? p.out / "corpus.fst" : fs::path(cfg.store);
    p.images = fs::path(p.store).replace_extension(".img");
    p.head = cfg.head.empty() ? p.out / "head.bin" : fs::path(cfg.head);
    p.prior = cfg.prior.empty() ? p.out / "prior.bin" : fs::path(cfg.prior);
    p.trials = p.out / "trials.jsonl";
    p.trials_report = p.out / "trials_report.json";
    p.teaching = p.out / "teaching.jsonl";
    p.validation = p.out / "validation.json";
    p.maps = p.out / "maps";
    p.saliency = p.out / "saliency.jsonl";
    p.report = p.out / "report.json";
    return p;
}

// Paths inside the output directory are echoed relative to it, so two runs
// into different directories echo the same bytes.
std::string shown(const fs::path& p, const fs::path& out) {
    const fs::path rel = p.lexically_normal().lexically_relative(out.lexically_normal());
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return p.generic_string();
}

void write_text(const fs::path& path, const std::string& text) { io::write_file(path.string(), text); }

std::vector<std::string> read_lines(const fs::path& path) {
    std::istringstream in(io::read_file(path.string()));
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) lines.push_back(line);
    return lines;
}

ojson echo_config(const std::string& command, const RunConfig& cfg, const Paths& paths) {
    ojson j;
    j["command"] = command;
    for (const Field& f : fields()) {
        if (f.name == "jobs") continue;  // does not affect any output
        f.echo(j, cfg);
    }
    j["out"] = ".";
    j["store"] = shown(paths.store, paths.out);
    j["head"] = shown(paths.head, paths.out);
    j["prior"] = shown(paths.prior, paths.out);
    return j;
}

GridGpConfig mask_config(const RunConfig& cfg, std::uint32_t width, std::uint32_t height) {
    GridGpConfig g = mask_gp_config(width, height);
    if (cfg.gp_mean) g.mean = *cfg.gp_mean;
    if (cfg.gp_amplitude) g.amplitude = *cfg.gp_amplitude;
    if (cfg.gp_length_scale) g.length_scale = *cfg.gp_length_scale;
    return g;
}

// Width and height from an IMG1 header.
std::pair<std::uint32_t, std::uint32_t> image_dims(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    char header[16];
    if (!in.read(header, sizeof header)) throw TruncatedFile(static_cast<std::uint64_t>(in.gcount()));
    io::Reader r(std::string_view(header, sizeof header));
    if (r.bytes(4) != "IMG1") throw Error(ErrorKind::bad_magic, path.string() + " is not an image store");
    r.get<std::uint32_t>();
    const auto width = r.get<std::uint32_t>();
    const auto height = r.get<std::uint32_t>();
    return {width, height};
}

// ---------------------------------------------------------------------------
// Subcommands

void gen_corpus(const RunConfig& cfg, const Paths& p, std::ostream& out) {
    SyntheticConfig sc;
    sc.classes = cfg.classes;
    sc.train_per_class = cfg.train_per_class;
    sc.eval_per_class = cfg.eval_per_class;
    sc.adversarial_per_class = cfg.adversarial_per_class;
    sc.seed = cfg.seed;
    const Corpus corpus = generate_synthetic(sc, cfg.jobs);
    save_store(corpus.store, p.store.string());
    save_images(corpus.images, p.images.string());
    out << "corpus: " << corpus.store.records.size() << " examples, " << corpus.store.classes << " classes\n";
}

void fit_head(const RunConfig&, const Paths& p, std::ostream& out) {
    const FeatureStore store = load_store(p.store.string());
    const auto train = store.labeled(Tag::standard_train);
    const HeadWeights head = train_head(train, store.classes);
    save_head(head, p.head.string());
    const auto eval = store.labeled(Tag::standard_eval);
    out << "head: " << head.classes() << "x" << head.columns() << ", eval top-1 "
        << deterministic_accuracy(head, eval).top1 << "\n";
}

void build_prior_cmd(const RunConfig& cfg, const Paths& p, std::ostream& out) {
    const FeatureStore store = load_store(p.store.string());
    const HeadWeights head = load_head(p.head.string());
    if (head.classes() != store.classes || head.features() != store.features)
        throw_dimension_mismatch("head does not match the feature store");
    const auto train = store.labeled(Tag::standard_train);
    const KfacFactors factors = compute_kfac(head, train, 0.0, cfg.jobs);
    save_prior(head, factors, p.prior.string());

    const BuiltPrior built = build_prior(head, factors);
    const auto eval = store.labeled(Tag::standard_eval);
    RandomStream rng(cfg.seed, kValidationTask);
    const HeadValidation mc = validate_head(built.prior, eval, cfg.mc_samples, rng);
    const HeadValidation det = deterministic_accuracy(head, eval);
    ojson v;
    v["eval_examples"] = eval.size();
    v["mc_samples"] = cfg.mc_samples;
    v["deterministic_top1"] = det.top1;
    v["mc_top1"] = mc.top1;
    v["deterministic_topk"] = det.topk;
    v["mc_topk"] = mc.topk;
    v["k"] = mc.k;
    write_text(p.validation, v.dump(2) + "\n");
    out << "prior: n=" << factors.n << ", top-1 deterministic " << det.top1 << ", monte carlo " << mc.top1 << "\n";
}

void gen_trials(const RunConfig& cfg, const Paths& p, std::ostream& out) {
    const FeatureStore store = load_store(p.store.string());
    const HeadWeights head = load_head(p.head.string());
    TrialConfig tc;
    tc.categories = cfg.categories;
    tc.per_category = cfg.per_category;
    tc.seed = cfg.seed;
    const TrialPlan plan = generate_trials(head, store, tc, cfg.jobs);
    save_trials(plan.trials, p.trials.string());

    const ConfusionMatrix cm = confusion_matrix(head, store, Tag::standard_eval, cfg.jobs);
    ojson r;
    r["accuracy"] = plan.accuracy;
    r["categories"] = plan.categories;
    r["trials"] = plan.trials.size();
    r["missing"] = ojson::array();
    for (const MissingTrial& m : plan.missing)
        r["missing"].push_back({{"category", m.category},
                                {"type", to_string(m.type)},
                                {"wanted", m.wanted},
                                {"available", m.available}});
    r["warnings"] = ojson::array();
    for (std::size_t c : plan.categories)
        if (most_confusable(cm, c).fallback)
            r["warnings"].push_back("category " + std::to_string(c) + " has no confusions; alternative is a fallback");
    write_text(p.trials_report, r.dump(2) + "\n");
    out << "trials: " << plan.trials.size() << ", missing " << plan.missing.size() << "\n";
}

void teach(const RunConfig& cfg, const Paths& p, std::ostream& out) {
    const FeatureStore store = load_store(p.store.string());
    const StoredPrior stored = load_prior(p.prior.string());
    const NormalPrior full = build_prior(stored.head, stored.factors).prior;
    const auto trials = load_trials(p.trials.string());
    TeachingConfig tc;
    tc.threshold = cfg.threshold;
    tc.mc_samples = cfg.mc_samples;
    tc.budget = cfg.budget;
    tc.jobs = cfg.jobs;
    std::string text;
    std::size_t accepted = 0;
    for (const TrialSpec& t : trials) {
        const NormalPrior prior2 = slice_prior(full, t.target_category, t.alternative_category);
        const TeachingResult r = select_teaching_set(t, prior2, store, tc, trial_seed(cfg.seed, t.trial_id));
        accepted += r.status == TeachingStatus::accepted;
        text += teaching_result_to_json(r) + "\n";
    }
    write_text(p.teaching, text);
    out << "teaching: " << accepted << "/" << trials.size() << " accepted\n";
}

std::unique_ptr<Scorer> make_scorer(const RunConfig& cfg, const Paths& p, const FeatureStore* store) {
    if (cfg.scorer == "toy") {
        HeadWeights head = load_head(p.head.string());
        const auto grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(head.features()))));
        if (grid * grid != head.features()) throw_dimension_mismatch("toy scorer needs a square feature grid");
        if (store && store->classes != head.classes()) throw_dimension_mismatch("head does not match the feature store");
        return std::make_unique<ToyScorer>(std::move(head), grid);
    }
    const ExternalScorerConfig ec = ExternalScorerConfig::from_env();
    if (ec.command.empty()) throw Error(ErrorKind::invalid_argument, "BT_SCORER_CMD is not set");
    return std::make_unique<ExternalScorer>(ec);
}

void saliency(const RunConfig& cfg, const Paths& p, std::ostream& out) {
    const ImageStore images = load_images(p.images.string());
    const auto trials = load_trials(p.trials.string());
    std::map<std::string, TeachingResult> results;
    for (const std::string& line : read_lines(p.teaching)) {
        TeachingResult r = teaching_result_from_json(line);
        results.emplace(r.trial.trial_id, std::move(r));
    }
    auto scorer = make_scorer(cfg, p, nullptr);

    const GridGpConfig g = mask_config(cfg, images.width, images.height);
    const std::uint64_t mask_seed = derive_seed(cfg.seed, kMaskTask);
    const std::vector<Mask> masks = sample_masks(g, cfg.masks, RandomStream(mask_seed), cfg.jobs);
    ExpectedMapOptions opts;
    opts.parallelism = cfg.jobs;
    opts.seed = mask_seed;

    fs::create_directories(p.maps);
    std::set<std::pair<std::uint32_t, std::size_t>> done;
    std::string index;
    std::size_t written = 0;
    for (const TrialSpec& t : trials) {
        std::vector<std::pair<std::uint32_t, std::string>> shown_images{{t.target_example_id, "target"}};
        if (auto it = results.find(t.trial_id); it != results.end() && it->second.accepted)
            for (std::uint32_t id : it->second.accepted->ids()) shown_images.emplace_back(id, "example");
        ojson line;
        line["trial_id"] = t.trial_id;
        line["maps"] = ojson::array();
        for (const auto& [id, role] : shown_images) {
            for (std::size_t c : {t.target_category, t.alternative_category}) {
                const std::string stem = std::to_string(id) + "_c" + std::to_string(c);
                if (done.insert({id, c}).second) {
                    const SaliencyMap map =
                        expected_map(images.at(id), static_cast<std::uint32_t>(c), masks, *scorer, opts);
                    save_map(map, (p.maps / stem).string());
                    ++written;
                }
                line["maps"].push_back({{"image", id},
                                        {"role", role},
                                        {"category", c},
                                        {"pgm", "maps/" + stem + ".pgm"},
                                        {"raw", "maps/" + stem + ".raw"}});
            }
        }
        index += line.dump() + "\n";
    }
    write_text(p.saliency, index);
    out << "saliency: " << written << " maps from " << masks.size() << " masks\n";
}

ojson summary(std::vector<double> v) {
    ojson j;
    j["count"] = v.size();
    if (v.empty()) return j;
    std::sort(v.begin(), v.end());
    double sum = 0.0;
    for (double x : v) sum += x;
    j["min"] = v.front();
    j["median"] = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    j["mean"] = sum / static_cast<double>(v.size());
    j["max"] = v.back();
    j["values"] = v;
    return j;
}

void report(const RunConfig&, const Paths& p, std::ostream& out) {
    const auto trials = load_trials(p.trials.string());
    std::map<std::string, TeachingResult> results;
    for (const std::string& line : read_lines(p.teaching)) {
        TeachingResult r = teaching_result_from_json(line);
        results.emplace(r.trial.trial_id, std::move(r));
    }

    ojson r;
    r["trials"] = trials.size();
    std::size_t accepted = 0, exhausted = 0, missing = 0;
    ojson by_type;
    for (TrialType type :
         {TrialType::standard_correct, TrialType::standard_incorrect, TrialType::adversarial_incorrect}) {
        std::size_t n = 0, a = 0, e = 0;
        std::vector<double> pred;
        for (const TrialSpec& t : trials) {
            if (t.type != type) continue;
            ++n;
            const auto it = results.find(t.trial_id);
            if (it == results.end()) continue;
            (it->second.status == TeachingStatus::accepted ? a : e) += 1;
            pred.push_back(it->second.predictive);
        }
        accepted += a;
        exhausted += e;
        missing += n - a - e;
        by_type[std::string(to_string(type))] = {{"trials", n}, {"accepted", a}, {"exhausted", e},
                                                 {"predictive", summary(pred)}};
    }
    r["status"] = {{"accepted", accepted}, {"exhausted", exhausted}, {"not_taught", missing}};
    r["acceptance_rate"] = trials.empty() ? 0.0 : static_cast<double>(accepted) / static_cast<double>(trials.size());
    r["by_type"] = by_type;

    std::set<std::string> files;
    if (fs::exists(p.saliency))
        for (const std::string& line : read_lines(p.saliency)) {
            const auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("maps")) throw Error(ErrorKind::io_error, "bad saliency index line");
            for (const auto& m : j.at("maps")) {
                files.insert(m.at("pgm").get<std::string>());
                files.insert(m.at("raw").get<std::string>());
            }
        }
    r["maps"] = files;
    if (fs::exists(p.validation)) {
        const auto v = nlohmann::json::parse(io::read_file(p.validation.string()), nullptr, false);
        if (v.is_discarded()) throw Error(ErrorKind::io_error, "validation.json is not JSON");
        r["head_validation"] = v;
    }
    const std::string text = r.dump(2) + "\n";
    write_text(p.report, text);
    out << text;
}

using Command = void (*)(const RunConfig&, const Paths&, std::ostream&);

const std::vector<std::pair<std::string, Command>>& commands() {
    static const std::vector<std::pair<std::string, Command>> list = {
        {"gen-corpus", gen_corpus}, {"fit-head", fit_head}, {"build-prior", build_prior_cmd},
        {"gen-trials", gen_trials}, {"teach", teach},       {"saliency", saliency},
        {"report", report},
    };
    return list;
}

const char* describe(const std::string& name) {
    if (name == "gen-corpus") return "Generate the synthetic corpus (corpus.fst, corpus.img)";
    if (name == "fit-head") return "Fit the softmax head on standard training features (head.bin)";
    if (name == "build-prior") return "Build the Kronecker-factored prior and validate it (prior.bin, validation.json)";
    if (name == "gen-trials") return "Select trials from the head's confusions (trials.jsonl)";
    if (name == "teach") return "Select a teaching set for every trial (teaching.jsonl)";
    if (name == "saliency") return "Saliency maps for each trial's images (maps/, saliency.jsonl)";
    return "Summarise the run (report.json)";
}

void apply_config_file(const std::string& path, RunConfig& cfg, bool& seed_given) {
    std::string text;
    try {
        text = io::read_file(path);
    } catch (const Error& e) {
        throw UsageError("cannot read config file " + path);
    }
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw UsageError("config file " + path + " is not a JSON object");
    const auto all = fields();
    for (const auto& [key, value] : j.items()) {
        if (key == "command") continue;
        const bool known = std::any_of(all.begin(), all.end(), [&](const Field& f) {
            std::string k = f.name;
            std::replace(k.begin(), k.end(), '-', '_');
            return k == key;
        });
        if (!known) throw UsageError("unknown config key '" + key + "'");
    }
    try {
        for (const Field& f : all) f.load(j, cfg);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config file " + path + ": " + e.what());
    }
    seed_given = seed_given || j.contains("seed");
}

void check(const RunConfig& cfg) {
    if (cfg.jobs == 0) throw UsageError("--jobs must be at least 1");
    if (cfg.scorer != "toy" && cfg.scorer != "external") throw UsageError("--scorer must be toy or external");
    if (!(cfg.threshold >= 0.0 && cfg.threshold < 1.0)) throw UsageError("--threshold must be in [0,1)");
    if (cfg.mc_samples == 0) throw UsageError("--mc-samples must be positive");
    if (cfg.masks == 0) throw UsageError("--masks must be positive");
    if (cfg.budget == 0) throw UsageError("--budget must be positive");
}

void print_error(std::ostream& err, std::string_view kind, const std::string& message) {
    nlohmann::json j;
    j["error"] = kind;
    j["message"] = message;
    err << j.dump() << "\n";
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Bayesian teaching explanations: teaching sets and saliency maps", "bt"};
    app.require_subcommand(1);
    app.fallthrough();
    RunConfig flags;
    std::vector<std::pair<const Field*, CLI::Option*>> options;
    const auto all = fields();
    for (const Field& f : all) options.emplace_back(&f, f.add(app, flags));
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; flags override it");
    bool strict_seed = false;
    app.add_flag("--strict-seed", strict_seed, "Refuse to run without an explicit seed");
    for (const auto& [name, fn] : commands()) app.add_subcommand(name, describe(name));

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "bt: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    RunConfig cfg;
    bool seed_given = false;
    try {
        if (!config_path.empty()) apply_config_file(config_path, cfg, seed_given);
        for (const auto& [f, opt] : options) {
            if (opt->count() == 0) continue;
            f->copy(flags, cfg);
            if (f->name == "seed") seed_given = true;
        }
        if (strict_seed && !seed_given) throw UsageError("--strict-seed: no seed given by flag or config file");
        check(cfg);
    } catch (const UsageError& e) {
        err << "bt: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    const Paths paths = resolve_paths(cfg);
    try {
        fs::create_directories(paths.out);
        ojson echo = echo_config(command, cfg, paths);
        if (command == "saliency" && fs::exists(paths.images)) {
            // Resolve the mask prior against the image size.
            const auto [width, height] = image_dims(paths.images);
            const GridGpConfig g = mask_config(cfg, width, height);
            echo["gp_mean"] = g.mean;
            echo["gp_amplitude"] = g.amplitude;
            echo["gp_length_scale"] = g.length_scale;
        }
        write_text(paths.out / (command + ".config.json"), echo.dump(2) + "\n");
        for (const auto& [name, fn] : commands())
            if (name == command) fn(cfg, paths, out);
    } catch (const Error& e) {
        print_error(err, to_string(e.kind()), e.what());
        return 1;
    } catch (const fs::filesystem_error& e) {
        print_error(err, "io_error", e.what());
        return 1;
    } catch (const nlohmann::json::exception& e) {
        print_error(err, "io_error", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error(err, "internal", e.what());
        return 1;
    }
    return 0;
}

}  // namespace bt
