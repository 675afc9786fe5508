#include "bt/datastore.hpp"

#include "binary_io.hpp"
#include "bt/errors.hpp"
#include "bt/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace bt {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

[[noreturn]] void malformed(const std::string& what) { throw Error(ErrorKind::io_error, what); }

[[noreturn]] void label_out_of_range(std::uint32_t id, std::size_t label, std::size_t classes) {
    std::ostringstream os;
    os << "example " << id << " has label " << label << " but the store has " << classes << " classes";
    throw Error(ErrorKind::label_out_of_range, os.str());
}

void append_float(std::string& out, double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, static_cast<float>(v));
    out.append(buf, res.ptr);
}

float parse_float(std::string_view s, std::size_t line) {
    float v = 0.0f;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        malformed("line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
    }
    return v;
}

std::uint64_t parse_uint(std::string_view s, std::size_t line) {
    std::uint64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        malformed("line " + std::to_string(line) + ": bad integer '" + std::string(s) + "'");
    }
    return v;
}

Tag tag_from_int(std::uint64_t v) {
    if (v > 2) malformed("unknown tag value " + std::to_string(v));
    return static_cast<Tag>(v);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = s.find(sep, start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) return out;
        start = pos + 1;
    }
}

std::vector<std::string_view> lines_of(std::string_view data) {
    std::vector<std::string_view> out;
    for (auto line : split(data, '\n')) {
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        out.push_back(line);
    }
    while (!out.empty() && out.back().empty()) out.pop_back();
    return out;
}

// ---------------------------------------------------------------------------

std::string encode_fst(const FeatureStore& s) {
    io::Writer w;
    w.bytes("FST1");
    w.put<std::uint32_t>(1);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.records.size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.features));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.classes));
    for (const auto& r : s.records) {
        w.put<std::uint32_t>(r.id);
        w.put<std::uint16_t>(r.label);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(r.tag));
        for (Eigen::Index j = 0; j < r.features.size(); ++j) w.put<float>(static_cast<float>(r.features(j)));
    }
    return w.take();
}

FeatureStore decode_fst(std::string_view data) {
    io::Reader r(data);
    io::expect_magic(r, "FST1");
    const auto version = r.get<std::uint32_t>();
    if (version != 1) malformed("unsupported FST1 version " + std::to_string(version));
    FeatureStore s;
    const auto n = r.get<std::uint32_t>();
    s.features = r.get<std::uint32_t>();
    s.classes = r.get<std::uint32_t>();
    s.records.reserve(std::min<std::size_t>(n, data.size()));
    for (std::uint32_t i = 0; i < n; ++i) {
        Record rec;
        rec.id = r.get<std::uint32_t>();
        rec.label = r.get<std::uint16_t>();
        if (rec.label >= s.classes) label_out_of_range(rec.id, rec.label, s.classes);
        rec.tag = tag_from_int(r.get<std::uint8_t>());
        rec.features.resize(static_cast<Eigen::Index>(s.features));
        for (std::size_t j = 0; j < s.features; ++j) rec.features(static_cast<Eigen::Index>(j)) = r.get<float>();
        s.records.push_back(std::move(rec));
    }
    if (!r.at_end()) malformed("FST1: trailing bytes after the last record");
    return s;
}

std::string encode_csv(const FeatureStore& s) {
    std::string out = "id,label,tag";
    for (std::size_t j = 0; j < s.features; ++j) out += ",f" + std::to_string(j);
    out += '\n';
    for (const auto& r : s.records) {
        out += std::to_string(r.id) + ',' + std::to_string(r.label) + ',' +
               std::to_string(static_cast<int>(r.tag));
        for (Eigen::Index j = 0; j < r.features.size(); ++j) {
            out += ',';
            append_float(out, r.features(j));
        }
        out += '\n';
    }
    return out;
}

FeatureStore decode_csv(std::string_view data, std::optional<std::size_t> classes) {
    const auto lines = lines_of(data);
    if (lines.empty()) malformed("CSV: missing header");
    const auto header = split(lines[0], ',');
    if (header.size() < 3 || header[0] != "id" || header[1] != "label" || header[2] != "tag") {
        malformed("CSV: header must start with id,label,tag");
    }
    FeatureStore s;
    s.features = header.size() - 3;
    for (std::size_t j = 0; j < s.features; ++j) {
        if (header[j + 3] != "f" + std::to_string(j)) malformed("CSV: feature columns must be f0..fN");
    }
    std::size_t max_label = 0;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto cells = split(lines[i], ',');
        if (cells.size() != header.size()) malformed("line " + std::to_string(i + 1) + ": wrong number of columns");
        Record rec;
        rec.id = static_cast<std::uint32_t>(parse_uint(cells[0], i + 1));
        const auto label = parse_uint(cells[1], i + 1);
        if (label > 0xffff || (classes && label >= *classes)) label_out_of_range(rec.id, label, classes.value_or(0x10000));
        rec.label = static_cast<std::uint16_t>(label);
        max_label = std::max<std::size_t>(max_label, label);
        rec.tag = tag_from_int(parse_uint(cells[2], i + 1));
        rec.features.resize(static_cast<Eigen::Index>(s.features));
        for (std::size_t j = 0; j < s.features; ++j) rec.features(static_cast<Eigen::Index>(j)) = parse_float(cells[j + 3], i + 1);
        s.records.push_back(std::move(rec));
    }
    s.classes = classes ? *classes : (s.records.empty() ? 0 : max_label + 1);
    return s;
}

std::string encode_jsonl(const FeatureStore& s) {
    ordered_json header;
    header["format"] = "bt-features/1";
    header["n_features"] = s.features;
    header["n_classes"] = s.classes;
    std::string out = header.dump() + '\n';
    for (const auto& r : s.records) {
        out += "{\"id\":" + std::to_string(r.id) + ",\"label\":" + std::to_string(r.label) + ",\"tag\":\"" +
               std::string(to_string(r.tag)) + "\",\"features\":[";
        for (Eigen::Index j = 0; j < r.features.size(); ++j) {
            if (j) out += ',';
            append_float(out, r.features(j));
        }
        out += "]}\n";
    }
    return out;
}

FeatureStore decode_jsonl(std::string_view data) {
    const auto lines = lines_of(data);
    if (lines.empty()) malformed("JSONL: missing header line");
    FeatureStore s;
    try {
        const json header = json::parse(lines[0]);
        if (header.at("format") != "bt-features/1") malformed("JSONL: unknown format");
        s.features = header.at("n_features").get<std::size_t>();
        s.classes = header.at("n_classes").get<std::size_t>();
        for (std::size_t i = 1; i < lines.size(); ++i) {
            const json j = json::parse(lines[i]);
            Record rec;
            rec.id = j.at("id").get<std::uint32_t>();
            const auto label = j.at("label").get<std::uint64_t>();
            if (label >= s.classes) label_out_of_range(rec.id, label, s.classes);
            rec.label = static_cast<std::uint16_t>(label);
            rec.tag = tag_from_string(j.at("tag").get<std::string>());
            const auto& f = j.at("features");
            if (f.size() != s.features) malformed("line " + std::to_string(i + 1) + ": wrong feature count");
            rec.features.resize(static_cast<Eigen::Index>(s.features));
            for (std::size_t k = 0; k < s.features; ++k) {
                rec.features(static_cast<Eigen::Index>(k)) = static_cast<float>(f[k].get<double>());
            }
            s.records.push_back(std::move(rec));
        }
    } catch (const json::exception& e) {
        malformed(std::string("JSONL: ") + e.what());
    }
    return s;
}

void put_matrix(io::Writer& w, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) w.put<double>(m(i, j));
}

Matrix get_matrix(io::Reader& r, std::size_t rows, std::size_t cols) {
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.get<double>();
    return m;
}

}  // namespace

namespace io {

void expect_magic(Reader& r, std::string_view magic) {
    if (r.bytes(magic.size()) != magic) throw Error(ErrorKind::bad_magic, "expected magic '" + std::string(magic) + "'");
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io_error, "cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io_error, "cannot open '" + path + "' for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(ErrorKind::io_error, "write to '" + path + "' failed");
}

}  // namespace io

std::string_view to_string(Tag tag) noexcept {
    switch (tag) {
        case Tag::standard_train: return "standard_train";
        case Tag::standard_eval: return "standard_eval";
        case Tag::adversarial: return "adversarial";
    }
    return "unknown";
}

Tag tag_from_string(std::string_view name) {
    if (name == "standard_train") return Tag::standard_train;
    if (name == "standard_eval") return Tag::standard_eval;
    if (name == "adversarial") return Tag::adversarial;
    throw Error(ErrorKind::invalid_argument, "unknown tag '" + std::string(name) + "'");
}

void FeatureStore::validate() const {
    std::set<std::uint32_t> ids;
    for (const auto& r : records) {
        if (!ids.insert(r.id).second) throw Error(ErrorKind::invalid_argument, "duplicate id " + std::to_string(r.id));
        if (r.label >= classes) label_out_of_range(r.id, r.label, classes);
        if (static_cast<std::size_t>(r.features.size()) != features) {
            throw_dimension_mismatch("example " + std::to_string(r.id) + " has the wrong feature length");
        }
        if (!r.features.allFinite()) throw Error(ErrorKind::invalid_argument, "example " + std::to_string(r.id) + " has non-finite features");
    }
}

const Record* FeatureStore::find(std::uint32_t id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

const Record& FeatureStore::at(std::uint32_t id) const {
    if (const Record* r = find(id)) return *r;
    throw Error(ErrorKind::invalid_argument, "no example with id " + std::to_string(id));
}

std::size_t FeatureStore::count(Tag tag) const {
    return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [&](const Record& r) { return r.tag == tag; }));
}

std::vector<LabeledFeature> FeatureStore::labeled(std::optional<Tag> tag) const {
    std::vector<LabeledFeature> out;
    for (const auto& r : records) {
        if (tag && r.tag != *tag) continue;
        out.push_back({r.id, r.features, r.label});
    }
    return out;
}

StoreFormat format_for_path(const std::string& path) {
    auto ends_with = [&](std::string_view suffix) {
        return path.size() >= suffix.size() && path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".csv")) return StoreFormat::csv;
    if (ends_with(".jsonl")) return StoreFormat::jsonl;
    return StoreFormat::binary;
}

std::string encode_store(const FeatureStore& store, StoreFormat format) {
    store.validate();
    switch (format) {
        case StoreFormat::binary: return encode_fst(store);
        case StoreFormat::csv: return encode_csv(store);
        case StoreFormat::jsonl: return encode_jsonl(store);
    }
    return {};
}

FeatureStore decode_store(std::string_view data, StoreFormat format, std::optional<std::size_t> classes) {
    FeatureStore s;
    switch (format) {
        case StoreFormat::binary: s = decode_fst(data); break;
        case StoreFormat::csv: s = decode_csv(data, classes); break;
        case StoreFormat::jsonl: s = decode_jsonl(data); break;
    }
    s.validate();
    return s;
}

void save_store(const FeatureStore& store, const std::string& path) {
    io::write_file(path, encode_store(store, format_for_path(path)));
}

FeatureStore load_store(const std::string& path) { return decode_store(io::read_file(path), format_for_path(path)); }

// ---------------------------------------------------------------------------

const Image& ImageStore::at(std::uint32_t id) const {
    auto it = images.find(id);
    if (it == images.end()) throw Error(ErrorKind::invalid_argument, "no image for id " + std::to_string(id));
    return it->second;
}

std::string encode_images(const ImageStore& s) {
    io::Writer w;
    w.bytes("IMG1");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.images.size()));
    w.put<std::uint32_t>(s.width);
    w.put<std::uint32_t>(s.height);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(s.channels));
    for (const auto& [id, img] : s.images) {
        if (img.width != s.width || img.height != s.height || img.channels != s.channels) {
            throw_dimension_mismatch("image " + std::to_string(id) + " differs from the store dimensions");
        }
        w.put<std::uint32_t>(id);
        for (std::uint32_t c = 0; c < s.channels; ++c)
            for (std::uint32_t y = 0; y < s.height; ++y)
                for (std::uint32_t x = 0; x < s.width; ++x) w.put<float>(static_cast<float>(img.at(y, x, c)));
    }
    return w.take();
}

ImageStore decode_images(std::string_view data) {
    io::Reader r(data);
    io::expect_magic(r, "IMG1");
    ImageStore s;
    const auto n = r.get<std::uint32_t>();
    s.width = r.get<std::uint32_t>();
    s.height = r.get<std::uint32_t>();
    s.channels = r.get<std::uint8_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
        const auto id = r.get<std::uint32_t>();
        Image img = Image::filled(s.width, s.height, s.channels);
        for (std::uint32_t c = 0; c < s.channels; ++c)
            for (std::uint32_t y = 0; y < s.height; ++y)
                for (std::uint32_t x = 0; x < s.width; ++x) img.at(y, x, c) = r.get<float>();
        if (!s.images.emplace(id, std::move(img)).second) malformed("IMG1: duplicate id " + std::to_string(id));
    }
    if (!r.at_end()) malformed("IMG1: trailing bytes after the last image");
    return s;
}

void save_images(const ImageStore& images, const std::string& path) { io::write_file(path, encode_images(images)); }
ImageStore load_images(const std::string& path) { return decode_images(io::read_file(path)); }

void save_head(const HeadWeights& head, const std::string& path) {
    io::Writer w;
    w.bytes("HWT1");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(head.classes()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(head.columns()));
    put_matrix(w, head.w);
    io::write_file(path, w.data());
}

HeadWeights load_head(const std::string& path) {
    const std::string data = io::read_file(path);
    io::Reader r(data);
    io::expect_magic(r, "HWT1");
    const auto k = r.get<std::uint32_t>();
    const auto d = r.get<std::uint32_t>();
    HeadWeights head(get_matrix(r, k, d));
    if (!r.at_end()) malformed("HWT1: trailing bytes");
    return head;
}

void save_prior(const HeadWeights& head, const KfacFactors& factors, const std::string& path) {
    io::Writer w;
    w.bytes("KFP1");
    w.put<std::uint32_t>(static_cast<std::uint32_t>(head.classes()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(head.columns()));
    w.put<std::uint64_t>(factors.n);
    w.put<double>(factors.tau);
    put_matrix(w, head.w);
    put_matrix(w, factors.feature_factor.matrix());
    put_matrix(w, factors.class_factor.matrix());
    io::write_file(path, w.data());
}

StoredPrior load_prior(const std::string& path) {
    const std::string data = io::read_file(path);
    io::Reader r(data);
    io::expect_magic(r, "KFP1");
    const auto k = r.get<std::uint32_t>();
    const auto d = r.get<std::uint32_t>();
    const auto n = r.get<std::uint64_t>();
    const auto tau = r.get<double>();
    HeadWeights head(get_matrix(r, k, d));
    SpdMatrix u(get_matrix(r, d, d));
    SpdMatrix v(get_matrix(r, k, k));
    if (!r.at_end()) malformed("KFP1: trailing bytes");
    return StoredPrior{std::move(head), KfacFactors{std::move(u), std::move(v), n, tau}};
}

// ---------------------------------------------------------------------------
// Synthetic corpus

void SyntheticConfig::validate() const {
    if (classes < 2) throw Error(ErrorKind::invalid_argument, "synthetic corpus needs at least 2 classes");
    if (classes > 0xffff) throw Error(ErrorKind::invalid_argument, "too many classes");
    if (width == 0 || height == 0 || channels == 0) throw Error(ErrorKind::invalid_argument, "image dimensions must be positive");
    if (feature_grid == 0) throw Error(ErrorKind::invalid_argument, "feature grid must be positive");
    if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0)) throw Error(ErrorKind::invalid_argument, "hard_fraction must lie in [0,1]");
}

namespace {

struct Component {
    std::size_t cls;
    double blob;
    double stripes;
};

Image render(const SyntheticConfig& cfg, const std::vector<Component>& parts, RandomStream& rng) {
    const double w = cfg.width, h = cfg.height;
    const double sigma = 0.1 * std::min(w, h);
    struct Placed {
        double cx, cy, angle, phase;
        Component c;
    };
    std::vector<Placed> placed;
    for (const auto& c : parts) {
        const double a = 2.0 * std::numbers::pi * static_cast<double>(c.cls) / static_cast<double>(cfg.classes);
        placed.push_back({0.5 * w + 0.28 * w * std::cos(a) + 0.03 * w * rng.normal(),
                          0.5 * h + 0.28 * h * std::sin(a) + 0.03 * h * rng.normal(),
                          std::numbers::pi * static_cast<double>(c.cls) / static_cast<double>(cfg.classes),
                          0.7 * static_cast<double>(c.cls) + 0.3 * rng.normal(), c});
    }
    const double gain = 0.9 + 0.2 * rng.uniform();
    Image img = Image::filled(cfg.width, cfg.height, cfg.channels);
    for (std::uint32_t y = 0; y < cfg.height; ++y) {
        for (std::uint32_t x = 0; x < cfg.width; ++x) {
            double v = 0.1;
            for (const auto& p : placed) {
                const double dx = x - p.cx, dy = y - p.cy;
                v += gain * p.c.blob * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                const double t = (x * std::cos(p.angle) + y * std::sin(p.angle)) / w;
                v += p.c.stripes * (0.5 + 0.5 * std::sin(2 * std::numbers::pi * 4.0 * t + p.phase));
            }
            v += 0.05 * rng.normal();
            for (std::uint32_t ch = 0; ch < cfg.channels; ++ch) {
                const double tinted = v * (1.0 - 0.1 * ch);
                img.at(y, x, ch) = static_cast<float>(std::clamp(tinted, 0.0, 1.0));
            }
        }
    }
    return img;
}

std::vector<Component> components_for(const SyntheticConfig& cfg, std::size_t label, Tag tag, RandomStream& rng) {
    const std::size_t k = cfg.classes;
    if (tag == Tag::adversarial) {
        return {{label, 0.2, 0.03}, {(label + 1) % k, 0.7, 0.12}};
    }
    if (rng.uniform() < cfg.hard_fraction) {
        const std::size_t other = (label + 1 + rng.below(k - 1)) % k;
        return {{other, 0.6, 0.12}};
    }
    return {{label, 0.6, 0.12}};
}

}  // namespace

Corpus generate_synthetic(const SyntheticConfig& cfg, std::size_t jobs) {
    cfg.validate();
    struct Slot {
        std::uint32_t id;
        std::uint16_t label;
        Tag tag;
    };
    std::vector<Slot> slots;
    std::uint32_t next_id = 1000;
    const std::pair<Tag, std::size_t> plan[] = {{Tag::standard_train, cfg.train_per_class},
                                                {Tag::standard_eval, cfg.eval_per_class},
                                                {Tag::adversarial, cfg.adversarial_per_class}};
    for (const auto& [tag, per_class] : plan)
        for (std::size_t c = 0; c < cfg.classes; ++c)
            for (std::size_t j = 0; j < per_class; ++j) slots.push_back({next_id++, static_cast<std::uint16_t>(c), tag});

    Corpus out;
    out.store.features = cfg.feature_grid * cfg.feature_grid;
    out.store.classes = cfg.classes;
    out.store.records.resize(slots.size());
    std::vector<Image> images(slots.size());
    const RandomStream root(cfg.seed, 0x5e7c);
    parallel_for(slots.size(), jobs, [&](std::size_t i) {
        RandomStream rng = root.child(i);
        const auto parts = components_for(cfg, slots[i].label, slots[i].tag, rng);
        images[i] = render(cfg, parts, rng);
        Vector f = grayscale_features(images[i], cfg.feature_grid);
        for (Eigen::Index j = 0; j < f.size(); ++j) f(j) = static_cast<float>(f(j));
        out.store.records[i] = Record{slots[i].id, slots[i].label, slots[i].tag, std::move(f)};
    });
    out.images.width = cfg.width;
    out.images.height = cfg.height;
    out.images.channels = cfg.channels;
    for (std::size_t i = 0; i < slots.size(); ++i) out.images.images.emplace(slots[i].id, std::move(images[i]));
    return out;
}

// ---------------------------------------------------------------------------
// Predictions

std::size_t argmax_class(const Vector& probs) {
    std::size_t best = 0;
    for (Eigen::Index c = 1; c < probs.size(); ++c)
        if (probs(c) > probs(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(c);
    return best;
}

std::vector<std::size_t> predict_labels(const HeadWeights& head, const std::vector<const Record*>& records,
                                        std::size_t jobs) {
    std::vector<std::size_t> out(records.size());
    parallel_for(records.size(), jobs, [&](std::size_t i) {
        if (static_cast<std::size_t>(records[i]->features.size()) != head.features()) {
            throw_dimension_mismatch("head and store feature counts differ");
        }
        out[i] = argmax_class(softmax_probs(head, records[i]->features));
    });
    return out;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
    std::size_t s = 0;
    for (std::size_t p = 0; p < classes; ++p) s += at(truth, p);
    return s;
}

std::size_t ConfusionMatrix::total() const {
    std::size_t s = 0;
    for (auto c : counts) s += c;
    return s;
}

double ConfusionMatrix::accuracy(std::size_t truth) const {
    const std::size_t n = row_sum(truth);
    return n == 0 ? 0.0 : static_cast<double>(at(truth, truth)) / static_cast<double>(n);
}

namespace {

std::vector<const Record*> with_tag(const FeatureStore& store, Tag tag) {
    std::vector<const Record*> out;
    for (const auto& r : store.records)
        if (r.tag == tag) out.push_back(&r);
    return out;
}

}  // namespace

ConfusionMatrix confusion_matrix(const HeadWeights& head, const FeatureStore& store, Tag tag, std::size_t jobs) {
    if (head.classes() != store.classes) throw_dimension_mismatch("head and store class counts differ");
    const auto subset = with_tag(store, tag);
    if (subset.empty()) throw Error(ErrorKind::empty_dataset, "no examples tagged " + std::string(to_string(tag)));
    const auto predicted = predict_labels(head, subset, jobs);
    ConfusionMatrix cm{store.classes, std::vector<std::size_t>(store.classes * store.classes, 0)};
    for (std::size_t i = 0; i < subset.size(); ++i) ++cm.counts[subset[i]->label * cm.classes + predicted[i]];
    return cm;
}

Confusable most_confusable(const ConfusionMatrix& cm, std::size_t target) {
    if (cm.classes < 2) throw Error(ErrorKind::invalid_argument, "most_confusable needs at least 2 classes");
    if (target >= cm.classes) throw Error(ErrorKind::invalid_argument, "target class out of range");
    Confusable best{target == 0 ? 1u : 0u, true};
    std::size_t best_mass = 0;
    for (std::size_t c = 0; c < cm.classes; ++c) {
        if (c == target) continue;
        const std::size_t mass = cm.at(target, c) + cm.at(c, target);
        if (mass > best_mass) {
            best_mass = mass;
            best = {c, false};
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Trials

std::string_view to_string(TrialType type) noexcept {
    switch (type) {
        case TrialType::standard_correct: return "standard_correct";
        case TrialType::standard_incorrect: return "standard_incorrect";
        case TrialType::adversarial_incorrect: return "adversarial_incorrect";
    }
    return "unknown";
}

TrialType trial_type_from_string(std::string_view name) {
    if (name == "standard_correct") return TrialType::standard_correct;
    if (name == "standard_incorrect") return TrialType::standard_incorrect;
    if (name == "adversarial_incorrect") return TrialType::adversarial_incorrect;
    throw Error(ErrorKind::invalid_argument, "unknown trial type '" + std::string(name) + "'");
}

std::vector<std::size_t> spectrum_categories(const std::vector<double>& accuracy, std::size_t m) {
    const std::size_t k = accuracy.size();
    std::vector<std::size_t> ranked(k);
    for (std::size_t i = 0; i < k; ++i) ranked[i] = i;
    std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) { return accuracy[a] < accuracy[b]; });
    m = std::min(m, k);
    if (m == 0) return {};
    if (m == 1) return {ranked.front()};
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < m; ++i) {
        const auto rank = static_cast<std::size_t>(
            std::llround(static_cast<double>(i) * static_cast<double>(k - 1) / static_cast<double>(m - 1)));
        out.push_back(ranked[rank]);
    }
    return out;
}

TrialPlan generate_trials(const HeadWeights& head, const FeatureStore& store, const TrialConfig& cfg, std::size_t jobs) {
    const ConfusionMatrix cm = confusion_matrix(head, store, Tag::standard_eval, jobs);
    TrialPlan plan;
    for (std::size_t c = 0; c < store.classes; ++c) plan.accuracy.push_back(cm.accuracy(c));
    plan.categories = spectrum_categories(plan.accuracy, cfg.categories == 0 ? store.classes : cfg.categories);

    const auto eval = with_tag(store, Tag::standard_eval);
    const auto adv = with_tag(store, Tag::adversarial);
    const auto eval_pred = predict_labels(head, eval, jobs);
    const auto adv_pred = adv.empty() ? std::vector<std::size_t>{} : predict_labels(head, adv, jobs);

    const RandomStream root(cfg.seed, 0x7219);
    for (const std::size_t c : plan.categories) {
        for (const TrialType type :
             {TrialType::standard_correct, TrialType::standard_incorrect, TrialType::adversarial_incorrect}) {
            const bool adversarial = type == TrialType::adversarial_incorrect;
            const auto& pool = adversarial ? adv : eval;
            const auto& pred = adversarial ? adv_pred : eval_pred;
            std::vector<std::size_t> eligible;
            for (std::size_t i = 0; i < pool.size(); ++i) {
                if (pool[i]->label != c) continue;
                const bool hit = pred[i] == c;
                if ((type == TrialType::standard_correct) == hit) eligible.push_back(i);
            }
            RandomStream rng = root.child(c * 3 + static_cast<std::size_t>(type));
            const std::size_t take = std::min(cfg.per_category, eligible.size());
            for (std::size_t j = 0; j < take; ++j) {
                std::swap(eligible[j], eligible[j + rng.below(eligible.size() - j)]);
                const std::size_t i = eligible[j];
                TrialSpec t;
                t.trial_id = "c" + std::to_string(c) + "-" + std::string(to_string(type)) + "-" + std::to_string(j);
                t.target_example_id = pool[i]->id;
                t.type = type;
                t.true_category = c;
                t.target_category = pred[i];
                t.alternative_category = type == TrialType::standard_correct ? most_confusable(cm, c).cls : c;
                plan.trials.push_back(std::move(t));
            }
            if (take < cfg.per_category) plan.missing.push_back({c, type, cfg.per_category, take});
        }
    }
    return plan;
}

std::string trial_to_json(const TrialSpec& t) {
    ordered_json j;
    j["trial_id"] = t.trial_id;
    j["target_example_id"] = t.target_example_id;
    j["target_category"] = t.target_category;
    j["alternative_category"] = t.alternative_category;
    j["trial_type"] = std::string(to_string(t.type));
    j["true_category"] = t.true_category;
    return j.dump();
}

TrialSpec trial_from_json(std::string_view line) {
    try {
        const json j = json::parse(line);
        TrialSpec t;
        t.trial_id = j.at("trial_id").get<std::string>();
        t.target_example_id = j.at("target_example_id").get<std::uint32_t>();
        t.target_category = j.at("target_category").get<std::size_t>();
        t.alternative_category = j.at("alternative_category").get<std::size_t>();
        t.type = trial_type_from_string(j.at("trial_type").get<std::string>());
        t.true_category = j.at("true_category").get<std::size_t>();
        return t;
    } catch (const json::exception& e) {
        malformed(std::string("trial line: ") + e.what());
    }
}

void save_trials(const std::vector<TrialSpec>& trials, const std::string& path) {
    std::string out;
    for (const auto& t : trials) out += trial_to_json(t) + '\n';
    io::write_file(path, out);
}

std::vector<TrialSpec> load_trials(const std::string& path) {
    const std::string data = io::read_file(path);
    std::vector<TrialSpec> out;
    for (auto line : lines_of(data))
        if (!line.empty()) out.push_back(trial_from_json(line));
    return out;
}

}  // namespace bt
