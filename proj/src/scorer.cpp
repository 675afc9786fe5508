#include "bt/scorer.hpp"

#include "bt/errors.hpp"
#include "bt/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

namespace bt {

using ojson = nlohmann::ordered_json;

void check_probabilities(std::span<const double> probs, bool full_class) {
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = probs[i];
        if (!std::isfinite(p) || p < 0.0 || p > 1.0)
            throw ScorerError("probability " + std::to_string(i) + " is outside [0,1]: " + std::to_string(p));
        sum += p;
    }
    if (full_class && std::fabs(sum - 1.0) > 1e-9)
        throw ScorerError("full-class probabilities sum to " + std::to_string(sum));
}

void check_class_list(std::span<const std::uint32_t> requested, std::size_t classes) {
    if (requested.empty()) throw Error(ErrorKind::invalid_argument, "class list is empty");
    std::vector<std::uint32_t> sorted(requested.begin(), requested.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw Error(ErrorKind::invalid_argument, "class list has duplicates");
    if (sorted.back() >= classes)
        throw Error(ErrorKind::invalid_argument, "class " + std::to_string(sorted.back()) + " out of range");
}

double Scorer::score_one(const Image& img, std::uint32_t cls) {
    const std::uint32_t c[1] = {cls};
    const std::vector<double> p = score(img, c);
    if (p.size() != 1) throw Error(ErrorKind::protocol_error, "scorer returned the wrong number of probabilities");
    check_probabilities(p, false);
    return p[0];
}

// ---------------------------------------------------------------------------

ToyScorer::ToyScorer(HeadWeights head, std::size_t grid) : head_(std::move(head)), grid_(grid) {
    if (grid_ == 0 || head_.features() != grid_ * grid_)
        throw_dimension_mismatch("toy scorer head must have grid*grid features");
}

std::string ToyScorer::id() const {
    return "toy:" + std::to_string(head_.classes()) + "x" + std::to_string(grid_);
}

Vector ToyScorer::probabilities(const Image& img) const {
    return softmax_probs(head_, grayscale_features(img, grid_));
}

std::vector<double> ToyScorer::score(const Image& img, std::span<const std::uint32_t> classes) {
    check_class_list(classes, head_.classes());
    const Vector p = probabilities(img);
    std::vector<double> out;
    out.reserve(classes.size());
    for (std::uint32_t c : classes) out.push_back(p(c));
    return out;
}

// ---------------------------------------------------------------------------

namespace protocol {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

[[noreturn]] void malformed(const std::string& what) {
    throw Error(ErrorKind::protocol_error, "malformed bt-scorer/1 line: " + what);
}

ojson parse(std::string_view line) {
    ojson j = ojson::parse(line.begin(), line.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) malformed("not a JSON object");
    return j;
}

template <typename T>
T get_unsigned(const ojson& j, const char* key, std::uint64_t max) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_number_unsigned()) malformed(std::string("missing unsigned field ") + key);
    const auto v = it->get<std::uint64_t>();
    if (v > max) malformed(std::string("field out of range: ") + key);
    return static_cast<T>(v);
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        const std::uint32_t v = (std::uint32_t{bytes[i]} << 16) | (std::uint32_t{bytes[i + 1]} << 8) | bytes[i + 2];
        out += kAlphabet[v >> 18];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += kAlphabet[v & 63];
    }
    const std::size_t rest = bytes.size() - i;
    if (rest == 1) {
        const std::uint32_t v = std::uint32_t{bytes[i]} << 16;
        out += kAlphabet[v >> 18];
        out += kAlphabet[(v >> 12) & 63];
        out += "==";
    } else if (rest == 2) {
        const std::uint32_t v = (std::uint32_t{bytes[i]} << 16) | (std::uint32_t{bytes[i + 1]} << 8);
        out += kAlphabet[v >> 18];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    static const auto table = [] {
        std::array<int, 256> t;
        t.fill(-1);
        for (int i = 0; i < 64; ++i) t[static_cast<unsigned char>(kAlphabet[i])] = i;
        return t;
    }();
    if (text.size() % 4 != 0) malformed("base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        const bool last = i + 4 == text.size();
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char ch = text[i + k];
            if (ch == '=' && last && k >= 2) {
                v[k] = 0;
                ++pad;
                continue;
            }
            if (pad > 0) malformed("base64 padding in the middle");
            v[k] = table[static_cast<unsigned char>(ch)];
            if (v[k] < 0) malformed("invalid base64 character");
        }
        const std::uint32_t w = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) | (std::uint32_t(v[2]) << 6) | std::uint32_t(v[3]);
        // Non-canonical trailing bits would break the line round trip.
        if ((pad == 1 && (w & 0xFF)) || (pad == 2 && (w & 0xFFFF))) malformed("non-zero base64 padding bits");
        out.push_back(static_cast<std::uint8_t>(w >> 16));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>((w >> 8) & 0xFF));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(w & 0xFF));
    }
    return out;
}

std::string encode_handshake(std::size_t classes) {
    ojson j;
    j["protocol"] = name;
    j["n_classes"] = classes;
    return j.dump();
}

std::size_t decode_handshake(std::string_view line) {
    const ojson j = parse(line);
    auto it = j.find("protocol");
    if (it == j.end() || !it->is_string() || it->get<std::string>() != name)
        throw Error(ErrorKind::protocol_error, "scorer did not announce bt-scorer/1");
    const auto k = get_unsigned<std::size_t>(j, "n_classes", 1u << 31);
    if (k == 0) malformed("n_classes is zero");
    return k;
}

std::string encode_request(const ScoreRequest& req) {
    std::vector<std::uint8_t> bytes(req.image.pixels.size() * 4);
    for (std::size_t i = 0; i < req.image.pixels.size(); ++i) {
        const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(req.image.pixels[i]));
        for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(u >> (8 * b));
    }
    ojson j;
    j["id"] = req.id;
    j["width"] = req.image.width;
    j["height"] = req.image.height;
    j["channels"] = req.image.channels;
    j["pixels_b64"] = base64_encode(bytes);
    j["classes"] = req.classes;
    return j.dump();
}

ScoreRequest decode_request(std::string_view line) {
    const ojson j = parse(line);
    ScoreRequest req;
    req.id = get_unsigned<std::uint64_t>(j, "id", UINT64_MAX);
    req.image.width = get_unsigned<std::uint32_t>(j, "width", UINT32_MAX);
    req.image.height = get_unsigned<std::uint32_t>(j, "height", UINT32_MAX);
    req.image.channels = get_unsigned<std::uint32_t>(j, "channels", 255);
    auto px = j.find("pixels_b64");
    if (px == j.end() || !px->is_string()) malformed("missing pixels_b64");
    const auto bytes = base64_decode(px->get_ref<const std::string&>());
    const std::size_t n = std::size_t{req.image.width} * req.image.height * req.image.channels;
    if (bytes.size() != n * 4) malformed("pixel payload does not match the dimensions");
    req.image.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= std::uint32_t{bytes[i * 4 + b]} << (8 * b);
        req.image.pixels[i] = std::bit_cast<float>(u);
    }
    auto cls = j.find("classes");
    if (cls == j.end() || !cls->is_array() || cls->empty()) malformed("missing classes");
    for (const auto& c : *cls) {
        if (!c.is_number_unsigned() || c.get<std::uint64_t>() > UINT32_MAX) malformed("bad class index");
        req.classes.push_back(c.get<std::uint32_t>());
    }
    return req;
}

std::string encode_response(const ScoreResponse& resp) {
    ojson j;
    j["id"] = resp.id;
    if (resp.error)
        j["error"] = *resp.error;
    else
        j["probs"] = resp.probs;
    return j.dump();
}

ScoreResponse decode_response(std::string_view line) {
    const ojson j = parse(line);
    ScoreResponse resp;
    resp.id = get_unsigned<std::uint64_t>(j, "id", UINT64_MAX);
    auto err = j.find("error");
    auto probs = j.find("probs");
    if ((err == j.end()) == (probs == j.end())) malformed("response needs exactly one of probs and error");
    if (err != j.end()) {
        if (!err->is_string()) malformed("error is not a string");
        resp.error = err->get<std::string>();
        return resp;
    }
    if (!probs->is_array()) malformed("probs is not an array");
    for (const auto& p : *probs) {
        if (!p.is_number()) malformed("probability is not a number");
        resp.probs.push_back(p.get<double>());
    }
    return resp;
}

}  // namespace protocol

// ---------------------------------------------------------------------------

ExternalScorerConfig ExternalScorerConfig::from_env() {
    ExternalScorerConfig cfg;
    if (const char* cmd = std::getenv("BT_SCORER_CMD")) cfg.command = cmd;
    if (const char* ms = std::getenv("BT_SCORER_TIMEOUT_MS")) {
        char* end = nullptr;
        const long long v = std::strtoll(ms, &end, 10);
        if (end == ms || *end != '\0' || v <= 0)
            throw Error(ErrorKind::invalid_argument, "BT_SCORER_TIMEOUT_MS must be a positive integer");
        cfg.timeout = std::chrono::milliseconds(v);
    }
    return cfg;
}

namespace {

using Clock = std::chrono::steady_clock;

// Distinguishes a dead child from other transport failures.
struct ChildGone {};

int remaining_ms(Clock::time_point deadline) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    return left <= 0 ? 0 : static_cast<int>(std::min<long long>(left, 1 << 30));
}

[[noreturn]] void timed_out(std::chrono::milliseconds timeout) {
    throw Error(ErrorKind::timeout, "scorer did not answer within " + std::to_string(timeout.count()) + " ms");
}

}  // namespace

struct ExternalScorer::Process {
    pid_t pid = -1;
    int to_child = -1;
    int from_child = -1;
    std::string buffer;

    void write_all(const std::string& data, Clock::time_point deadline, std::chrono::milliseconds timeout) {
        std::size_t off = 0;
        while (off < data.size()) {
            pollfd p{to_child, POLLOUT, 0};
            const int r = ::poll(&p, 1, remaining_ms(deadline));
            if (r < 0 && errno == EINTR) continue;
            if (r == 0) timed_out(timeout);
            if (p.revents & (POLLERR | POLLHUP)) throw ChildGone{};
            const ssize_t n = ::write(to_child, data.data() + off, data.size() - off);
            if (n < 0) {
                if (errno == EINTR || errno == EAGAIN) continue;
                if (errno == EPIPE) throw ChildGone{};
                throw Error(ErrorKind::io_error, std::string("write to scorer failed: ") + std::strerror(errno));
            }
            off += static_cast<std::size_t>(n);
        }
    }

    std::string read_line(Clock::time_point deadline, std::chrono::milliseconds timeout) {
        for (;;) {
            const auto nl = buffer.find('\n');
            if (nl != std::string::npos) {
                std::string line = buffer.substr(0, nl);
                buffer.erase(0, nl + 1);
                if (!line.empty() && line.back() == '\r') line.pop_back();
                return line;
            }
            pollfd p{from_child, POLLIN, 0};
            const int r = ::poll(&p, 1, remaining_ms(deadline));
            if (r < 0 && errno == EINTR) continue;
            if (r == 0) timed_out(timeout);
            char chunk[65536];
            const ssize_t n = ::read(from_child, chunk, sizeof chunk);
            if (n == 0) throw ChildGone{};
            if (n < 0) {
                if (errno == EINTR || errno == EAGAIN) continue;
                throw Error(ErrorKind::io_error, std::string("read from scorer failed: ") + std::strerror(errno));
            }
            buffer.append(chunk, static_cast<std::size_t>(n));
        }
    }

    void terminate() {
        if (to_child >= 0) ::close(to_child);
        if (from_child >= 0) ::close(from_child);
        to_child = from_child = -1;
        if (pid <= 0) return;
        int status = 0;
        for (int i = 0; i < 200; ++i) {
            if (::waitpid(pid, &status, WNOHANG) == pid) {
                pid = -1;
                return;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
        ::kill(pid, SIGKILL);
        ::waitpid(pid, &status, 0);
        pid = -1;
    }
};

ExternalScorer::ExternalScorer(ExternalScorerConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.command.empty()) throw Error(ErrorKind::invalid_argument, "external scorer command is empty (set BT_SCORER_CMD)");
    if (cfg_.timeout.count() <= 0) throw Error(ErrorKind::invalid_argument, "scorer timeout must be positive");
    static std::once_flag sigpipe;
    std::call_once(sigpipe, [] { std::signal(SIGPIPE, SIG_IGN); });
    start();
}

ExternalScorer::~ExternalScorer() { stop(); }

std::unique_ptr<Scorer> ExternalScorer::clone() const { return std::make_unique<ExternalScorer>(cfg_); }

void ExternalScorer::start() {
    int in[2], out[2];
    if (::pipe2(in, O_CLOEXEC) != 0) throw Error(ErrorKind::io_error, "pipe failed");
    if (::pipe2(out, O_CLOEXEC) != 0) {
        ::close(in[0]);
        ::close(in[1]);
        throw Error(ErrorKind::io_error, "pipe failed");
    }
    const pid_t pid = ::fork();
    if (pid < 0) {
        for (int fd : {in[0], in[1], out[0], out[1]}) ::close(fd);
        throw Error(ErrorKind::io_error, "fork failed");
    }
    if (pid == 0) {
        ::dup2(in[0], STDIN_FILENO);
        ::dup2(out[1], STDOUT_FILENO);
        ::execl("/bin/sh", "sh", "-c", cfg_.command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(in[0]);
    ::close(out[1]);
    proc_ = std::make_unique<Process>();
    proc_->pid = pid;
    proc_->to_child = in[1];
    proc_->from_child = out[0];
    ::fcntl(in[1], F_SETFL, ::fcntl(in[1], F_GETFL) | O_NONBLOCK);
    ::fcntl(out[0], F_SETFL, ::fcntl(out[0], F_GETFL) | O_NONBLOCK);

    std::string hello;
    try {
        hello = proc_->read_line(Clock::now() + cfg_.timeout, cfg_.timeout);
    } catch (const ChildGone&) {
        stop();
        throw Error(ErrorKind::protocol_error, "scorer exited before the handshake");
    } catch (...) {
        stop();
        throw;
    }
    std::size_t k = 0;
    try {
        k = protocol::decode_handshake(hello);
    } catch (...) {
        stop();
        throw;
    }
    if (classes_ != 0 && k != classes_) {
        stop();
        throw Error(ErrorKind::protocol_error, "restarted scorer changed its class count");
    }
    classes_ = k;
}

void ExternalScorer::stop() {
    if (proc_) proc_->terminate();
    proc_.reset();
}

std::string ExternalScorer::exchange(const std::string& line) {
    for (;;) {
        if (!proc_) {
            if (restarts_ >= cfg_.max_restarts)
                throw Error(ErrorKind::scorer_error, "scorer process is gone and the restart limit is reached");
            ++restarts_;
            start();
        }
        const auto deadline = Clock::now() + cfg_.timeout;
        try {
            proc_->write_all(line, deadline, cfg_.timeout);
            return proc_->read_line(deadline, cfg_.timeout);
        } catch (const ChildGone&) {
            stop();
        } catch (const Error& e) {
            // After a timeout the stream position is unknown.
            if (e.kind() == ErrorKind::timeout) stop();
            throw;
        }
    }
}

ScoreResponse ExternalScorer::request(const ScoreRequest& req) {
    check_class_list(req.classes, classes_);
    if (req.image.channels > 255) throw Error(ErrorKind::invalid_argument, "at most 255 channels");
    const std::string reply = exchange(protocol::encode_request(req) + "\n");
    ScoreResponse resp = protocol::decode_response(reply);
    if (resp.id != req.id)
        throw Error(ErrorKind::protocol_error,
                    "response id " + std::to_string(resp.id) + " does not match request id " + std::to_string(req.id));
    if (resp.error) throw ScorerError(*resp.error);
    if (resp.probs.size() != req.classes.size())
        throw Error(ErrorKind::protocol_error, "response has the wrong number of probabilities");
    check_probabilities(resp.probs, req.classes.size() == classes_);
    return resp;
}

std::vector<double> ExternalScorer::score(const Image& img, std::span<const std::uint32_t> classes) {
    ScoreRequest req;
    req.id = next_id_++;
    req.image = img;
    req.classes.assign(classes.begin(), classes.end());
    return request(req).probs;
}

// ---------------------------------------------------------------------------

namespace {

std::string summarize(const std::vector<BatchScoreError::Failure>& failures) {
    std::string msg = std::to_string(failures.size()) + " image(s) failed to score; first at index " +
                      std::to_string(failures.front().index) + ": " + failures.front().message;
    return msg;
}

}  // namespace

BatchScoreError::BatchScoreError(std::vector<Failure> failures)
    : Error(failures.empty() ? ErrorKind::scorer_error : failures.front().kind,
            failures.empty() ? std::string("batch failed") : summarize(failures)),
      failures_(std::move(failures)) {}

std::vector<double> batch_score(Scorer& scorer, std::span<const Image> images, std::uint32_t cls,
                                std::size_t parallelism) {
    if (parallelism == 0) throw Error(ErrorKind::invalid_argument, "parallelism must be at least 1");
    const std::size_t workers = std::max<std::size_t>(1, std::min(parallelism, images.size()));
    std::vector<std::unique_ptr<Scorer>> clones;
    if (!scorer.thread_safe())
        for (std::size_t w = 1; w < workers; ++w) clones.push_back(scorer.clone());
    auto scorer_for = [&](std::size_t w) -> Scorer& {
        return (w == 0 || scorer.thread_safe()) ? scorer : *clones[w - 1];
    };

    std::vector<double> out(images.size(), 0.0);
    std::vector<std::optional<BatchScoreError::Failure>> failed(images.size());
    parallel_for_workers(images.size(), workers, [&](std::size_t i, std::size_t w) {
        try {
            out[i] = scorer_for(w).score_one(images[i], cls);
        } catch (const Error& e) {
            failed[i] = BatchScoreError::Failure{i, e.kind(), e.what()};
        } catch (const std::exception& e) {
            failed[i] = BatchScoreError::Failure{i, ErrorKind::scorer_error, e.what()};
        }
    });
    std::vector<BatchScoreError::Failure> failures;
    for (auto& f : failed)
        if (f) failures.push_back(std::move(*f));
    if (!failures.empty()) throw BatchScoreError(std::move(failures));
    return out;
}

}  // namespace bt
