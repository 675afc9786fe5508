// bt-scorer/1 test peer. Class k gets logit k * (mean pixel value); flags
// inject the failure modes the client has to handle.
#include "bt/errors.hpp"
#include "bt/scorer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

int main(int argc, char** argv) {
    CLI::App app{"bt-scorer/1 loopback scorer"};
    std::size_t classes = 6;
    long long fail_id = -1;
    long long crash_after = -1;
    int sleep_ms = 0;
    bool bad_id = false, bad_prob = false, bad_handshake = false, garbage = false;
    std::string crash_once;
    app.add_option("--classes", classes, "number of classes")->check(CLI::PositiveNumber);
    app.add_option("--fail-id", fail_id, "answer this request id with an error");
    app.add_option("--crash-after", crash_after, "exit after answering this many requests");
    app.add_option("--crash-once", crash_once, "exit on the first request if this file does not exist, creating it");
    app.add_option("--sleep-ms", sleep_ms, "delay before every answer");
    app.add_flag("--bad-id", bad_id, "echo the wrong id");
    app.add_flag("--bad-prob", bad_prob, "report a probability above one");
    app.add_flag("--bad-handshake", bad_handshake, "announce another protocol");
    app.add_flag("--garbage", garbage, "answer with a line that is not JSON");
    CLI11_PARSE(app, argc, argv);

    std::ios::sync_with_stdio(false);
    if (bad_handshake)
        std::cout << R"({"protocol":"bt-scorer/0","n_classes":)" << classes << "}\n" << std::flush;
    else
        std::cout << bt::protocol::encode_handshake(classes) << "\n" << std::flush;

    long long answered = 0;
    std::string line;
    while (std::getline(std::cin, line)) {
        if (!crash_once.empty() && !std::ifstream(crash_once)) {
            std::ofstream(crash_once) << "crashed\n";
            return 3;
        }
        if (crash_after >= 0 && answered >= crash_after) return 3;
        if (sleep_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(sleep_ms));
        bt::ScoreResponse resp;
        try {
            const bt::ScoreRequest req = bt::protocol::decode_request(line);
            resp.id = bad_id ? req.id + 1 : req.id;
            if (static_cast<long long>(req.id) == fail_id) {
                resp.error = "oom";
            } else {
                double mean = 0.0;
                for (double v : req.image.pixels) mean += v;
                mean /= static_cast<double>(req.image.pixels.size());
                double denom = 0.0;
                for (std::size_t k = 0; k < classes; ++k) denom += std::exp(static_cast<double>(k) * mean - (classes - 1.0) * mean);
                for (std::uint32_t c : req.classes) {
                    if (c >= classes) {
                        resp.probs.clear();
                        resp.error = "class out of range";
                        break;
                    }
                    resp.probs.push_back(std::exp(static_cast<double>(c) * mean - (classes - 1.0) * mean) / denom);
                }
                if (bad_prob && !resp.probs.empty()) resp.probs[0] = 1.5;
            }
        } catch (const bt::Error& e) {
            resp.error = e.what();
        }
        if (garbage)
            std::cout << "this is not json\n";
        else
            std::cout << bt::protocol::encode_response(resp) << "\n";
        std::cout << std::flush;
        ++answered;
    }
    return 0;
}
