#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace bt {

/// Runs body(i, worker) for i in [0, n) on up to `jobs` threads, worker in
/// [0, jobs). Work items are claimed dynamically, so callers must write
/// results by index; nothing about the result may depend on which worker ran
/// which item. The first exception thrown is rethrown on the calling thread
/// after all workers join.
inline void parallel_for_workers(std::size_t n, std::size_t jobs,
                                 const std::function<void(std::size_t, std::size_t)>& body) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i, 0);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&](std::size_t id) {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                body(i, id);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                next.store(n);
            }
        }
    };
    std::vector<std::jthread> threads;
    threads.reserve(jobs - 1);
    for (std::size_t t = 1; t < jobs; ++t) threads.emplace_back(worker, t);
    worker(0);
    threads.clear();
    if (first_error) std::rethrow_exception(first_error);
}

inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& body) {
    parallel_for_workers(n, jobs, [&](std::size_t i, std::size_t) { body(i); });
}

}  // namespace bt
