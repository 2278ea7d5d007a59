#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace kte {

/// Worker count for replicate- and bundle-level parallelism. Controlled by
/// the KTE_WORKERS environment variable, defaulting to the hardware count.
inline int worker_count() {
    if (const char* env = std::getenv("KTE_WORKERS")) {
        const int v = std::atoi(env);
        if (v >= 1) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

/// Run fn(i) for i in [0, n). Tasks must be independent and own their
/// randomness (pre-split substreams), so scheduling order cannot change
/// results. The first thrown exception is rethrown after all workers join.
template <class Fn>
inline void parallel_for(int n, Fn&& fn, int workers = -1) {
    if (workers < 1) workers = worker_count();
    if (workers <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto work = [&]() {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    const int spawn = std::min(workers, n);
    pool.reserve(static_cast<std::size_t>(spawn));
    for (int w = 0; w < spawn; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace kte
