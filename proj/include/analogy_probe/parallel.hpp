#ifndef ANALOGY_PROBE_PARALLEL_HPP
#define ANALOGY_PROBE_PARALLEL_HPP

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace analogy_probe {

inline constexpr const char* workers_env = "ANALOGY_PROBE_WORKERS";

/// Worker count from ANALOGY_PROBE_WORKERS, else the hardware concurrency.
inline std::size_t worker_count() {
    if (const char* env = std::getenv(workers_env); env != nullptr && *env != '\0') {
        try {
            const long n = std::stol(env);
            if (n > 0) {
                return static_cast<std::size_t>(n);
            }
        } catch (const std::exception&) {
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

/// Runs fn(i) for i in [0, n). Each index is handled exactly once; callers
/// write results into slot i so the outcome does not depend on scheduling.
/// The first exception thrown by any task is rethrown.
template<typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                    next = n;
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

} // namespace analogy_probe

#endif
