#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace leirstd {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Each index is handled
/// exactly once, so results written to slot i are independent of scheduling.
/// The first exception thrown by any worker is rethrown on the caller.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr failure;
    std::mutex guard;
    std::vector<std::thread> workers;
    for (std::size_t t = 0; t < jobs; ++t) {
        workers.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += jobs) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(guard);
                    if (!failure) failure = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& w : workers) w.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace leirstd
