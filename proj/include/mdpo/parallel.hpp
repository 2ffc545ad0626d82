// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mdpo {

/// Worker threads to use: hardware concurrency capped by the
/// MDPO_LAB_THREADS environment variable (minimum 1).
int64_t worker_count();

/// Runs f(i) for i in [0, n) on worker threads. Exceptions are rethrown on
/// the calling thread. Results must be written to index-disjoint slots;
/// callers reduce them in index order afterwards, so the outcome is
/// independent of scheduling.
template <class F>
void parallel_for(int64_t n, F&& f) {
    const int64_t workers = std::min<int64_t>(worker_count(), n);
    if (workers <= 1) {
        for (int64_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(workers));
    for (int64_t w = 0; w < workers; ++w) {
        threads.emplace_back([&]() {
            while (!failed.load(std::memory_order_relaxed)) {
                const int64_t i = next.fetch_add(1);
                if (i >= n) break;
                try {
                    f(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    failed.store(true);
                }
            }
        });
    }
    for (std::thread& t : threads) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace mdpo
