#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace causaltrial {

// Process-wide worker count. Results never depend on it: every parallel loop
// writes slot i from task i only, and all randomness is keyed by task index.

namespace detail {
inline std::atomic<int>& thread_setting() {
    static std::atomic<int> n{1};
    return n;
}
inline thread_local bool in_parallel_region = false;
}  // namespace detail

inline void set_num_threads(int n) {
    detail::thread_setting().store(n <= 0 ? static_cast<int>(std::max(1u, std::thread::hardware_concurrency())) : n);
}

inline int num_threads() { return detail::thread_setting().load(); }

/// Run fn(i) for i in [0, n). Nested calls run inline on the calling worker.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n));
    if (workers <= 1 || detail::in_parallel_region) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto body = [&] {
        detail::in_parallel_region = true;
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) break;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                next.store(n);
            }
        }
        detail::in_parallel_region = false;
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers - 1));
    for (int w = 1; w < workers; ++w) pool.emplace_back(body);
    body();
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace causaltrial
