#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace pointlab {

// Runs fn(i) for i in [0, n). Workers pull indices from a shared counter;
// callers must write results to disjoint per-index slots and reduce in
// index order afterwards to stay bit-reproducible across thread counts.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    const int workers = std::min(threads, n);
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& t : pool) t.join();
}

}  // namespace pointlab
