#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace prinr {

// Thread cap: PRINR_NUM_THREADS env var, else hardware concurrency.
inline int num_threads() {
    static const int n = [] {
        if (const char* env = std::getenv("PRINR_NUM_THREADS")) {
            const int v = std::atoi(env);
            if (v >= 1) return v;
        }
        const unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : static_cast<int>(hc);
    }();
    return n;
}

// Static-partition parallel loop. Each index is processed exactly once by a
// fixed thread, so writes to per-index slots are race-free and results do not
// depend on scheduling. Reductions must happen after the join, in index order.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const int t = std::min<std::size_t>(num_threads(), n);
    if (t <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(t);
    for (int w = 0; w < t; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += t) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace prinr
