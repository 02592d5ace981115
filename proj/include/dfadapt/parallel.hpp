#ifndef DFADAPT_PARALLEL_HPP
#define DFADAPT_PARALLEL_HPP

#include <thread>
#include <vector>

namespace dfadapt {

// Static contiguous partition of [0, n) over `threads` workers. Callers must
// write only to per-index slots; any reduction happens afterwards in index
// order so results do not depend on scheduling.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
    if (n <= 0) return;
    if (threads <= 1 || n == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    int workers = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    int chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        int lo = w * chunk;
        int hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace dfadapt

#endif
