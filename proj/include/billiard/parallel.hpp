#pragma once

#include <cstddef>
#include <numeric>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace billiard {

// Parallel kernels in this project follow one pattern: each loop index writes
// only to its own output slot, and reductions run afterwards in fixed index
// order. Results are therefore independent of schedule and thread count, and
// the serial policy is a drop-in reference used by tests and benchmarks.

enum class ExecPolicy { serial, parallel };

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

/// Caps OpenMP parallelism globally (CLI --threads). 0 leaves the default.
inline void set_thread_cap(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

template <typename Fn>
void for_each_index(std::size_t n, ExecPolicy policy, Fn&& fn) {
    if (policy == ExecPolicy::parallel) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 16)
        for (long long i = 0; i < static_cast<long long>(n); ++i)
            fn(static_cast<std::size_t>(i));
        return;
#endif
    }
    for (std::size_t i = 0; i < n; ++i) fn(i);
}

/// Ordered sum: identical result for serial and parallel producers.
inline double ordered_sum(const std::vector<double>& v) {
    // pairwise tree reduction, fixed shape
    std::vector<double> buf(v);
    std::size_t n = buf.size();
    while (n > 1) {
        const std::size_t half = (n + 1) / 2;
        for (std::size_t i = 0; i < n / 2; ++i) buf[i] = buf[2 * i] + buf[2 * i + 1];
        if (n % 2) buf[n / 2] = buf[n - 1];
        n = half;
    }
    return n ? buf[0] : 0.0;
}

} // namespace billiard
