#ifndef CYTOMATCH_DETAIL_PARALLEL_HPP
#define CYTOMATCH_DETAIL_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

/**
 * @file parallel.hpp
 *
 * @brief Block-parallel loops with a fixed work decomposition.
 *
 * Work over `n` items is always cut into the same blocks regardless of the worker count.
 * Callers keep one partial result per block and combine them in block order afterwards,
 * which makes every reduction bit-identical for any number of threads.
 */

namespace cytomatch {

namespace detail {

inline int default_thread_count() {
    if (const char* env = std::getenv("CYTOMATCH_THREADS")) {
        try {
            const int parsed = std::stoi(env);
            if (parsed > 0) {
                return parsed;
            }
        } catch (...) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

inline std::atomic<int>& thread_count_storage() {
    static std::atomic<int> count{default_thread_count()};
    return count;
}

}

/** Caps the number of workers used by the parallel loops; values below 1 restore the default. */
inline void set_thread_count(int threads) {
    detail::thread_count_storage() = threads > 0 ? threads : detail::default_thread_count();
}

inline int thread_count() {
    return detail::thread_count_storage();
}

namespace detail {

inline constexpr std::size_t default_block_size = 512;

inline std::size_t block_count(std::size_t n, std::size_t block_size = default_block_size) {
    return (n + block_size - 1) / block_size;
}

/**
 * Calls `fn(block, begin, end)` for every block of `[0, n)`.
 * If any call throws, the exception from the lowest-numbered failing block is rethrown.
 */
template<class Function>
void parallel_blocks(std::size_t n, Function&& fn, std::size_t block_size = default_block_size) {
    const std::size_t nblocks = block_count(n, block_size);
    if (nblocks == 0) {
        return;
    }

    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(thread_count()), nblocks);
    if (workers <= 1) {
        for (std::size_t b = 0; b < nblocks; ++b) {
            fn(b, b * block_size, std::min(n, (b + 1) * block_size));
        }
        return;
    }

    std::atomic<std::size_t> next{0};
    std::mutex error_lock;
    std::exception_ptr error;
    std::size_t error_block = nblocks;

    auto worker = [&]() {
        while (true) {
            const std::size_t b = next.fetch_add(1);
            if (b >= nblocks) {
                return;
            }
            try {
                fn(b, b * block_size, std::min(n, (b + 1) * block_size));
            } catch (...) {
                std::lock_guard<std::mutex> guard(error_lock);
                if (b < error_block) {
                    error_block = b;
                    error = std::current_exception();
                }
            }
        }
    };

    {
        std::vector<std::jthread> pool;
        pool.reserve(workers - 1);
        for (std::size_t w = 1; w < workers; ++w) {
            pool.emplace_back(worker);
        }
        worker();
    }

    if (error) {
        std::rethrow_exception(error);
    }
}

}

}

#endif
