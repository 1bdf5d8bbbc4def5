#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace roughsde {

template <int D>
using Vec = Eigen::Matrix<double, D, 1>;

template <int D>
using Mat = Eigen::Matrix<double, D, D>;

/// Base error for every failure raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a model hypothesis (exponent window, ellipticity,
/// divergence-free flag) is violated.
class HypothesisError : public Error {
public:
    using Error::Error;
};

/// Number of worker threads; `ROUGHSDE_WORKERS` overrides the hardware count.
inline int worker_count()
{
    if (const char* env = std::getenv("ROUGHSDE_WORKERS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            return n;
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(i) for i in [0, n) over contiguous static chunks. fn must only
/// write to state owned by index i, so results never depend on the worker
/// count or scheduling.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn)
{
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(worker_count()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) {
            break;
        }
        pool.emplace_back([lo, hi, w, &fn, &errors] {
            try {
                for (std::size_t i = lo; i < hi; ++i) {
                    fn(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

template <int D>
constexpr void check_dimension()
{
    static_assert(D >= 1 && D <= 2, "roughsde supports spatial dimension 1 or 2");
}

}  // namespace roughsde
