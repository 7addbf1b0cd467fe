#pragma once

#include <atomic>
#include <chrono>
#include <exception>
#include <functional>
#include <stdexcept>
#include <thread>
#include <vector>

namespace nd {

struct JobTiming {
    double seconds = 0.0;
    int worker = -1;
};

template <typename R>
struct PoolResult {
    std::vector<R> results;
    std::vector<JobTiming> timings;
    double wall_seconds = 0.0;
};

/// Runs independent jobs across `workers` threads. Each job writes to its own
/// slot and owns its randomness, so the result vector is a pure function of
/// the job list: worker count changes scheduling and wall time only.
template <typename R>
PoolResult<R> run_jobs(const std::vector<std::function<R()>>& jobs, int workers) {
    if (workers < 1) throw std::invalid_argument("run_jobs: workers must be >= 1");
    using clock = std::chrono::steady_clock;
    PoolResult<R> out;
    out.results.resize(jobs.size());
    out.timings.resize(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    const auto t0 = clock::now();

    auto run_one = [&](std::size_t i, int worker) {
        const auto s = clock::now();
        try {
            out.results[i] = jobs[i]();
        } catch (...) {
            errors[i] = std::current_exception();
        }
        out.timings[i].seconds = std::chrono::duration<double>(clock::now() - s).count();
        out.timings[i].worker = worker;
    };

    if (workers == 1 || jobs.size() <= 1) {
        for (std::size_t i = 0; i < jobs.size(); ++i) run_one(i, 0);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> threads;
        const int nthreads = std::min<int>(workers, static_cast<int>(jobs.size()));
        threads.reserve(static_cast<std::size_t>(nthreads));
        for (int w = 0; w < nthreads; ++w)
            threads.emplace_back([&, w] {
                for (;;) {
                    std::size_t i = next.fetch_add(1);
                    if (i >= jobs.size()) return;
                    run_one(i, w);
                }
            });
        for (auto& t : threads) t.join();
    }

    out.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
    for (std::size_t i = 0; i < errors.size(); ++i)
        if (errors[i]) std::rethrow_exception(errors[i]);
    return out;
}

}  // namespace nd
