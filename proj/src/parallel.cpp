#include "atroseg/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace atroseg {
namespace {

int detect_thread_count() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("ATROSEG_THREADS")) {
        int cap = std::atoi(env);
        if (cap >= 1) n = std::min(n, cap);
    }
    return n;
}

// Persistent pool; tasks are contiguous index ranges handed out statically so
// the partition of [0, n) is a pure function of n and the worker count.
class Pool {
public:
    Pool() : workers_(thread_count() - 1) {
        for (int i = 0; i < static_cast<int>(workers_.size()); ++i) {
            workers_[i] = std::thread([this, i] { worker_loop(i + 1); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    void run(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
        const int nthreads = static_cast<int>(workers_.size()) + 1;
        const std::int64_t chunk = (n + nthreads - 1) / nthreads;
        {
            std::lock_guard<std::mutex> lock(mutex_);
            fn_ = &fn;
            n_ = n;
            chunk_ = chunk;
            pending_ = nthreads - 1;
            ++generation_;
        }
        cv_.notify_all();
        run_chunk(0);
        std::unique_lock<std::mutex> lock(mutex_);
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    void run_chunk(int slot) {
        const std::int64_t lo = std::min<std::int64_t>(n_, slot * chunk_);
        const std::int64_t hi = std::min<std::int64_t>(n_, lo + chunk_);
        if (lo < hi) (*fn_)(lo, hi);
    }

    void worker_loop(int slot) {
        std::uint64_t seen = 0;
        for (;;) {
            std::unique_lock<std::mutex> lock(mutex_);
            cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            lock.unlock();
            run_chunk(slot);
            lock.lock();
            if (--pending_ == 0) done_cv_.notify_one();
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(std::int64_t, std::int64_t)>* fn_ = nullptr;
    std::int64_t n_ = 0;
    std::int64_t chunk_ = 0;
    int pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace

int thread_count() {
    static const int n = detect_thread_count();
    return n;
}

void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    if (thread_count() == 1 || n < grain) {
        fn(0, n);
        return;
    }
    static Pool pool;
    pool.run(n, fn);
}

}  // namespace atroseg
