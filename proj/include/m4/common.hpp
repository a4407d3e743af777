#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace m4 {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/contract violations inside the numeric stack.
struct ShapeError : Error {
    using Error::Error;
};

// Files, datasets, configs.
struct DataError : Error {
    using Error::Error;
};

// NaN/Inf surfaces, failed gradient checks, non-scalar losses.
struct NumericError : Error {
    using Error::Error;
};

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Deterministic random stream. Every source of randomness in the project
// draws from an explicitly seeded Rng; nothing touches global rand state.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(eng_);
    }
    double normal(double mean, double sd) {
        std::normal_distribution<double> d(mean, sd);
        return d(eng_);
    }
    // inclusive bounds
    long long uniform_int(long long lo, long long hi) {
        std::uniform_int_distribution<long long> d(lo, hi);
        return d(eng_);
    }
    uint64_t next() { return eng_(); }

private:
    std::mt19937_64 eng_;
};

// ---- lightweight persistent worker pool -----------------------------------
//
// Used by the dense kernels (matmul/conv) to split output ranges across
// threads. Work items always write disjoint index ranges, so results are
// bit-identical for any thread count.

inline int& thread_budget() {
    static int budget = []() {
        unsigned hw = std::thread::hardware_concurrency();
        if (hw == 0) hw = 1;
        return static_cast<int>(hw > 4 ? 4 : hw);
    }();
    return budget;
}

class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int workers() const { return static_cast<int>(workers_.size()); }

    // Runs body(chunk) for chunk in [0, nchunks); the calling thread
    // participates. Blocks until every worker has acknowledged the
    // generation, so body stays valid for its whole lifetime.
    void run(int nchunks, const std::function<void(int)>& body) {
        if (nchunks <= 1 || workers_.empty()) {
            for (int i = 0; i < nchunks; ++i) body(i);
            return;
        }
        {
            std::lock_guard<std::mutex> lk(m_);
            body_ = &body;
            nchunks_ = nchunks;
            next_.store(0, std::memory_order_relaxed);
            acked_ = 0;
            ++gen_;
        }
        cv_.notify_all();
        claim_loop(body, nchunks);
        std::unique_lock<std::mutex> lk(m_);
        done_cv_.wait(lk, [&] { return acked_ == static_cast<int>(workers_.size()); });
        body_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

private:
    ThreadPool() {
        int n = thread_budget() - 1;
        for (int i = 0; i < n; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    void claim_loop(const std::function<void(int)>& body, int n) {
        for (;;) {
            int c = next_.fetch_add(1, std::memory_order_relaxed);
            if (c >= n) break;
            body(c);
        }
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* body;
            int n;
            {
                std::unique_lock<std::mutex> lk(m_);
                cv_.wait(lk, [&] { return stop_ || gen_ != seen; });
                if (stop_) return;
                seen = gen_;
                body = body_;
                n = nchunks_;
            }
            if (body) claim_loop(*body, n);
            {
                std::lock_guard<std::mutex> lk(m_);
                ++acked_;
            }
            done_cv_.notify_all();
        }
    }

    std::mutex m_;
    std::condition_variable cv_, done_cv_;
    std::vector<std::thread> workers_;
    const std::function<void(int)>* body_ = nullptr;
    int nchunks_ = 0;
    std::atomic<int> next_{0};
    int acked_ = 0;
    uint64_t gen_ = 0;
    bool stop_ = false;
};

// Splits [0, n) into contiguous ranges across threads when the estimated
// total work justifies it. Ranges are disjoint, so results do not depend on
// the thread count.
inline void parallel_for(long long n, long long cost_hint,
                         const std::function<void(long long, long long)>& body) {
    int threads = thread_budget();
    if (n <= 0) return;
    if (threads <= 1 || n < 2 || cost_hint < 16384) {
        body(0, n);
        return;
    }
    int chunks = static_cast<int>(threads < n ? threads : n);
    long long per = (n + chunks - 1) / chunks;
    ThreadPool::instance().run(chunks, [&](int c) {
        long long lo = c * per;
        long long hi = lo + per < n ? lo + per : n;
        if (lo < hi) body(lo, hi);
    });
}

}  // namespace m4
