#ifndef JOINTAD_PARALLEL_HPP
#define JOINTAD_PARALLEL_HPP

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace jointad {

// Persistent worker pool for the conv kernels. Every output element is
// written by exactly one worker, so results are bit-identical for any
// worker count.
class ThreadPool {
 public:
  using Range = std::function<void(std::int64_t, std::int64_t)>;

  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  static void set_threads(int n) {
    requested_threads() = n;
  }

  static int threads() {
    int n = requested_threads();
    if (n <= 0) {
      n = static_cast<int>(std::thread::hardware_concurrency());
      if (n <= 0) n = 1;
    }
    return n;
  }

  // Splits [0, n) into contiguous chunks; f(begin, end) per chunk. The
  // calling thread takes the first chunk.
  void run(std::int64_t n, const Range& f) {
    if (n <= 0) return;
    int k = threads();
    if (k > n) k = static_cast<int>(n);
    if (k <= 1) {
      f(0, n);
      return;
    }
    ensure_workers(k - 1);
    std::int64_t chunk = (n + k - 1) / k;
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_ = &f;
      job_n_ = n;
      job_chunk_ = chunk;
      next_chunk_.store(1, std::memory_order_relaxed);
      // Every live worker wakes and decrements once, even when it gets no chunk.
      pending_.store(static_cast<int>(workers_.size()), std::memory_order_relaxed);
      ++generation_;
    }
    cv_.notify_all();
    f(0, std::min(chunk, n));
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return pending_.load(std::memory_order_acquire) == 0; });
    job_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

 private:
  ThreadPool() = default;

  static std::atomic<int>& requested_threads() {
    static std::atomic<int> n{0};
    return n;
  }

  void ensure_workers(int n) {
    while (static_cast<int>(workers_.size()) < n) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      const Range* job = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
        seen = generation_;
        if (stop_) return;
        job = job_;
      }
      if (!job) continue;
      for (;;) {
        std::int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
        std::int64_t b = c * job_chunk_;
        if (b >= job_n_) break;
        (*job)(b, std::min(b + job_chunk_, job_n_));
      }
      if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
        std::lock_guard<std::mutex> lk(mu_);
        done_cv_.notify_all();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> workers_;
  const Range* job_ = nullptr;
  std::int64_t job_n_ = 0, job_chunk_ = 0;
  std::atomic<std::int64_t> next_chunk_{0};
  std::atomic<int> pending_{0};
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

// Static chunking over [0, n). Falls back to inline execution for small n.
template <typename F>
void parallel_for(std::int64_t n, F&& f, std::int64_t grain = 1) {
  if (n <= 0) return;
  if (n < 2 * grain || ThreadPool::threads() <= 1) {
    for (std::int64_t i = 0; i < n; ++i) f(i);
    return;
  }
  ThreadPool::instance().run(n, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) f(i);
  });
}

}  // namespace jointad

#endif  // JOINTAD_PARALLEL_HPP
