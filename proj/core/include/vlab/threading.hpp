#pragma once

#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "vlab/common.hpp"

namespace vlab {

// Persistent fork-join pool. Work is split into one contiguous chunk per
// worker, so every output element is written by exactly one thread and
// results do not depend on scheduling.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool(default_threads());
    return pool;
  }

  static int default_threads() {
    if (const char* env = std::getenv("VLAB_THREADS")) {
      int n = std::atoi(env);
      if (n >= 1 && n <= 64) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    return static_cast<int>(hw > 16 ? 16 : hw);
  }

  int size() const { return static_cast<int>(workers_.size()) + 1; }

  // Runs fn(begin, end) over [0, n) split into size() contiguous chunks.
  // fn must write disjoint outputs per index.
  void parallel_for(Index n, const std::function<void(Index, Index)>& fn) {
    const int nt = size();
    if (n <= 0) return;
    if (nt == 1 || n < 2) {
      fn(0, n);
      return;
    }
    const Index chunk = (n + nt - 1) / nt;
    {
      std::unique_lock<std::mutex> lk(mu_);
      task_ = &fn;
      task_n_ = n;
      task_chunk_ = chunk;
      pending_ = 0;
      for (int t = 1; t < nt; ++t) {
        if (t * chunk >= n) break;
        ++pending_;
      }
      remaining_ = pending_;
      ++epoch_;
    }
    cv_.notify_all();
    // Main thread takes chunk 0.
    fn(0, chunk < n ? chunk : n);
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return remaining_ == 0; });
    task_ = nullptr;
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lk(mu_);
      stop_ = true;
      ++epoch_;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

 private:
  explicit ThreadPool(int threads) {
    for (int t = 1; t < threads; ++t) {
      workers_.emplace_back([this, t] { worker_loop(t); });
    }
  }

  void worker_loop(int id) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(Index, Index)>* task = nullptr;
      Index n = 0, chunk = 0;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || epoch_ != seen; });
        seen = epoch_;
        if (stop_) return;
        task = task_;
        n = task_n_;
        chunk = task_chunk_;
      }
      if (!task) continue;
      const Index b = static_cast<Index>(id) * chunk;
      if (b < n) {
        const Index e = b + chunk < n ? b + chunk : n;
        (*task)(b, e);
        std::unique_lock<std::mutex> lk(mu_);
        if (--remaining_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(Index, Index)>* task_ = nullptr;
  Index task_n_ = 0, task_chunk_ = 0;
  int pending_ = 0, remaining_ = 0;
  std::uint64_t epoch_ = 0;
  bool stop_ = false;
};

inline void parallel_for(Index n, const std::function<void(Index, Index)>& fn) {
  ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace vlab
