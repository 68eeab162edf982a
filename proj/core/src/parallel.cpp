#include "worldkit/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace worldkit {

namespace {

std::atomic<bool> g_deterministic{false};

int env_threads() {
    const char *env = std::getenv("WORLDKIT_THREADS");
    if (env == nullptr || *env == '\0') {
        return 0;
    }
    try {
        return std::max(1, std::stoi(env));
    } catch (const std::exception &) {
        return 0;
    }
}

} // namespace

void set_deterministic(bool on) { g_deterministic = on; }
bool deterministic() { return g_deterministic; }

int worker_count() {
    if (g_deterministic) {
        return 1;
    }
    if (const int n = env_threads(); n > 0) {
        return n;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)> &task, int workers) {
    if (workers <= 0) {
        workers = worker_count();
    }
    const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto run = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                task(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(w - 1);
    for (std::size_t t = 1; t < w; ++t) pool.emplace_back(run);
    run();
    pool.clear();
    if (error) std::rethrow_exception(error);
}

} // namespace worldkit
