#pragma once

#include <atomic>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace stf {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Builds an error message from stream-formattable pieces.
template <typename... Args>
std::string msg(const Args&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

inline void check_arg(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

inline void check_runtime(bool cond, const std::string& what) {
    if (!cond) throw std::runtime_error(what);
}

// splitmix64: used to derive independent sub-seeds from one master seed.
inline u64 split_seed(u64 seed, u64 stream) {
    u64 z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(u64 seed) { return std::mt19937_64(seed); }

// Live-allocation accounting for tensor buffers. Used by the scaling
// benchmark (peak memory column) and by tests asserting that the linear
// attention path never materializes an n x n matrix.
namespace alloc_stats {

struct Counters {
    std::atomic<i64> current_bytes{0};
    std::atomic<i64> peak_bytes{0};
    std::atomic<i64> largest_block{0};
};

Counters& counters();

inline void on_alloc(i64 bytes) {
    auto& c = counters();
    i64 cur = c.current_bytes.fetch_add(bytes) + bytes;
    i64 peak = c.peak_bytes.load();
    while (cur > peak && !c.peak_bytes.compare_exchange_weak(peak, cur)) {
    }
    i64 big = c.largest_block.load();
    while (bytes > big && !c.largest_block.compare_exchange_weak(big, bytes)) {
    }
}

inline void on_free(i64 bytes) { counters().current_bytes.fetch_sub(bytes); }

inline void reset() {
    auto& c = counters();
    c.peak_bytes.store(c.current_bytes.load());
    c.largest_block.store(0);
}

inline i64 peak_bytes() { return counters().peak_bytes.load(); }
inline i64 largest_block() { return counters().largest_block.load(); }

}  // namespace alloc_stats

}  // namespace stf
