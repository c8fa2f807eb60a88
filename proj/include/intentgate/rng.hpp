#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace intentgate {

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 14695981039346656037ULL) {
    std::uint64_t hash = seed;
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 1099511628211ULL;
    }
    return hash;
}

/// Deterministic RNG with hand-rolled bounded draws and shuffle so that
/// sequences are identical across platforms and standard libraries.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t bounded(std::uint64_t n) {
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    double unit_real() {
        return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    }

    /// Fisher-Yates, last-to-first, using bounded().
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    /// Random printable ASCII character (0x20..0x7e).
    char printable() { return static_cast<char>(0x20 + bounded(95)); }

    /// Random printable ASCII character guaranteed to differ from `avoid`.
    char printable_excluding(char avoid) {
        if (avoid < 0x20 || avoid > 0x7e) return printable();
        int offset = static_cast<int>(bounded(94)) + 1;
        int c = 0x20 + (avoid - 0x20 + offset) % 95;
        return static_cast<char>(c);
    }

private:
    std::mt19937_64 engine_;
};

inline std::string hex64(std::uint64_t value) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[value & 0xf];
        value >>= 4;
    }
    return out;
}

}  // namespace intentgate
