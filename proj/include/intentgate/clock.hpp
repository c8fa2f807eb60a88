#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <thread>

namespace intentgate {

/// Time source used by rate limiting and retry backoff. Swappable for a
/// virtual clock in tests.
class Clock {
public:
    virtual ~Clock() = default;
    virtual std::uint64_t now_ms() const = 0;
    virtual void sleep_ms(std::uint64_t ms) = 0;
};

class SystemClock : public Clock {
public:
    std::uint64_t now_ms() const override {
        auto d = std::chrono::steady_clock::now().time_since_epoch();
        return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(d).count());
    }
    void sleep_ms(std::uint64_t ms) override {
        std::this_thread::sleep_for(std::chrono::milliseconds(ms));
    }

    static SystemClock& instance() {
        static SystemClock clock;
        return clock;
    }
};

/// Manually advanced clock; sleeping advances time instead of blocking.
class VirtualClock : public Clock {
public:
    explicit VirtualClock(std::uint64_t start_ms = 0) : now_(start_ms) {}
    std::uint64_t now_ms() const override { return now_.load(); }
    void sleep_ms(std::uint64_t ms) override { now_ += ms; }
    void advance_ms(std::uint64_t ms) { now_ += ms; }

private:
    std::atomic<std::uint64_t> now_;
};

}  // namespace intentgate
