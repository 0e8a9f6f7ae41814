#pragma once

#include <chrono>
#include <cstdint>
#include <string>

namespace vulnlens::util {

/// Wall-clock source for record timestamps. Stub runs use FixedClock so
/// stored files are byte-identical across runs.
class Clock {
public:
    virtual ~Clock() = default;
    virtual std::chrono::system_clock::time_point now() const = 0;
};

class SystemClock final : public Clock {
public:
    std::chrono::system_clock::time_point now() const override { return std::chrono::system_clock::now(); }
};

class FixedClock final : public Clock {
public:
    explicit FixedClock(std::chrono::system_clock::time_point t = {}) : t_(t) {}
    std::chrono::system_clock::time_point now() const override { return t_; }

private:
    std::chrono::system_clock::time_point t_;
};

/// ISO-8601 UTC with second precision, e.g. "2024-01-31T12:00:00Z".
std::string iso_timestamp(std::chrono::system_clock::time_point t);

}  // namespace vulnlens::util
