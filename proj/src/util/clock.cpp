#include "vulnlens/util/clock.hpp"

#include <ctime>
#include <iomanip>
#include <sstream>

namespace vulnlens::util {

std::string iso_timestamp(std::chrono::system_clock::time_point t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    std::ostringstream oss;
    oss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return oss.str();
}

}  // namespace vulnlens::util
