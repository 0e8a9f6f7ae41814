#include "vulnlens/util/random.hpp"

#include <string>

#include "vulnlens/util/hash.hpp"

namespace vulnlens::util {

std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
    std::string key = std::to_string(base);
    key.push_back('/');
    key.append(label);
    return sha256_u64(key);
}

}  // namespace vulnlens::util
