#include "vti/rng.hpp"

#include <cmath>
#include <sstream>

#include "vti/errors.hpp"

namespace vti {

std::string Rng::serialize() const {
    std::ostringstream os;
    os << eng_ << ' ' << (has_cache_ ? 1 : 0) << ' ' << std::hexfloat << cache_;
    return os.str();
}

void Rng::deserialize(const std::string& s) {
    std::istringstream is(s);
    int flag = 0;
    double cache = 0.0;
    is >> eng_ >> flag >> std::hexfloat >> cache;
    if (is.fail()) {
        throw ParseError("rng state: malformed serialization");
    }
    has_cache_ = flag != 0;
    cache_ = cache;
}

std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace vti
