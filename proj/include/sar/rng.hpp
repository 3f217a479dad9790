#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace sar {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Seed for a named sub-stream. All randomness in the project is derived
/// from one root seed through this function; nothing reads ambient entropy.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                                 std::uint64_t index = 0) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : stream) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return splitmix64(splitmix64(root ^ h) + splitmix64(index + 0x632BE59BD9B4E019ull));
}

inline Rng make_rng(std::uint64_t root, std::string_view stream, std::uint64_t index = 0) {
    return Rng(derive_seed(root, stream, index));
}

}  // namespace sar
