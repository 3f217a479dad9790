#pragma once

// Versioned checkpoint container: a text header of key=value lines, a
// tensor index, then raw little-endian float32 data. See README for the
// byte layout.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sar/generator.hpp"
#include "sar/pyramid.hpp"
#include "sar/training.hpp"

namespace sar::workbench {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "SARCKPT";

struct Checkpoint {
    ModelState<float> state;
    AdamState<float> adam;
    std::optional<Codebook> codebook;  ///< absent in continuous mode
    PatchEmbed embed;
    std::int64_t step = 0;
    /// Every random stream is derived from (rng_seed, name, step), so this
    /// pair is the complete RNG state.
    std::uint64_t rng_seed = 0;
    /// Resolved experiment configuration (config file text).
    std::string config_text;
};

/// Tensor values are stored as float32; codebook and patch weights must
/// already be float-representable for an exact round trip.
[[nodiscard]] std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws IntegrityError on bad magic, unknown version, truncation, length
/// or checksum mismatch, or inconsistent tensor shapes.
[[nodiscard]] Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
[[nodiscard]] Checkpoint load_checkpoint(const std::string& path);

/// Rounds every entry to the nearest float32 value.
[[nodiscard]] std::vector<double> round_to_float(std::vector<double> values);

}  // namespace sar::workbench
