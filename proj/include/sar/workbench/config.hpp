#pragma once

// Flat key=value experiment configuration with dotted section names.
//
//   # comment
//   seed = 7
//   dataset.family = blobs
//   pyramid.schedule = 1,2,3,4
//   train.scheme = sar
//
// Unknown or repeated keys are errors. Keys left out keep their defaults.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sar/generator.hpp"
#include "sar/pyramid.hpp"
#include "sar/sampling.hpp"
#include "sar/training.hpp"
#include "sar/workbench/dataset.hpp"

namespace sar::workbench {

struct EvalSettings {
    int every = 0;      ///< evaluate every this many steps; 0 = only at the end
    int samples = 256;  ///< generated images per evaluation
    int reference = 512;  ///< size of the held-out reference set
    int pr_k = 3;
    int projections = 32;
};

struct CoarseMaskSettings {
    bool enabled = false;
    MaskRatioSchedule ratio;
    int decode_steps = 4;  ///< masked decoding steps of scale 1 at sampling time
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    SyntheticDatasetSpec dataset;
    std::vector<int> schedule{1, 2, 3, 4};
    Pathway pathway = Pathway::latent_supervision;
    int latent_dim = 8;
    int vocab = 64;  ///< 0 selects continuous mode
    int depth = 4;
    int width = 64;
    int heads = 4;
    int mlp_ratio = 4;
    double label_drop = 0.1;
    TrainConfig train;
    CoarseMaskSettings coarse_mask;
    SamplerConfig sampler;  ///< evaluation / generation sampler
    EvalSettings eval;
    std::string out = "out";

    ExperimentConfig();

    /// Throws ConfigError on any violated constraint.
    void validate() const;
    [[nodiscard]] GeneratorConfig generator() const;
    /// Patch side of the fixed encoder: dataset side / top scale side.
    [[nodiscard]] int patch() const;
};

/// The desk-scale default: 16x16x1 blobs, schedule 1,2,3,4, V=64, D=8,
/// depth 4, width 64, four classes, 2000 steps.
[[nodiscard]] ExperimentConfig default_experiment();

/// A small configuration that trains in seconds (used by smoke tests).
[[nodiscard]] ExperimentConfig tiny_experiment();

/// Raw key/value pairs; throws ConfigError on malformed lines or repeats.
[[nodiscard]] std::map<std::string, std::string> parse_key_values(const std::string& text);

/// Applies `text` on top of `base`.
[[nodiscard]] ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = ExperimentConfig());
[[nodiscard]] ExperimentConfig load_config(const std::string& path, ExperimentConfig base = ExperimentConfig());

/// Every key, fixed order; parse_config(to_text(c)) reproduces c.
[[nodiscard]] std::string to_text(const ExperimentConfig& config);

/// Shortest text that parses back to exactly `v`.
[[nodiscard]] std::string format_double(double v);

}  // namespace sar::workbench
