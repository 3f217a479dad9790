#pragma once

// Seeded class-conditional synthetic images with closed-form per-class means.

#include <cstdint>
#include <string>
#include <vector>

#include "sar/pyramid.hpp"

namespace sar::workbench {

enum class Family { blobs, stripes, rings };

[[nodiscard]] std::string to_string(Family family);
[[nodiscard]] Family parse_family(const std::string& text);

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    friend bool operator==(const Range&, const Range&) = default;
};

/// Per-class generator parameters; meaning depends on the family.
///   blobs:   u = centre column, v = centre row (pixels), width = Gaussian sigma
///   rings:   u = radius (pixels) about the image centre, v unused, width = ring sigma
///   stripes: u = phase (radians), v unused, width = period (pixels); the
///            stripe direction is class * pi / classes
/// Channel ch of class c is scaled by gain[ch] (all ones when empty).
struct ClassParams {
    Range u;
    Range v;
    double width = 1.0;
    std::vector<double> gain;
    friend bool operator==(const ClassParams&, const ClassParams&) = default;
};

struct SyntheticDatasetSpec {
    int classes = 4;
    int side = 16;
    int channels = 1;
    Family family = Family::blobs;
    int size = 1024;
    std::uint64_t seed = 0;
    /// Empty selects default_class_params(family, classes, side).
    std::vector<ClassParams> params;

    void validate() const;
    [[nodiscard]] ClassParams class_params(int label) const;
};

/// Evenly spread class parameters with a jitter range for each class.
[[nodiscard]] std::vector<ClassParams> default_class_params(Family family, int classes, int side);

struct Dataset {
    std::vector<Image> images;
    std::vector<int> labels;
};

/// Item i has label i % classes and draws its parameters from stream
/// (seed, "dataset", i).
[[nodiscard]] Dataset make_dataset(const SyntheticDatasetSpec& spec);

/// Single image for fixed parameter values (u, v).
[[nodiscard]] Image render(const SyntheticDatasetSpec& spec, int label, double u, double v);

/// Expected image of a class under uniform (u, v) draws.
[[nodiscard]] Image analytic_class_mean(const SyntheticDatasetSpec& spec, int label);

}  // namespace sar::workbench
