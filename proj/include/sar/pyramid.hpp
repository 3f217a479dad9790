#pragma once

// Multi-scale latent construction: patch encoder, area/bilinear resampling,
// codebook quantization.

#include <cstdint>
#include <span>
#include <vector>

namespace sar {

/// Per-scale token resolutions h_1 < h_2 < ... < h_N (tokens per side).
class ScaleSchedule {
public:
    ScaleSchedule() = default;
    /// Throws ConfigError unless sides are positive and strictly increasing.
    /// A single scale is accepted (used by N = 1 generation and layout tests).
    explicit ScaleSchedule(std::vector<int> sides);

    [[nodiscard]] int size() const noexcept { return static_cast<int>(sides_.size()); }
    [[nodiscard]] int side(int scale) const { return sides_.at(static_cast<std::size_t>(scale)); }
    [[nodiscard]] int top() const { return sides_.back(); }
    [[nodiscard]] const std::vector<int>& sides() const noexcept { return sides_; }
    /// Sum of h_i^2 over the first `scales` scales (all scales by default).
    [[nodiscard]] int token_count(int scales = -1) const;
    /// Token offset of the first position of `scale` (start token excluded).
    [[nodiscard]] int offset(int scale) const;

    friend bool operator==(const ScaleSchedule&, const ScaleSchedule&) = default;

private:
    std::vector<int> sides_;
};

/// Square H x H x C pixel grid, row-major with channels innermost.
struct Image {
    int side = 0;
    int channels = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(int side_, int channels_) : side(side_), channels(channels_),
        pixels(static_cast<std::size_t>(side_) * side_ * channels_, 0.0) {}

    double& at(int r, int c, int ch) { return pixels[index(r, c, ch)]; }
    [[nodiscard]] double at(int r, int c, int ch) const { return pixels[index(r, c, ch)]; }
    [[nodiscard]] std::size_t index(int r, int c, int ch) const {
        return (static_cast<std::size_t>(r) * side + c) * channels + ch;
    }
    friend bool operator==(const Image&, const Image&) = default;
};

/// h x h x D continuous feature map, row-major with channels innermost.
struct FeatureMap {
    int side = 0;
    int channels = 0;
    std::vector<double> values;

    FeatureMap() = default;
    FeatureMap(int side_, int channels_) : side(side_), channels(channels_),
        values(static_cast<std::size_t>(side_) * side_ * channels_, 0.0) {}

    [[nodiscard]] int positions() const noexcept { return side * side; }
    double& at(int r, int c, int ch) { return values[index(r, c, ch)]; }
    [[nodiscard]] double at(int r, int c, int ch) const { return values[index(r, c, ch)]; }
    [[nodiscard]] std::size_t index(int r, int c, int ch) const {
        return (static_cast<std::size_t>(r) * side + c) * channels + ch;
    }
    [[nodiscard]] std::span<const double> vec(int position) const {
        return {values.data() + static_cast<std::size_t>(position) * channels,
                static_cast<std::size_t>(channels)};
    }
    std::span<double> vec(int position) {
        return {values.data() + static_cast<std::size_t>(position) * channels,
                static_cast<std::size_t>(channels)};
    }
    friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

struct LatentPyramid {
    std::vector<FeatureMap> maps;
    [[nodiscard]] int scales() const noexcept { return static_cast<int>(maps.size()); }
};

struct TokenMap {
    int side = 0;
    std::vector<int> indices;
    friend bool operator==(const TokenMap&, const TokenMap&) = default;
};

struct TokenPyramid {
    std::vector<TokenMap> maps;
    int vocab = 0;
    [[nodiscard]] int scales() const noexcept { return static_cast<int>(maps.size()); }
    friend bool operator==(const TokenPyramid&, const TokenPyramid&) = default;
};

/// Frozen V x D embedding table. Rows must be finite and pairwise distinct.
class Codebook {
public:
    Codebook() = default;
    Codebook(int size, int dim, std::vector<double> entries);

    [[nodiscard]] int size() const noexcept { return size_; }
    [[nodiscard]] int dim() const noexcept { return dim_; }
    [[nodiscard]] std::span<const double> row(int k) const;
    [[nodiscard]] const std::vector<double>& entries() const noexcept { return entries_; }
    /// Lowest index among the rows at minimal squared Euclidean distance.
    [[nodiscard]] int nearest(std::span<const double> v) const;

private:
    int size_ = 0;
    int dim_ = 0;
    std::vector<double> entries_;
};

/// Fixed linear patch embedding standing in for a VAE encoder. Maps each
/// non-overlapping p x p x C pixel patch to a D-dim latent vector.
class PatchEmbed {
public:
    PatchEmbed() = default;
    /// Seeded Gaussian weights (std 1/sqrt(p*p*C)), zero bias.
    PatchEmbed(int patch, int channels, int dim, std::uint64_t seed);
    PatchEmbed(int patch, int channels, int dim, std::vector<double> weights);

    [[nodiscard]] int patch() const noexcept { return patch_; }
    [[nodiscard]] int channels() const noexcept { return channels_; }
    [[nodiscard]] int dim() const noexcept { return dim_; }
    [[nodiscard]] int patch_size() const noexcept { return patch_ * patch_ * channels_; }
    /// D x (p*p*C) row-major; input patch flattened as (r, c, ch).
    [[nodiscard]] const std::vector<double>& weights() const noexcept { return weights_; }

    /// Throws ConfigError unless the image side is a multiple of the patch side.
    [[nodiscard]] FeatureMap encode(const Image& image) const;
    /// Minimum-norm linear inverse (pseudo-inverse) of encode.
    [[nodiscard]] Image decode(const FeatureMap& latent) const;

private:
    int patch_ = 0;
    int channels_ = 0;
    int dim_ = 0;
    std::vector<double> weights_;
    std::vector<double> pinv_;  // (p*p*C) x D
};

enum class Pathway { latent_supervision, image_supervision };

/// Adaptive average pooling: output cell i covers input cells
/// [floor(i*in/out), ceil((i+1)*in/out)). Plain block mean when out divides in.
[[nodiscard]] FeatureMap area_downsample(const FeatureMap& map, int side);
[[nodiscard]] Image area_downsample(const Image& image, int side);

/// Bilinear interpolation with half-pixel centers (source coordinate
/// (x + 0.5) * in / out - 0.5, clamped to the valid range). Exact copy when
/// sides match; throws UsageError when side < map.side.
[[nodiscard]] FeatureMap upsample(const FeatureMap& map, int side);

[[nodiscard]] LatentPyramid build_pyramid(const FeatureMap& latent, const ScaleSchedule& schedule,
                                          Pathway pathway, const Image* image,
                                          const PatchEmbed& embed);

[[nodiscard]] TokenMap quantize(const FeatureMap& map, const Codebook& codebook);
[[nodiscard]] TokenPyramid quantize(const LatentPyramid& pyramid, const Codebook& codebook);
[[nodiscard]] FeatureMap dequantize(const TokenMap& tokens, const Codebook& codebook);
[[nodiscard]] LatentPyramid dequantize(const TokenPyramid& tokens, const Codebook& codebook);

/// Seeded k-means++ followed by at most 50 Lloyd iterations. Samples are
/// rows of a (count x dim) row-major matrix. Throws ConfigError with fewer
/// than `size` distinct samples.
[[nodiscard]] Codebook fit_codebook(std::span<const double> samples, int dim, int size,
                                    std::uint64_t seed);

inline constexpr int kCodebookIterations = 50;

}  // namespace sar
