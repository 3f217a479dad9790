#pragma once

// Desk-scale evaluation: Frechet distance and k-NN precision/recall on a
// fixed random-projection feature space, per-scale fidelity, student-forcing
// difference maps and forward-count accounting.

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sar/generator.hpp"
#include "sar/pyramid.hpp"
#include "sar/sampling.hpp"
#include "sar/training.hpp"

namespace sar {

/// Features of an image: F seeded Gaussian projections of the flattened
/// pixels (scaled by 1/sqrt(pixels)) followed by the C channel means.
class FeatureExtractor {
public:
    FeatureExtractor() = default;
    FeatureExtractor(int side, int channels, int projections, std::uint64_t seed);

    [[nodiscard]] int dim() const noexcept { return projections_ + channels_; }
    /// Identifies the feature definition; stats with different ids are incomparable.
    [[nodiscard]] const std::string& id() const noexcept { return id_; }
    [[nodiscard]] Eigen::VectorXd operator()(const Image& image) const;
    /// One row per image.
    [[nodiscard]] Eigen::MatrixXd features(std::span<const Image> images) const;

private:
    int side_ = 0;
    int channels_ = 0;
    int projections_ = 0;
    Eigen::MatrixXd proj_;
    std::string id_;
};

inline constexpr int kFeatureProjections = 32;

struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;  ///< unbiased (count - 1 denominator)
    int count = 0;
    std::string feature_id;
};

/// Mean and unbiased covariance of the rows of `features`.
[[nodiscard]] FeatureStats feature_stats(const Eigen::MatrixXd& features, const std::string& feature_id);

/// Square root of a symmetric PSD matrix by eigendecomposition, negative
/// eigenvalues clamped to zero.
[[nodiscard]] Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m);

/// Tr((S1 S2)^{1/2}), computed as Tr((sqrt(S1) S2 sqrt(S1))^{1/2}).
[[nodiscard]] double trace_sqrt_product(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2);

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}). Throws UsageError on
/// mismatched feature ids or dimensions, or fewer than dim + 1 samples.
[[nodiscard]] double fd_proxy(const FeatureStats& real, const FeatureStats& gen);

struct PrecisionRecall {
    double precision = 0.0;
    double recall = 0.0;
};

/// k-NN manifold estimator. A point is covered by a set when it lies within
/// (distance <= radius) the k-th nearest-neighbour radius of some member.
/// Rows are points.
[[nodiscard]] PrecisionRecall pr_proxy(const Eigen::MatrixXd& real, const Eigen::MatrixXd& gen, int k = 3);

/// Distance from each row to its k-th nearest other row.
[[nodiscard]] Eigen::VectorXd knn_radii(const Eigen::MatrixXd& points, int k);

/// Per-scale nonnegative h_i x h_i maps.
struct DiffMap {
    std::vector<int> sides;
    std::vector<std::vector<double>> maps;
};

/// Channel-mean absolute difference of two equally shaped maps.
[[nodiscard]] std::vector<double> abs_diff_map(const FeatureMap& a, const FeatureMap& b);

/// Delta_i = |f_i - dequantize(sample(f_S_i))| for sequence b of a trace.
/// Scales >= 2 sample the student-forced predictions; scale 1 has none and
/// uses the teacher sample of the bridge. Continuous mode skips sampling.
template <typename Scalar>
[[nodiscard]] DiffMap diff_maps(const RolloutTrace<Scalar>& trace, const TrainingExample& example, int b,
                                const SamplerConfig& sampler, const Codebook* codebook, Rng& rng);

struct NfeRow {
    std::string scheme;
    int steps = 0;
    long total = 0;
    int min = 0;
    int max = 0;
    double mean = 0.0;
};

/// Forward counts per step aggregated by scheme, in first-seen order.
[[nodiscard]] std::vector<NfeRow> nfe_report(std::span<const StepMetrics> records);

/// Images and labels of a reference set plus the pieces needed to
/// generate comparable samples.
struct EvalContext {
    const std::vector<TrainingExample>* reference = nullptr;
    const Codebook* codebook = nullptr;  ///< null in continuous mode
    const PatchEmbed* embed = nullptr;
    const FeatureExtractor* features = nullptr;
    int samples = 256;  ///< generated count; labels follow the reference set cyclically
    int pr_k = 3;
    int batch = 32;
    int coarse_mask_steps = 0;  ///< forwarded to generate()
};

struct EvalResult {
    double fd = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    std::vector<double> per_scale_fd;
    int nfe_per_image = 0;
};

/// Decodes the latent of one scale upsampled to the top side.
[[nodiscard]] Image decode_scale(const FeatureMap& latent, int top_side, const PatchEmbed& embed);

/// Full evaluation: FD and precision/recall of decoded samples against the
/// decoded reference top-scale latents, plus per_scale_fd for every scale.
template <typename Scalar>
[[nodiscard]] EvalResult evaluate(const ModelState<Scalar>& state, const EvalContext& ctx,
                                  const SamplerConfig& sampler);

/// FD between generated and reference scale-i (0-based) latents, each
/// upsampled to the top side and decoded.
template <typename Scalar>
[[nodiscard]] double per_scale_fd(const ModelState<Scalar>& state, const EvalContext& ctx, int scale,
                                  const SamplerConfig& sampler);

}  // namespace sar
