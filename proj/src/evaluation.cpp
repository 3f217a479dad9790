#include "sar/evaluation.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <random>

#include "sar/errors.hpp"
#include "sar/rng.hpp"

namespace sar {

FeatureExtractor::FeatureExtractor(int side, int channels, int projections, std::uint64_t seed)
    : side_(side), channels_(channels), projections_(projections) {
    if (side < 1 || channels < 1 || projections < 0) throw ConfigError("feature extractor dimensions must be positive");
    const int pixels = side * side * channels;
    proj_.resize(projections, pixels);
    Rng rng = make_rng(seed, "features");
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(pixels)));
    for (int r = 0; r < projections; ++r)
        for (int c = 0; c < pixels; ++c) proj_(r, c) = normal(rng);
    id_ = "rp" + std::to_string(projections) + "-h" + std::to_string(side) + "c" + std::to_string(channels) + "-s" +
          std::to_string(seed);
}

Eigen::VectorXd FeatureExtractor::operator()(const Image& image) const {
    if (image.side != side_ || image.channels != channels_) throw UsageError("feature extractor: image shape mismatch");
    const Eigen::Map<const Eigen::VectorXd> x(image.pixels.data(), static_cast<Eigen::Index>(image.pixels.size()));
    Eigen::VectorXd out(dim());
    out.head(projections_) = proj_ * x;
    for (int ch = 0; ch < channels_; ++ch) {
        double s = 0.0;
        for (int p = 0; p < side_ * side_; ++p) s += image.pixels[static_cast<std::size_t>(p * channels_ + ch)];
        out(projections_ + ch) = s / (side_ * side_);
    }
    return out;
}

Eigen::MatrixXd FeatureExtractor::features(std::span<const Image> images) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(images.size()), dim());
    for (std::size_t i = 0; i < images.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = (*this)(images[i]).transpose();
    return out;
}

FeatureStats feature_stats(const Eigen::MatrixXd& features, const std::string& feature_id) {
    if (features.rows() < 2) throw UsageError("feature_stats needs at least two samples");
    FeatureStats s;
    s.count = static_cast<int>(features.rows());
    s.feature_id = feature_id;
    s.mean = features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
    s.cov = (centered.transpose() * centered) / static_cast<double>(s.count - 1);
    s.cov = 0.5 * (s.cov + s.cov.transpose());
    return s;
}

Eigen::MatrixXd sqrtm_psd(const Eigen::MatrixXd& m) {
    const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double trace_sqrt_product(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2) {
    const Eigen::MatrixXd r1 = sqrtm_psd(s1);
    const Eigen::MatrixXd inner = r1 * s2 * r1;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

double fd_proxy(const FeatureStats& real, const FeatureStats& gen) {
    if (real.feature_id != gen.feature_id) {
        throw UsageError("fd_proxy: feature ids differ ('" + real.feature_id + "' vs '" + gen.feature_id + "')");
    }
    if (real.mean.size() != gen.mean.size()) throw UsageError("fd_proxy: feature dimensions differ");
    const auto F = real.mean.size();
    if (real.count < F + 1 || gen.count < F + 1) throw UsageError("fd_proxy: need at least dim + 1 samples per set");
    const double mean_term = (real.mean - gen.mean).squaredNorm();
    const double tr = real.cov.trace() + gen.cov.trace() - 2.0 * trace_sqrt_product(real.cov, gen.cov);
    return mean_term + tr;
}

Eigen::VectorXd knn_radii(const Eigen::MatrixXd& points, int k) {
    const Eigen::Index n = points.rows();
    if (k < 1 || n < k + 1) throw UsageError("knn_radii: need at least k + 1 points");
    Eigen::VectorXd radii(n);
    std::vector<double> d(static_cast<std::size_t>(n - 1));
    for (Eigen::Index i = 0; i < n; ++i) {
        std::size_t j = 0;
        for (Eigen::Index o = 0; o < n; ++o) {
            if (o != i) d[j++] = (points.row(i) - points.row(o)).norm();
        }
        std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
        radii(i) = d[static_cast<std::size_t>(k - 1)];
    }
    return radii;
}

namespace {

double coverage(const Eigen::MatrixXd& manifold, const Eigen::VectorXd& radii, const Eigen::MatrixXd& queries) {
    if (queries.rows() == 0) return 0.0;
    Eigen::Index covered = 0;
    for (Eigen::Index q = 0; q < queries.rows(); ++q) {
        for (Eigen::Index m = 0; m < manifold.rows(); ++m) {
            if ((queries.row(q) - manifold.row(m)).norm() <= radii(m)) {
                ++covered;
                break;
            }
        }
    }
    return static_cast<double>(covered) / static_cast<double>(queries.rows());
}

}  // namespace

PrecisionRecall pr_proxy(const Eigen::MatrixXd& real, const Eigen::MatrixXd& gen, int k) {
    if (real.cols() != gen.cols()) throw UsageError("pr_proxy: feature dimensions differ");
    PrecisionRecall pr;
    pr.precision = coverage(real, knn_radii(real, k), gen);
    pr.recall = coverage(gen, knn_radii(gen, k), real);
    return pr;
}

std::vector<double> abs_diff_map(const FeatureMap& a, const FeatureMap& b) {
    if (a.side != b.side || a.channels != b.channels) throw UsageError("abs_diff_map: shape mismatch");
    std::vector<double> out(static_cast<std::size_t>(a.positions()), 0.0);
    for (int p = 0; p < a.positions(); ++p) {
        double s = 0.0;
        for (int c = 0; c < a.channels; ++c) s += std::abs(a.vec(p)[static_cast<std::size_t>(c)] - b.vec(p)[static_cast<std::size_t>(c)]);
        out[static_cast<std::size_t>(p)] = s / a.channels;
    }
    return out;
}

template <typename Scalar>
DiffMap diff_maps(const RolloutTrace<Scalar>& trace, const TrainingExample& example, int b,
                  const SamplerConfig& sampler, const Codebook* codebook, Rng& rng) {
    const int N = example.gt.scales();
    const bool discrete = codebook != nullptr;
    DiffMap out;
    for (int i = 0; i < N; ++i) {
        const FeatureMap& gt = example.gt.maps[static_cast<std::size_t>(i)];
        FeatureMap student;
        if (i == 0) {
            student = trace.bridge.latents.at(static_cast<std::size_t>(b)).at(0);
        } else {
            const RowMatrix<Scalar> rows = trace.sf_pred(b, i);
            FeatureMap pred(gt.side, static_cast<int>(rows.cols()));
            for (Eigen::Index r = 0; r < rows.rows(); ++r)
                for (Eigen::Index c = 0; c < rows.cols(); ++c)
                    pred.values[static_cast<std::size_t>(r * rows.cols() + c)] = static_cast<double>(rows(r, c));
            student = discrete ? dequantize(sample_map(pred, sampler, rng), *codebook) : std::move(pred);
        }
        out.sides.push_back(gt.side);
        out.maps.push_back(abs_diff_map(gt, student));
    }
    return out;
}

std::vector<NfeRow> nfe_report(std::span<const StepMetrics> records) {
    std::vector<NfeRow> rows;
    for (const StepMetrics& r : records) {
        auto it = std::find_if(rows.begin(), rows.end(), [&](const NfeRow& x) { return x.scheme == r.scheme; });
        if (it == rows.end()) {
            rows.push_back(NfeRow{r.scheme, 0, 0, r.nfe, r.nfe, 0.0});
            it = rows.end() - 1;
        }
        ++it->steps;
        it->total += r.nfe;
        it->min = std::min(it->min, r.nfe);
        it->max = std::max(it->max, r.nfe);
    }
    for (NfeRow& row : rows) row.mean = static_cast<double>(row.total) / row.steps;
    return rows;
}

Image decode_scale(const FeatureMap& latent, int top_side, const PatchEmbed& embed) {
    return embed.decode(upsample(latent, top_side));
}

namespace {

void check_context(const EvalContext& ctx) {
    if (ctx.reference == nullptr || ctx.reference->empty() || ctx.embed == nullptr || ctx.features == nullptr) {
        throw UsageError("evaluation context is incomplete");
    }
    if (ctx.samples < 2 || ctx.batch < 1) throw UsageError("evaluation needs at least two samples");
}

template <typename Scalar>
std::vector<Generated> generate_all(const ModelState<Scalar>& state, const EvalContext& ctx,
                                    const SamplerConfig& sampler, NfeCounter* nfe) {
    const auto& ref = *ctx.reference;
    std::vector<Generated> out;
    out.reserve(static_cast<std::size_t>(ctx.samples));
    for (int start = 0; start < ctx.samples; start += ctx.batch) {
        const int count = std::min(ctx.batch, ctx.samples - start);
        std::vector<int> labels;
        for (int j = 0; j < count; ++j) labels.push_back(ref[static_cast<std::size_t>(start + j) % ref.size()].label);
        GenerateOptions opts;
        opts.first_item = static_cast<std::uint64_t>(start);
        opts.nfe = nfe;
        opts.coarse_mask_steps = ctx.coarse_mask_steps;
        auto part = generate(state, std::span<const int>(labels), sampler, ctx.codebook, *ctx.embed, opts);
        for (auto& g : part) out.push_back(std::move(g));
    }
    return out;
}

FeatureStats scale_stats(const std::vector<FeatureMap>& latents, int top, const EvalContext& ctx) {
    std::vector<Image> images;
    images.reserve(latents.size());
    for (const FeatureMap& m : latents) images.push_back(decode_scale(m, top, *ctx.embed));
    return feature_stats(ctx.features->features(images), ctx.features->id());
}

std::vector<FeatureMap> reference_scale(const EvalContext& ctx, int scale) {
    std::vector<FeatureMap> maps;
    for (const TrainingExample& ex : *ctx.reference) maps.push_back(ex.gt.maps.at(static_cast<std::size_t>(scale)));
    return maps;
}

}  // namespace

template <typename Scalar>
EvalResult evaluate(const ModelState<Scalar>& state, const EvalContext& ctx, const SamplerConfig& sampler) {
    check_context(ctx);
    const ScaleSchedule& schedule = state.config.schedule;
    const int N = schedule.size();
    const int top = schedule.top();
    NfeCounter nfe;
    const std::vector<Generated> gen = generate_all(state, ctx, sampler, &nfe);

    EvalResult result;
    // Every batch runs the same rollout, so forwards per batch = forwards per image.
    const int batches = (ctx.samples + ctx.batch - 1) / ctx.batch;
    result.nfe_per_image = nfe.count() / batches;
    for (int i = 0; i < N; ++i) {
        std::vector<FeatureMap> g;
        for (const Generated& x : gen) g.push_back(x.latents.maps[static_cast<std::size_t>(i)]);
        const double fd = fd_proxy(scale_stats(reference_scale(ctx, i), top, ctx), scale_stats(g, top, ctx));
        result.per_scale_fd.push_back(fd);
    }
    result.fd = result.per_scale_fd.back();

    std::vector<Image> real_images, gen_images;
    for (const TrainingExample& ex : *ctx.reference) real_images.push_back(decode_scale(ex.gt.maps.back(), top, *ctx.embed));
    for (const Generated& x : gen) gen_images.push_back(x.image);
    const PrecisionRecall pr =
        pr_proxy(ctx.features->features(real_images), ctx.features->features(gen_images), ctx.pr_k);
    result.precision = pr.precision;
    result.recall = pr.recall;
    return result;
}

template <typename Scalar>
double per_scale_fd(const ModelState<Scalar>& state, const EvalContext& ctx, int scale, const SamplerConfig& sampler) {
    check_context(ctx);
    const ScaleSchedule& schedule = state.config.schedule;
    if (scale < 0 || scale >= schedule.size()) throw UsageError("per_scale_fd: scale out of range");
    const std::vector<Generated> gen = generate_all(state, ctx, sampler, nullptr);
    std::vector<FeatureMap> g;
    for (const Generated& x : gen) g.push_back(x.latents.maps[static_cast<std::size_t>(scale)]);
    return fd_proxy(scale_stats(reference_scale(ctx, scale), schedule.top(), ctx), scale_stats(g, schedule.top(), ctx));
}

template DiffMap diff_maps<float>(const RolloutTrace<float>&, const TrainingExample&, int, const SamplerConfig&,
                                  const Codebook*, Rng&);
template DiffMap diff_maps<double>(const RolloutTrace<double>&, const TrainingExample&, int, const SamplerConfig&,
                                   const Codebook*, Rng&);
template EvalResult evaluate<float>(const ModelState<float>&, const EvalContext&, const SamplerConfig&);
template EvalResult evaluate<double>(const ModelState<double>&, const EvalContext&, const SamplerConfig&);
template double per_scale_fd<float>(const ModelState<float>&, const EvalContext&, int, const SamplerConfig&);
template double per_scale_fd<double>(const ModelState<double>&, const EvalContext&, int, const SamplerConfig&);

}  // namespace sar
