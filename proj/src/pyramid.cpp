#include "sar/pyramid.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "sar/errors.hpp"
#include "sar/rng.hpp"

namespace sar {

ScaleSchedule::ScaleSchedule(std::vector<int> sides) : sides_(std::move(sides)) {
    if (sides_.empty()) throw ConfigError("scale schedule is empty");
    if (sides_.front() < 1) throw ConfigError("scale schedule sides must be >= 1");
    for (std::size_t i = 1; i < sides_.size(); ++i) {
        if (sides_[i] <= sides_[i - 1]) {
            throw ConfigError("scale schedule must be strictly increasing");
        }
    }
}

int ScaleSchedule::token_count(int scales) const {
    if (scales < 0) scales = size();
    int total = 0;
    for (int i = 0; i < scales; ++i) total += sides_[static_cast<std::size_t>(i)] * sides_[static_cast<std::size_t>(i)];
    return total;
}

int ScaleSchedule::offset(int scale) const { return token_count(scale); }

// ---------------------------------------------------------------------------

Codebook::Codebook(int size, int dim, std::vector<double> entries)
    : size_(size), dim_(dim), entries_(std::move(entries)) {
    if (size < 1 || dim < 1) throw ConfigError("codebook size and dim must be positive");
    if (entries_.size() != static_cast<std::size_t>(size) * dim) {
        throw ConfigError("codebook entry count does not match size x dim");
    }
    for (double v : entries_) {
        if (!std::isfinite(v)) throw ConfigError("codebook has non-finite entries");
    }
    for (int a = 0; a < size; ++a) {
        for (int b = a + 1; b < size; ++b) {
            double d = 0.0;
            for (int j = 0; j < dim; ++j) d = std::max(d, std::abs(row(a)[j] - row(b)[j]));
            if (d <= 1e-8) {
                throw ConfigError("codebook rows " + std::to_string(a) + " and " +
                                  std::to_string(b) + " are duplicates");
            }
        }
    }
}

std::span<const double> Codebook::row(int k) const {
    return {entries_.data() + static_cast<std::size_t>(k) * dim_, static_cast<std::size_t>(dim_)};
}

int Codebook::nearest(std::span<const double> v) const {
    if (static_cast<int>(v.size()) != dim_) throw ConfigError("vector dim does not match codebook");
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < size_; ++k) {
        const double* e = entries_.data() + static_cast<std::size_t>(k) * dim_;
        double d = 0.0;
        for (int j = 0; j < dim_; ++j) {
            const double t = v[static_cast<std::size_t>(j)] - e[j];
            d += t * t;
        }
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> pseudo_inverse(const std::vector<double>& w, int rows, int cols) {
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> W(w.data(), rows, cols);
    Mat P = Mat(W).completeOrthogonalDecomposition().pseudoInverse();
    return {P.data(), P.data() + P.size()};
}

}  // namespace

PatchEmbed::PatchEmbed(int patch, int channels, int dim, std::uint64_t seed)
    : patch_(patch), channels_(channels), dim_(dim) {
    if (patch < 1 || channels < 1 || dim < 1) throw ConfigError("patch embed dimensions must be positive");
    Rng rng = make_rng(seed, "patch_embed");
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(patch_size())));
    weights_.resize(static_cast<std::size_t>(dim) * patch_size());
    for (double& w : weights_) w = normal(rng);
    pinv_ = pseudo_inverse(weights_, dim_, patch_size());
}

PatchEmbed::PatchEmbed(int patch, int channels, int dim, std::vector<double> weights)
    : patch_(patch), channels_(channels), dim_(dim), weights_(std::move(weights)) {
    if (patch < 1 || channels < 1 || dim < 1) throw ConfigError("patch embed dimensions must be positive");
    if (weights_.size() != static_cast<std::size_t>(dim) * patch_size()) {
        throw ConfigError("patch embed weight count does not match D x p*p*C");
    }
    pinv_ = pseudo_inverse(weights_, dim_, patch_size());
}

FeatureMap PatchEmbed::encode(const Image& image) const {
    if (image.channels != channels_) throw ConfigError("image channel count does not match patch embed");
    if (image.side % patch_ != 0) throw ConfigError("image side is not a multiple of the patch side");
    const int h = image.side / patch_;
    FeatureMap out(h, dim_);
    std::vector<double> patch(static_cast<std::size_t>(patch_size()));
    for (int pr = 0; pr < h; ++pr) {
        for (int pc = 0; pc < h; ++pc) {
            std::size_t n = 0;
            for (int r = 0; r < patch_; ++r)
                for (int c = 0; c < patch_; ++c)
                    for (int ch = 0; ch < channels_; ++ch)
                        patch[n++] = image.at(pr * patch_ + r, pc * patch_ + c, ch);
            for (int d = 0; d < dim_; ++d) {
                const double* w = weights_.data() + static_cast<std::size_t>(d) * patch_size();
                double acc = 0.0;
                for (int j = 0; j < patch_size(); ++j) acc += w[j] * patch[static_cast<std::size_t>(j)];
                out.at(pr, pc, d) = acc;
            }
        }
    }
    return out;
}

Image PatchEmbed::decode(const FeatureMap& latent) const {
    if (latent.channels != dim_) throw ConfigError("latent dim does not match patch embed");
    Image out(latent.side * patch_, channels_);
    for (int pr = 0; pr < latent.side; ++pr) {
        for (int pc = 0; pc < latent.side; ++pc) {
            std::size_t n = 0;
            for (int r = 0; r < patch_; ++r)
                for (int c = 0; c < patch_; ++c)
                    for (int ch = 0; ch < channels_; ++ch) {
                        const double* p = pinv_.data() + n * static_cast<std::size_t>(dim_);
                        double acc = 0.0;
                        for (int d = 0; d < dim_; ++d) acc += p[d] * latent.at(pr, pc, d);
                        out.at(pr * patch_ + r, pc * patch_ + c, ch) = acc;
                        ++n;
                    }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

// Shared kernel for FeatureMap and Image (same memory layout).
void pool(const std::vector<double>& in, int in_side, int channels, std::vector<double>& out,
          int out_side) {
    out.assign(static_cast<std::size_t>(out_side) * out_side * channels, 0.0);
    auto lo = [&](int i) { return (i * in_side) / out_side; };
    auto hi = [&](int i) { return ((i + 1) * in_side + out_side - 1) / out_side; };
    for (int r = 0; r < out_side; ++r) {
        for (int c = 0; c < out_side; ++c) {
            const int r0 = lo(r), r1 = hi(r), c0 = lo(c), c1 = hi(c);
            const double inv = 1.0 / static_cast<double>((r1 - r0) * (c1 - c0));
            for (int ch = 0; ch < channels; ++ch) {
                double acc = 0.0;
                for (int y = r0; y < r1; ++y)
                    for (int x = c0; x < c1; ++x)
                        acc += in[(static_cast<std::size_t>(y) * in_side + x) * channels + ch];
                out[(static_cast<std::size_t>(r) * out_side + c) * channels + ch] = acc * inv;
            }
        }
    }
}

}  // namespace

FeatureMap area_downsample(const FeatureMap& map, int side) {
    if (side < 1 || side > map.side) throw UsageError("area_downsample target must be in [1, side]");
    if (side == map.side) return map;
    FeatureMap out;
    out.side = side;
    out.channels = map.channels;
    pool(map.values, map.side, map.channels, out.values, side);
    return out;
}

Image area_downsample(const Image& image, int side) {
    if (side < 1 || side > image.side) throw UsageError("area_downsample target must be in [1, side]");
    if (side == image.side) return image;
    Image out;
    out.side = side;
    out.channels = image.channels;
    pool(image.pixels, image.side, image.channels, out.pixels, side);
    return out;
}

FeatureMap upsample(const FeatureMap& map, int side) {
    if (side < map.side) throw UsageError("upsample target is smaller than the source; use area_downsample");
    if (side == map.side) return map;
    FeatureMap out(side, map.channels);
    const double scale = static_cast<double>(map.side) / side;
    struct Tap { int i0, i1; double w1; };
    std::vector<Tap> taps(static_cast<std::size_t>(side));
    for (int x = 0; x < side; ++x) {
        double src = (x + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(map.side - 1));
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, map.side - 1);
        taps[static_cast<std::size_t>(x)] = {i0, i1, src - i0};
    }
    for (int r = 0; r < side; ++r) {
        const Tap& ty = taps[static_cast<std::size_t>(r)];
        for (int c = 0; c < side; ++c) {
            const Tap& tx = taps[static_cast<std::size_t>(c)];
            for (int ch = 0; ch < map.channels; ++ch) {
                const double top = (1.0 - tx.w1) * map.at(ty.i0, tx.i0, ch) + tx.w1 * map.at(ty.i0, tx.i1, ch);
                const double bot = (1.0 - tx.w1) * map.at(ty.i1, tx.i0, ch) + tx.w1 * map.at(ty.i1, tx.i1, ch);
                out.at(r, c, ch) = (1.0 - ty.w1) * top + ty.w1 * bot;
            }
        }
    }
    return out;
}

LatentPyramid build_pyramid(const FeatureMap& latent, const ScaleSchedule& schedule, Pathway pathway,
                            const Image* image, const PatchEmbed& embed) {
    if (latent.side != schedule.top()) throw UsageError("latent resolution does not match the top scale");
    LatentPyramid out;
    out.maps.reserve(static_cast<std::size_t>(schedule.size()));
    if (pathway == Pathway::latent_supervision) {
        for (int side : schedule.sides()) out.maps.push_back(area_downsample(latent, side));
        return out;
    }
    if (image == nullptr) throw UsageError("image-supervision pathway requires the source image");
    for (int i = 0; i < schedule.size(); ++i) {
        const int side = schedule.side(i);
        if (side == schedule.top()) {
            out.maps.push_back(latent);
        } else {
            out.maps.push_back(embed.encode(area_downsample(*image, side * embed.patch())));
        }
    }
    return out;
}

TokenMap quantize(const FeatureMap& map, const Codebook& codebook) {
    if (map.channels != codebook.dim()) throw ConfigError("pyramid channel dim does not match codebook");
    TokenMap out{map.side, std::vector<int>(static_cast<std::size_t>(map.positions()))};
    for (int p = 0; p < map.positions(); ++p) out.indices[static_cast<std::size_t>(p)] = codebook.nearest(map.vec(p));
    return out;
}

TokenPyramid quantize(const LatentPyramid& pyramid, const Codebook& codebook) {
    TokenPyramid out;
    out.vocab = codebook.size();
    for (const auto& m : pyramid.maps) out.maps.push_back(quantize(m, codebook));
    return out;
}

FeatureMap dequantize(const TokenMap& tokens, const Codebook& codebook) {
    FeatureMap out(tokens.side, codebook.dim());
    for (int p = 0; p < tokens.side * tokens.side; ++p) {
        const int k = tokens.indices[static_cast<std::size_t>(p)];
        if (k < 0 || k >= codebook.size()) throw InvariantError("token index out of codebook range");
        auto row = codebook.row(k);
        std::copy(row.begin(), row.end(), out.vec(p).begin());
    }
    return out;
}

LatentPyramid dequantize(const TokenPyramid& tokens, const Codebook& codebook) {
    LatentPyramid out;
    for (const auto& m : tokens.maps) out.maps.push_back(dequantize(m, codebook));
    return out;
}

// ---------------------------------------------------------------------------

Codebook fit_codebook(std::span<const double> samples, int dim, int size, std::uint64_t seed) {
    if (dim < 1 || size < 1) throw ConfigError("codebook size and dim must be positive");
    if (samples.size() % static_cast<std::size_t>(dim) != 0) throw ConfigError("sample buffer is not a multiple of dim");
    const std::size_t n = samples.size() / static_cast<std::size_t>(dim);
    auto sample = [&](std::size_t i) { return samples.subspan(i * dim, static_cast<std::size_t>(dim)); };
    auto dist2 = [&](std::span<const double> a, const double* b) {
        double d = 0.0;
        for (int j = 0; j < dim; ++j) {
            const double t = a[static_cast<std::size_t>(j)] - b[j];
            d += t * t;
        }
        return d;
    };

    {
        std::set<std::vector<double>> distinct;
        for (std::size_t i = 0; i < n && distinct.size() < static_cast<std::size_t>(size); ++i) {
            auto s = sample(i);
            distinct.emplace(s.begin(), s.end());
        }
        if (distinct.size() < static_cast<std::size_t>(size)) {
            throw ConfigError("fit_codebook needs at least " + std::to_string(size) + " distinct samples");
        }
    }

    // k-means++ seeding.
    Rng rng = make_rng(seed, "codebook");
    std::vector<double> centroids(static_cast<std::size_t>(size) * dim);
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    {
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        const std::size_t first = pick(rng);
        std::copy_n(sample(first).begin(), dim, centroids.begin());
    }
    for (int k = 1; k < size; ++k) {
        const double* prev = centroids.data() + static_cast<std::size_t>(k - 1) * dim;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            best[i] = std::min(best[i], dist2(sample(i), prev));
            total += best[i];
        }
        std::uniform_real_distribution<double> u(0.0, total);
        double target = u(rng);
        std::size_t chosen = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (best[i] <= 0.0) continue;
            chosen = i;
            target -= best[i];
            if (target <= 0.0) break;
        }
        std::copy_n(sample(chosen).begin(), dim, centroids.begin() + static_cast<std::ptrdiff_t>(k) * dim);
    }

    std::vector<int> assign(n, -1);
    std::vector<double> sums(centroids.size());
    std::vector<std::size_t> counts(static_cast<std::size_t>(size));
    for (int iter = 0; iter < kCodebookIterations; ++iter) {
        bool changed = false;
        std::vector<double> own(n);
        for (std::size_t i = 0; i < n; ++i) {
            int arg = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int k = 0; k < size; ++k) {
                const double d = dist2(sample(i), centroids.data() + static_cast<std::size_t>(k) * dim);
                if (d < bd) {
                    bd = d;
                    arg = k;
                }
            }
            own[i] = bd;
            if (assign[i] != arg) changed = true;
            assign[i] = arg;
        }
        if (!changed && iter > 0) break;
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto k = static_cast<std::size_t>(assign[i]);
            ++counts[k];
            auto s = sample(i);
            for (int j = 0; j < dim; ++j) sums[k * dim + j] += s[static_cast<std::size_t>(j)];
        }
        for (int k = 0; k < size; ++k) {
            const auto ku = static_cast<std::size_t>(k);
            if (counts[ku] == 0) {
                // Re-seed an empty cluster from the sample farthest from its centroid.
                const auto far = static_cast<std::size_t>(std::max_element(own.begin(), own.end()) - own.begin());
                std::copy_n(sample(far).begin(), dim, centroids.begin() + static_cast<std::ptrdiff_t>(ku * dim));
                own[far] = 0.0;
                continue;
            }
            for (int j = 0; j < dim; ++j) centroids[ku * dim + j] = sums[ku * dim + j] / static_cast<double>(counts[ku]);
        }
    }
    return Codebook(size, dim, std::move(centroids));
}

}  // namespace sar
