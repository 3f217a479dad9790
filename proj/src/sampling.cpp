#include "sar/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "sar/errors.hpp"

namespace sar {

void SamplerConfig::validate() const {
    if (top_k < 0) throw ConfigError("top_k must be positive or 0 (all)");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (cfg_scale && !(*cfg_scale >= 0.0)) throw ConfigError("cfg_scale must be >= 0");
}

int argmax_index(std::span<const double> logits) {
    if (logits.empty()) throw UsageError("argmax of an empty vector");
    int best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

std::vector<double> filter_top_k_top_p(std::span<const double> logits, int k, double p) {
    const int V = static_cast<int>(logits.size());
    if (V < 1) throw UsageError("filter_top_k_top_p needs at least one logit");
    std::vector<int> order(static_cast<std::size_t>(V));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
    });
    const int kept = (k <= 0 || k >= V) ? V : k;

    int survivors = kept;
    if (p < 1.0) {
        const double top = logits[static_cast<std::size_t>(order[0])];
        std::vector<double> weight(static_cast<std::size_t>(kept));
        double total = 0.0;
        for (int j = 0; j < kept; ++j) {
            weight[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])] - top);
            total += weight[static_cast<std::size_t>(j)];
        }
        double mass = 0.0;
        survivors = 0;
        while (survivors < kept) {
            mass += weight[static_cast<std::size_t>(survivors)] / total;
            ++survivors;
            if (mass >= p) break;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(V), -std::numeric_limits<double>::infinity());
    for (int j = 0; j < survivors; ++j) {
        const auto idx = static_cast<std::size_t>(order[static_cast<std::size_t>(j)]);
        out[idx] = logits[idx];
    }
    return out;
}

std::vector<double> cfg_combine(std::span<const double> cond, std::span<const double> uncond, double s) {
    if (cond.size() != uncond.size()) throw UsageError("cfg_combine: shape mismatch");
    std::vector<double> out(cond.size());
    for (std::size_t i = 0; i < cond.size(); ++i) out[i] = (1.0 - s) * uncond[i] + s * cond[i];
    return out;
}

namespace {

// Probabilities of the filtered, temperature-scaled distribution.
std::vector<double> sampling_probs(std::span<const double> logits, const SamplerConfig& sampler) {
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& v : scaled) v /= sampler.temperature;
    std::vector<double> filtered = filter_top_k_top_p(scaled, sampler.top_k, sampler.top_p);
    const double top = *std::max_element(filtered.begin(), filtered.end());
    double total = 0.0;
    for (double& v : filtered) {
        v = std::exp(v - top);
        total += v;
    }
    for (double& v : filtered) v /= total;
    return filtered;
}

struct Draw {
    int token;
    double prob;
};

Draw draw(std::span<const double> logits, const SamplerConfig& sampler, Rng& rng) {
    if (sampler.strategy == SamplerConfig::Strategy::argmax) {
        const int t = argmax_index(logits);
        // Confidence under the unfiltered softmax, used for masked decoding order.
        const double top = logits[static_cast<std::size_t>(t)];
        double total = 0.0;
        for (double v : logits) total += std::exp(v - top);
        return {t, 1.0 / total};
    }
    const std::vector<double> probs = sampling_probs(logits, sampler);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u = unif(rng);
    double acc = 0.0;
    int last = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        last = static_cast<int>(i);
        acc += probs[i];
        if (u < acc) return {last, probs[i]};
    }
    return {last, probs[static_cast<std::size_t>(last)]};
}

}  // namespace

int sample_token(std::span<const double> logits, const SamplerConfig& sampler, Rng& rng) {
    return draw(logits, sampler, rng).token;
}

TokenMap sample_map(const FeatureMap& logits, const SamplerConfig& sampler, Rng& rng) {
    TokenMap out{logits.side, std::vector<int>(static_cast<std::size_t>(logits.positions()))};
    for (int p = 0; p < logits.positions(); ++p) {
        out.indices[static_cast<std::size_t>(p)] = sample_token(logits.vec(p), sampler, rng);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Scalar>
FeatureMap to_map(const RowMatrix<Scalar>& rows, int side) {
    FeatureMap m(side, static_cast<int>(rows.cols()));
    for (Eigen::Index r = 0; r < rows.rows(); ++r)
        for (Eigen::Index c = 0; c < rows.cols(); ++c)
            m.values[static_cast<std::size_t>(r * rows.cols() + c)] = static_cast<double>(rows(r, c));
    return m;
}

FeatureMap guide(const FeatureMap& cond, const FeatureMap* uncond, const SamplerConfig& sampler) {
    if (uncond == nullptr) return cond;
    FeatureMap out = cond;
    out.values = cfg_combine(cond.values, uncond->values, *sampler.cfg_scale);
    return out;
}

}  // namespace

template <typename Scalar>
std::vector<Generated> generate(const ModelState<Scalar>& state, std::span<const int> labels,
                                const SamplerConfig& sampler, const Codebook* codebook, const PatchEmbed& embed,
                                const GenerateOptions& options) {
    sampler.validate();
    const GeneratorConfig& cfg = state.config;
    const ScaleSchedule& schedule = cfg.schedule;
    const int N = schedule.size();
    const auto B = labels.size();
    if (B == 0) return {};
    if (cfg.discrete() && (codebook == nullptr || codebook->size() != cfg.vocab)) {
        throw UsageError("generate: discrete model requires a codebook of matching size");
    }
    if (options.coarse_mask_steps > 0 && !cfg.discrete()) {
        throw UsageError("generate: masked coarse decoding needs a discrete model");
    }
    const bool guided = sampler.guided();
    ForwardOptions fopts;
    fopts.nfe = options.nfe;

    std::vector<Rng> rngs;
    for (std::size_t b = 0; b < B; ++b) rngs.push_back(make_rng(sampler.seed, "generate", options.first_item + b));
    std::vector<SequenceInput> cond(B), uncond(B);
    std::vector<Generated> out(B);
    for (std::size_t b = 0; b < B; ++b) {
        cond[b].label = labels[b];
        uncond[b].label = cfg.null_label();
        cond[b].shifted.resize(static_cast<std::size_t>(N));
        uncond[b].shifted.resize(static_cast<std::size_t>(N));
        out[b].tokens.vocab = cfg.vocab;
        out[b].inputs.maps.resize(static_cast<std::size_t>(N));
    }

    auto commit = [&](std::size_t b, int i, FeatureMap latent, std::optional<TokenMap> tokens) {
        if (tokens) out[b].tokens.maps.push_back(std::move(*tokens));
        if (i + 1 < N) {
            FeatureMap up = upsample(latent, schedule.side(i + 1));
            out[b].inputs.maps[static_cast<std::size_t>(i + 1)] = up;
            uncond[b].shifted[static_cast<std::size_t>(i + 1)] = up;
            cond[b].shifted[static_cast<std::size_t>(i + 1)] = std::move(up);
        }
        out[b].latents.maps.push_back(std::move(latent));
    };

    int first_scale = 0;
    if (options.coarse_mask_steps > 0) {
        const int h1 = schedule.side(0);
        const int n = h1 * h1;
        std::vector<TokenMap> tokens(B, TokenMap{h1, std::vector<int>(static_cast<std::size_t>(n), 0)});
        std::vector<std::vector<std::uint8_t>> masked(B, std::vector<std::uint8_t>(static_cast<std::size_t>(n), 1));
        const int steps = options.coarse_mask_steps;
        for (int t = 1; t <= steps; ++t) {
            for (std::size_t b = 0; b < B; ++b) {
                CoarseMaskInput ci{dequantize(tokens[b], *codebook), masked[b]};
                cond[b].coarse = ci;
                uncond[b].coarse = std::move(ci);
            }
            const auto c_pred = forward_prefix(state, std::span<const SequenceInput>(cond), 1, fopts);
            std::vector<RowMatrix<Scalar>> u_pred;
            if (guided) u_pred = forward_prefix(state, std::span<const SequenceInput>(uncond), 1, fopts);
            const int keep_masked =
                t == steps ? 0 : static_cast<int>(std::floor(n * std::cos(std::numbers::pi / 2.0 * t / steps)));
            for (std::size_t b = 0; b < B; ++b) {
                const FeatureMap cm = to_map(c_pred[b], h1);
                FeatureMap um;
                if (guided) um = to_map(u_pred[b], h1);
                const FeatureMap logits = guide(cm, guided ? &um : nullptr, sampler);
                std::vector<std::pair<double, int>> conf;
                std::vector<int> proposal(static_cast<std::size_t>(n));
                for (int p = 0; p < n; ++p) {
                    if (masked[b][static_cast<std::size_t>(p)] == 0) continue;
                    const Draw d = draw(logits.vec(p), sampler, rngs[b]);
                    proposal[static_cast<std::size_t>(p)] = d.token;
                    conf.emplace_back(-d.prob, p);
                }
                std::stable_sort(conf.begin(), conf.end());
                const int commit_count = std::max(0, static_cast<int>(conf.size()) - keep_masked);
                for (int j = 0; j < commit_count; ++j) {
                    const auto p = static_cast<std::size_t>(conf[static_cast<std::size_t>(j)].second);
                    tokens[b].indices[p] = proposal[p];
                    masked[b][p] = 0;
                }
            }
        }
        for (std::size_t b = 0; b < B; ++b) {
            CoarseMaskInput ci{dequantize(tokens[b], *codebook), masked[b]};
            cond[b].coarse = ci;
            uncond[b].coarse = std::move(ci);
            commit(b, 0, dequantize(tokens[b], *codebook), tokens[b]);
        }
        first_scale = 1;
    }

    for (int i = first_scale; i < N; ++i) {
        const int side = schedule.side(i);
        const auto c_pred = forward_prefix(state, std::span<const SequenceInput>(cond), i + 1, fopts);
        std::vector<RowMatrix<Scalar>> u_pred;
        if (guided) u_pred = forward_prefix(state, std::span<const SequenceInput>(uncond), i + 1, fopts);
        for (std::size_t b = 0; b < B; ++b) {
            const FeatureMap cm = to_map(c_pred[b], side);
            FeatureMap um;
            if (guided) um = to_map(u_pred[b], side);
            FeatureMap pred = guide(cm, guided ? &um : nullptr, sampler);
            if (cfg.discrete()) {
                TokenMap t = sample_map(pred, sampler, rngs[b]);
                FeatureMap latent = dequantize(t, *codebook);
                commit(b, i, std::move(latent), std::move(t));
            } else {
                commit(b, i, std::move(pred), std::nullopt);
            }
        }
    }
    for (auto& g : out) g.image = embed.decode(g.latents.maps.back());
    return out;
}

template std::vector<Generated> generate<float>(const ModelState<float>&, std::span<const int>, const SamplerConfig&,
                                                const Codebook*, const PatchEmbed&, const GenerateOptions&);
template std::vector<Generated> generate<double>(const ModelState<double>&, std::span<const int>,
                                                 const SamplerConfig&, const Codebook*, const PatchEmbed&,
                                                 const GenerateOptions&);

}  // namespace sar
