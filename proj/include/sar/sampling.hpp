#pragma once

// Token sampling (argmax, temperature, top-k/top-p, classifier-free
// guidance) and the full coarse-to-fine generation rollout.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sar/generator.hpp"
#include "sar/pyramid.hpp"
#include "sar/rng.hpp"

namespace sar {

struct SamplerConfig {
    enum class Strategy { argmax, stochastic };

    Strategy strategy = Strategy::stochastic;
    int top_k = 0;  ///< 0 keeps every token ("all")
    double top_p = 0.95;
    double temperature = 1.0;
    std::optional<double> cfg_scale;  ///< nullopt disables guidance
    std::uint64_t seed = 0;

    void validate() const;
    [[nodiscard]] bool guided() const noexcept { return cfg_scale.has_value(); }

    static SamplerConfig argmax() { return {Strategy::argmax, 0, 1.0, 1.0, std::nullopt, 0}; }
    /// Nucleus sampling (p = 0.95, every token within top-k) with guidance.
    static SamplerConfig nucleus_guided(double scale = 2.5) { return {Strategy::stochastic, 0, 0.95, 1.0, scale, 0}; }
};

/// Keeps the k largest logits (ties to the lower index), then the smallest
/// prefix of those, by descending probability, whose mass reaches p. The
/// best token always survives; removed entries become -inf.
[[nodiscard]] std::vector<double> filter_top_k_top_p(std::span<const double> logits, int k, double p);

/// u + s * (c - u), elementwise, evaluated as (1 - s) u + s c so that
/// s = 0 and s = 1 return u and c exactly.
[[nodiscard]] std::vector<double> cfg_combine(std::span<const double> cond, std::span<const double> uncond, double s);

/// Lowest index among the maxima.
[[nodiscard]] int argmax_index(std::span<const double> logits);

/// One draw from the temperature-scaled, filtered categorical.
[[nodiscard]] int sample_token(std::span<const double> logits, const SamplerConfig& sampler, Rng& rng);

/// Independent draw per position; `logits` is an h x h x V map.
[[nodiscard]] TokenMap sample_map(const FeatureMap& logits, const SamplerConfig& sampler, Rng& rng);

struct GenerateOptions {
    /// When > 0, scale 1 is decoded by iterative masked prediction in this
    /// many steps (for models trained with masked coarse-scale modelling).
    int coarse_mask_steps = 0;
    /// Index of the first item; item b draws from stream (seed, first_item + b).
    std::uint64_t first_item = 0;
    NfeCounter* nfe = nullptr;
};

struct Generated {
    Image image;
    TokenPyramid tokens;     ///< empty maps in continuous mode
    LatentPyramid latents;   ///< per-scale dequantized samples (or regressed latents)
    LatentPyramid inputs;    ///< scale-shifted inputs actually fed (map 0 is empty)
};

/// Coarse-to-fine rollout on the model's own samples. With guidance every
/// scale costs a conditional and a null-label forward.
template <typename Scalar>
[[nodiscard]] std::vector<Generated> generate(const ModelState<Scalar>& state, std::span<const int> labels,
                                              const SamplerConfig& sampler, const Codebook* codebook,
                                              const PatchEmbed& embed, const GenerateOptions& options = {});

template <typename Scalar>
[[nodiscard]] Generated generate_one(const ModelState<Scalar>& state, int label, const SamplerConfig& sampler,
                                     const Codebook* codebook, const PatchEmbed& embed,
                                     const GenerateOptions& options = {}) {
    const int labels[1] = {label};
    return std::move(generate(state, std::span<const int>(labels), sampler, codebook, embed, options).front());
}

}  // namespace sar
