#pragma once

// Shared fixtures for the test binaries: small random models, pyramids and
// training examples built through the public API.

#include <cmath>
#include <random>
#include <vector>

#include "sar/generator.hpp"
#include "sar/pyramid.hpp"
#include "sar/rng.hpp"
#include "sar/training.hpp"

namespace sartest {

using namespace sar;

inline GeneratorConfig small_config(std::vector<int> sides = {1, 2, 3}, int vocab = 6, int latent_dim = 3) {
    GeneratorConfig c;
    c.schedule = ScaleSchedule(std::move(sides));
    c.depth = 1;
    c.width = 8;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.vocab = vocab;
    c.latent_dim = latent_dim;
    c.classes = 3;
    c.label_drop_prob = 0.0;
    c.seed = 11;
    return c;
}

/// init_params leaves the head at zero, which makes every output identical;
/// tests that need informative outputs perturb every parameter.
template <typename Scalar>
ModelState<Scalar> random_state(const GeneratorConfig& config, std::uint64_t seed, double scale = 0.3) {
    ModelState<Scalar> s = init_params<Scalar>(config);
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& p : s.params) p += static_cast<Scalar>(n(rng));
    return s;
}

inline FeatureMap random_map(int side, int channels, Rng& rng, double scale = 1.0) {
    FeatureMap m(side, channels);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : m.values) v = n(rng);
    return m;
}

inline Codebook random_codebook(int size, int dim, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> e(static_cast<std::size_t>(size) * dim);
    for (auto& v : e) v = n(rng);
    return Codebook(size, dim, std::move(e));
}

/// Example whose top-scale latent is random; lower scales by area pooling.
inline TrainingExample random_example(const GeneratorConfig& config, const Codebook* codebook, int label, Rng& rng) {
    const FeatureMap top = random_map(config.schedule.top(), config.latent_dim, rng);
    LatentPyramid pyr;
    for (int side : config.schedule.sides()) pyr.maps.push_back(area_downsample(top, side));
    return prepare_example(label, pyr, codebook, config.schedule);
}

inline std::vector<TrainingExample> random_examples(const GeneratorConfig& config, const Codebook* codebook, int count,
                                                    std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TrainingExample> out;
    for (int i = 0; i < count; ++i) out.push_back(random_example(config, codebook, i % config.classes, rng));
    return out;
}

inline Batch batch_of(const std::vector<TrainingExample>& data) {
    Batch b;
    for (const auto& e : data) b.push_back(&e);
    return b;
}

inline std::vector<int> labels_of(const Batch& batch) {
    std::vector<int> l;
    for (const auto* e : batch) l.push_back(e->label);
    return l;
}

/// Scale-shifted inputs with random maps at every scale >= 2.
inline SequenceInput random_input(const GeneratorConfig& config, int label, Rng& rng) {
    SequenceInput in;
    in.label = label;
    in.shifted.resize(static_cast<std::size_t>(config.schedule.size()));
    for (int i = 1; i < config.schedule.size(); ++i) {
        in.shifted[static_cast<std::size_t>(i)] = random_map(config.schedule.side(i), config.latent_dim, rng);
    }
    return in;
}

inline double rel_error(double a, double b) {
    return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}

}  // namespace sartest
