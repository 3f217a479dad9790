#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sar/errors.hpp"
#include "sar/sampling.hpp"
#include "support.hpp"
#include "oracles.hpp"

using namespace sar;
using namespace sartest;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

TEST_SUITE("sampling") {

TEST_CASE("top-k/top-p filtering matches exhaustive enumeration") {
    Rng rng(1);
    std::uniform_int_distribution<int> vdist(1, 8), small(-2, 2);
    std::normal_distribution<double> n(0.0, 2.0);
    std::uniform_real_distribution<double> pd(0.05, 1.0);
    int checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int V = vdist(rng);
        std::vector<double> logits(static_cast<std::size_t>(V));
        const bool ties = trial % 2 == 0;
        for (double& v : logits) v = ties ? small(rng) : n(rng);
        const int k = std::uniform_int_distribution<int>(0, V + 1)(rng);
        const double p = trial % 5 == 0 ? 1.0 : pd(rng);
        const std::vector<double> got = filter_top_k_top_p(logits, k, p);
        const std::vector<bool> want = enumerate_kept(logits, k, p);
        REQUIRE(want.size() == logits.size());
        for (int i = 0; i < V; ++i) {
            const auto u = static_cast<std::size_t>(i);
            if (want[u]) {
                CHECK(got[u] == logits[u]);
            } else {
                CHECK(got[u] == kNegInf);
            }
        }
        ++checked;
    }
    CHECK(checked == 1000);
}

TEST_CASE("the best token always survives") {
    const std::vector<double> logits{0.0, 9.0, 1.0};
    const auto f = filter_top_k_top_p(logits, 1, 1e-9);
    CHECK(f[1] == 9.0);
    CHECK(f[0] == kNegInf);
    CHECK(argmax_index(std::vector<double>{1.0, 3.0, 3.0}) == 1);
}

TEST_CASE("guidance identities at s = 0 and s = 1 are exact") {
    Rng rng(2);
    std::normal_distribution<double> n(0.0, 10.0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> c(7), u(7);
        for (double& v : c) v = n(rng);
        for (double& v : u) v = n(rng);
        CHECK(cfg_combine(c, u, 0.0) == u);
        CHECK(cfg_combine(c, u, 1.0) == c);
        const auto g = cfg_combine(c, u, 2.5);
        for (std::size_t i = 0; i < 7; ++i) CHECK(g[i] == doctest::Approx(u[i] + 2.5 * (c[i] - u[i])).epsilon(1e-12));
    }
    CHECK_THROWS_AS((void)cfg_combine(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}, 1.0), UsageError);
}

TEST_CASE("empirical frequencies stay within 3 sigma of the filtered distribution") {
    const std::vector<double> logits{1.2, -0.3, 0.4, 2.0, -1.5, 0.9, 0.0, 1.6};
    for (const auto& cfg : {SamplerConfig{SamplerConfig::Strategy::stochastic, 0, 1.0, 1.0, std::nullopt, 0},
                            SamplerConfig{SamplerConfig::Strategy::stochastic, 5, 0.8, 0.7, std::nullopt, 0},
                            SamplerConfig{SamplerConfig::Strategy::stochastic, 3, 1.0, 2.0, std::nullopt, 0}}) {
        const std::vector<double> p = oracle_probs(logits, cfg);
        Rng rng(derive_seed(3, "freq", static_cast<std::uint64_t>(cfg.top_k)));
        const int draws = 100000;
        std::vector<int> counts(logits.size(), 0);
        for (int d = 0; d < draws; ++d) ++counts[static_cast<std::size_t>(sample_token(logits, cfg, rng))];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double sigma = std::sqrt(draws * p[i] * (1.0 - p[i]));
            if (p[i] == 0.0) {
                CHECK(counts[i] == 0);
            } else {
                CHECK(std::abs(counts[i] - draws * p[i]) <= 3.0 * sigma);
            }
        }
    }
}

TEST_CASE("argmax ignores the rng; sampler validation") {
    Rng a(1), b(2);
    const std::vector<double> logits{0.1, 0.5, 0.2};
    CHECK(sample_token(logits, SamplerConfig::argmax(), a) == 1);
    CHECK(sample_token(logits, SamplerConfig::argmax(), b) == 1);
    SamplerConfig s;
    s.top_p = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = SamplerConfig();
    s.temperature = 0.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = SamplerConfig();
    s.cfg_scale = -1.0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("generation is reproducible per item and counts forwards") {
    const GeneratorConfig c = small_config({1, 2, 3}, 6, 3);
    const auto s = random_state<float>(c, 4);
    const Codebook cb = random_codebook(6, 3, 5);
    const PatchEmbed embed(2, 1, 3, 6);
    SamplerConfig sampler;
    sampler.seed = 77;
    const std::vector<int> labels{0, 1, 2};
    NfeCounter nfe;
    GenerateOptions opts;
    opts.nfe = &nfe;
    const auto all = generate(s, std::span<const int>(labels), sampler, &cb, embed, opts);
    CHECK(nfe.count() == 3);
    REQUIRE(all.size() == 3);
    for (std::size_t b = 0; b < 3; ++b) {
        GenerateOptions one;
        one.first_item = b;
        const auto g = generate_one(s, labels[b], sampler, &cb, embed, one);
        CHECK(g.tokens == all[b].tokens);
        CHECK(g.image == all[b].image);
        CHECK(g.image.side == 6);
        CHECK(g.tokens.scales() == 3);
        for (int i = 1; i < 3; ++i) {
            CHECK(g.inputs.maps[static_cast<std::size_t>(i)] ==
                  upsample(dequantize(g.tokens.maps[static_cast<std::size_t>(i - 1)], cb), c.schedule.side(i)));
        }
        CHECK(g.image == embed.decode(g.latents.maps.back()));
    }
    SamplerConfig unit = sampler;
    unit.cfg_scale = 1.0;
    nfe.reset();
    const auto guided = generate(s, std::span<const int>(labels), unit, &cb, embed, opts);
    CHECK(nfe.count() == 6);
    for (std::size_t b = 0; b < 3; ++b) CHECK(guided[b].tokens == all[b].tokens);
    CHECK_THROWS_AS((void)generate(s, std::span<const int>(labels), sampler, nullptr, embed), UsageError);
}

TEST_CASE("continuous generation feeds back the regressed latents") {
    const GeneratorConfig c = small_config({1, 2}, 0, 2);
    const auto s = random_state<double>(c, 8);
    const PatchEmbed embed(1, 1, 2, 9);
    const auto g = generate_one(s, 1, SamplerConfig(), nullptr, embed);
    CHECK(g.tokens.maps.empty());
    REQUIRE(g.latents.scales() == 2);
    CHECK(g.inputs.maps[1] == upsample(g.latents.maps[0], 2));
    std::vector<SequenceInput> in(1);
    in[0].label = 1;
    in[0].shifted = {FeatureMap(), g.inputs.maps[1]};
    const auto pass = forward_tf(s, std::span<const SequenceInput>(in));
    for (int p = 0; p < 4; ++p)
        for (int d = 0; d < 2; ++d) CHECK(g.latents.maps[1].vec(p)[d] == doctest::Approx(pass.output(1 + p, d)).epsilon(1e-12));
}

}
