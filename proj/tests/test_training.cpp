#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <numbers>

#include "sar/errors.hpp"
#include "sar/training.hpp"
#include "support.hpp"
#include "oracles.hpp"

using namespace sar;
using namespace sartest;

namespace {

double tf_loss(const ModelState<double>& s, const Batch& batch, const std::vector<int>& labels) {
    const auto in = teacher_inputs(batch, labels);
    return loss_tf(forward_tf(s, std::span<const SequenceInput>(in)), batch).total;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("cross-entropy equals an explicit log-softmax") {
    Fixture f({1, 2}, 5, 2, 1);
    const auto s = random_state<double>(f.config, 1);
    const auto in = teacher_inputs(f.batch, f.labels);
    const auto pass = forward_tf(s, std::span<const SequenceInput>(in));
    const LossBreakdown l = loss_tf(pass, f.batch);
    double want = 0.0;
    for (int i = 0; i < 2; ++i) {
        const int n = i == 0 ? 1 : 4;
        double block = 0.0;
        for (int p = 0; p < n; ++p) {
            const auto row = pass.output.row(pass.scale_offset[static_cast<std::size_t>(i)] + p);
            double z = 0.0;
            for (int v = 0; v < 5; ++v) z += std::exp(row(v));
            block += std::log(z) - row(f.data[0].tokens.maps[static_cast<std::size_t>(i)].indices[static_cast<std::size_t>(p)]);
        }
        CHECK(l.per_scale[static_cast<std::size_t>(i)] == doctest::Approx(block / n).epsilon(1e-12));
        want += block / n;
    }
    CHECK(l.total == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("zero head gives log V per scale") {
    Fixture f({1, 2, 3}, 6);
    const auto s = init_params<double>(f.config);
    const LossBreakdown l = [&] {
        const auto in = teacher_inputs(f.batch, f.labels);
        return loss_tf(forward_tf(s, std::span<const SequenceInput>(in)), f.batch);
    }();
    for (double v : l.per_scale) CHECK(v == doctest::Approx(std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("teacher-forcing gradient matches finite differences") {
    for (const int vocab : {6, 0}) {
        Fixture f({1, 2, 3}, vocab);
        const auto s = random_state<double>(f.config, 2);
        REQUIRE(s.size() <= 1000);
        const auto obj = tf_objective(s, f.batch, f.labels);
        CHECK(obj.nfe == 1);
        const double err = gradient_error(s, obj.grad, [&](const ModelState<double>& st) { return tf_loss(st, f.batch, f.labels); });
        CHECK(err <= 1e-3);
    }
}

TEST_CASE("contrastive student-forcing gradient matches finite differences with the bridge held fixed") {
    for (const int vocab : {6, 0}) {
        for (const CsflTarget target : {CsflTarget::teacher, CsflTarget::ground_truth}) {
            CAPTURE(vocab);
            CAPTURE(static_cast<int>(target));
            Fixture f({1, 2, 3}, vocab);
            const auto s = random_state<double>(f.config, 3);
            TrainConfig tc;
            tc.gamma = 0.7;
            tc.csfl_target = target;
            SamplerConfig sampler;
            sampler.top_k = 0;
            sampler.top_p = 1.0;
            Rng rng(4);
            const auto trace = ssr_rollout(s, f.batch, f.labels, sampler, f.cb(), rng);
            CHECK(trace.nfe == 2);
            // Continuous teacher targets are constants under the stop-gradient.
            const RowMatrix<double> teacher = trace.tf_pass.output;
            const RowMatrix<double>* frozen = vocab == 0 ? &teacher : nullptr;
            const auto obj = sar_objective(s, trace, f.batch, tc, -1, frozen);
            auto loss = [&](const ModelState<double>& st) {
                const auto t = rollout_with_bridge(st, f.batch, f.labels, trace.bridge);
                return loss_tf(t.tf_pass, f.batch).total + tc.gamma * loss_csfl<double>(t, f.batch, tc, -1, nullptr, nullptr, frozen).total;
            };
            CHECK(obj.loss == doctest::Approx(loss(s)).epsilon(1e-12));
            CHECK(gradient_error(s, obj.grad, loss) <= 1e-3);
        }
    }
}

TEST_CASE("undetached continuous teacher target also carries gradient") {
    Fixture f({1, 2, 3}, 0);
    const auto s = random_state<double>(f.config, 5);
    TrainConfig tc;
    tc.gamma = 0.5;
    tc.csfl_detach = false;
    Rng rng(6);
    const auto trace = ssr_rollout(s, f.batch, f.labels, SamplerConfig::argmax(), nullptr, rng);
    const auto obj = sar_objective(s, trace, f.batch, tc);
    auto loss = [&](const ModelState<double>& st) {
        const auto t = rollout_with_bridge(st, f.batch, f.labels, trace.bridge);
        return loss_tf(t.tf_pass, f.batch).total + tc.gamma * loss_csfl(t, f.batch, tc).total;
    };
    CHECK(gradient_error(s, obj.grad, loss) <= 1e-3);
    tc.csfl_detach = true;
    const auto detached = sar_objective(s, trace, f.batch, tc);
    CHECK(detached.loss == doctest::Approx(obj.loss).epsilon(1e-14));
    CHECK(detached.grad != obj.grad);
}

TEST_CASE("masked coarse-scale loss gradient matches finite differences") {
    Fixture f({2, 3}, 6);
    const auto s = random_state<double>(f.config, 7);
    auto run = [&](const ModelState<double>& st) {
        Rng rng(8);
        return hybrid_mask_objective(st, f.batch, f.labels, 0.5, rng);
    };
    const auto obj = run(s);
    CHECK(obj.nfe == 1);
    CHECK(gradient_error(s, obj.grad, [&](const ModelState<double>& st) { return run(st).loss; }) <= 1e-3);
}

TEST_CASE("masked coarse-scale loss counts masked positions only") {
    Fixture f({2, 3}, 6, 3, 1);
    const auto s = random_state<double>(f.config, 9);
    Rng rng(10);
    const auto none = hybrid_mask_objective(s, f.batch, f.labels, 0.0, rng);
    CHECK(none.tf.per_scale[0] == 0.0);
    CHECK(none.tf.per_scale[1] > 0.0);
    // With every position masked the scale-1 inputs are all the mask embedding,
    // so the loss does not depend on the ground-truth coarse latent.
    Rng r1(11), r2(12);
    const auto full = hybrid_mask_objective(s, f.batch, f.labels, 1.0, r1);
    auto other = f.data;
    for (auto& v : other[0].gt.maps[0].values) v += 1.0;
    const Batch ob = batch_of(other);
    const auto full2 = hybrid_mask_objective(s, ob, f.labels, 1.0, r2);
    CHECK(full.tf.per_scale[0] == full2.tf.per_scale[0]);
    GeneratorConfig cc = small_config({2, 3}, 0);
    const auto cs = init_params<double>(cc);
    CHECK_THROWS_AS((void)hybrid_mask_objective(cs, f.batch, f.labels, 0.5, rng), UsageError);
}

TEST_CASE("stagger-scale rollout feeds upsampled samples of the teacher pass") {
    Fixture f({1, 2, 3}, 6);
    const auto s = random_state<double>(f.config, 13);
    Rng rng(14);
    const auto trace = ssr_rollout(s, f.batch, f.labels, SamplerConfig::argmax(), f.cb(), rng);
    for (int b = 0; b < 2; ++b) {
        for (int i = 0; i < 3; ++i) {
            const int side = f.config.schedule.side(i);
            const auto rows = trace.tf_pass.scale_rows(b, i, side);
            for (int p = 0; p < side * side; ++p) {
                int arg = 0;
                rows.row(p).maxCoeff(&arg);
                CHECK(trace.bridge.tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)].indices[static_cast<std::size_t>(p)] == arg);
            }
            if (i >= 1) {
                CHECK(trace.bridge.sf_inputs[static_cast<std::size_t>(b)].shifted[static_cast<std::size_t>(i)] ==
                      upsample(dequantize(trace.bridge.tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(i - 1)], f.codebook), side));
            }
        }
        // Scale 1 sees identical inputs in both passes.
        CHECK((trace.sf_pass.scale_rows(b, 0, 1) - trace.tf_pass.scale_rows(b, 0, 1)).cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK_THROWS_AS((void)trace.sf_pred(0, 0), UsageError);
    CHECK(trace.sf_pred(1, 2).rows() == 9);
}

TEST_CASE("single-scale contrastive loss touches one scale") {
    Fixture f({1, 2, 3}, 6);
    const auto s = random_state<double>(f.config, 15);
    Rng rng(16);
    const auto trace = ssr_rollout(s, f.batch, f.labels, SamplerConfig(), f.cb(), rng);
    TrainConfig tc;
    const auto one = loss_csfl(trace, f.batch, tc, 2);
    const auto all = loss_csfl(trace, f.batch, tc);
    CHECK(one.per_scale[0] == 0.0);
    CHECK(one.per_scale[1] == 0.0);
    CHECK(one.per_scale[2] == doctest::Approx(all.per_scale[2]).epsilon(1e-14));
    CHECK(all.per_scale[0] == 0.0);
}

TEST_CASE("AdamW step matches the closed form on three parameters") {
    TrainConfig tc;
    tc.lr = 1e-2;
    tc.weight_decay = 0.05;
    tc.beta1 = 0.9;
    tc.beta2 = 0.95;
    tc.eps = 1e-8;
    std::vector<double> p{0.5, -1.25, 2.0};
    const std::vector<double> g1{0.3, -0.02, 0.0};
    const std::vector<double> g2{-0.1, 0.4, 1.5};
    AdamState<double> adam;
    optimizer_step(p, std::span<const double>(g1), adam, tc);
    const std::vector<double> p0{0.5, -1.25, 2.0};
    for (int i = 0; i < 3; ++i) {
        // Bias correction makes the first step lr * g / (|g| + eps).
        const double want = p0[i] * (1 - tc.lr * tc.weight_decay) - tc.lr * g1[i] / (std::abs(g1[i]) + tc.eps);
        CHECK(std::abs(p[i] - want) <= 1e-12);
    }
    const std::vector<double> p1 = p;
    optimizer_step(p, std::span<const double>(g2), adam, tc);
    for (int i = 0; i < 3; ++i) {
        const double m = 0.9 * 0.1 * g1[i] + 0.1 * g2[i];
        const double v = 0.95 * 0.05 * g1[i] * g1[i] + 0.05 * g2[i] * g2[i];
        const double mhat = m / (1 - 0.9 * 0.9), vhat = v / (1 - 0.95 * 0.95);
        const double want = p1[i] * (1 - tc.lr * tc.weight_decay) - tc.lr * mhat / (std::sqrt(vhat) + tc.eps);
        CHECK(std::abs(p[i] - want) <= 1e-12);
    }
    CHECK(adam.step == 2);
    const std::vector<double> before = p;
    const std::vector<double> bad{0.0, std::numeric_limits<double>::quiet_NaN(), 0.0};
    CHECK_THROWS_AS(optimizer_step(p, std::span<const double>(bad), adam, tc), NonFiniteError);
    CHECK(p == before);
    CHECK(adam.step == 2);
}

TEST_CASE("default optimizer hyperparameters") {
    const TrainConfig tc;
    CHECK(tc.lr == 1e-4);
    CHECK(tc.beta1 == 0.9);
    CHECK(tc.beta2 == 0.95);
    CHECK(tc.weight_decay == 0.05);
    CHECK(tc.gamma == 0.5);
    CHECK(tc.sampler_for_ssr.strategy == SamplerConfig::Strategy::stochastic);
    CHECK(tc.sampler_for_ssr.top_p == 0.95);
    CHECK(tc.sampler_for_ssr.cfg_scale == 2.5);
}

TEST_CASE("forward counts per step") {
    const int N = 4;
    Fixture f({1, 2, 3, 4}, 6, 3, 4);
    TrainConfig tc;
    tc.batch = 2;
    tc.sampler_for_ssr = SamplerConfig::argmax();
    Trainer<float> t(random_state<float>(f.config, 17), tc, &f.codebook);
    CHECK(t.tf_step(f.batch).nfe == 1);
    CHECK(t.sar_step(f.batch).nfe == 2);
    CHECK(t.naive_sf_step(f.batch, ScheduleKind::sf_full).nfe == N);
    CHECK(t.naive_sf_step(f.batch, ScheduleKind::sf_interleave).nfe == N / 2 + 1);
    for (int k = 1; k <= N; ++k) {
        TrainConfig h = tc;
        h.hybrid_k = k;
        t.set_config(h);
        const auto m = t.naive_sf_step(f.batch, ScheduleKind::sf_hybrid);
        CHECK(m.nfe == N - k + 1);
        CHECK(m.scheme == "sf_hybrid@" + std::to_string(k));
    }
    t.set_iteration(10);
    CHECK(t.naive_sf_step(f.batch, ScheduleKind::sf_alternate).nfe == 1);
    CHECK(t.naive_sf_step(f.batch, ScheduleKind::sf_alternate).nfe == N);
    TrainConfig g = tc;
    g.sampler_for_ssr = SamplerConfig();
    t.set_config(g);
    CHECK(t.sar_step(f.batch).nfe == 2);
    g.sampler_for_ssr.cfg_scale = 2.0;
    t.set_config(g);
    CHECK(t.sar_step(f.batch).nfe == 3);
    t.set_config(TrainConfig());
    CHECK(t.sar_step(f.batch).nfe == 3);
    CHECK(t.hybrid_mask_step(f.batch, MaskRatioSchedule{}).nfe == 1);
}

TEST_CASE("full student forcing conditions every scale on samples of the previous prediction") {
    Fixture f({1, 2, 3}, 6);
    const auto s = random_state<double>(f.config, 19);
    Rng rng(20);
    NfeCounter nfe;
    const auto in = student_inputs(s, f.batch, f.labels, ScheduleKind::sf_full, 1, SamplerConfig::argmax(), f.cb(), rng, &nfe);
    CHECK(nfe.count() == 2);
    const auto pass = forward_tf(s, std::span<const SequenceInput>(in));
    for (int b = 0; b < 2; ++b) {
        for (int i = 1; i < 3; ++i) {
            const int prev = f.config.schedule.side(i - 1);
            FeatureMap logits(prev, 6);
            const auto rows = pass.scale_rows(b, i - 1, prev);
            for (int p = 0; p < prev * prev; ++p)
                for (int v = 0; v < 6; ++v) logits.vec(p)[static_cast<std::size_t>(v)] = rows(p, v);
            Rng unused(0);
            const auto tokens = sample_map(logits, SamplerConfig::argmax(), unused);
            CHECK(in[static_cast<std::size_t>(b)].shifted[static_cast<std::size_t>(i)] ==
                  upsample(dequantize(tokens, f.codebook), f.config.schedule.side(i)));
        }
    }
    // hybrid(N) samples nothing and reduces to teacher forcing.
    nfe.reset();
    const auto h = student_inputs(s, f.batch, f.labels, ScheduleKind::sf_hybrid, 3, SamplerConfig::argmax(), f.cb(), rng, &nfe);
    CHECK(nfe.count() == 0);
    CHECK(h[0].shifted == f.data[0].tf_inputs);
    // interleave replaces the inputs of even scales only.
    const auto il = student_inputs(s, f.batch, f.labels, ScheduleKind::sf_interleave, 1, SamplerConfig::argmax(), f.cb(), rng, nullptr);
    CHECK(il[0].shifted[2] == f.data[0].tf_inputs[2]);
    CHECK(il[0].shifted[1] == in[0].shifted[1]);
}

TEST_CASE("zero weight on the contrastive term reproduces teacher forcing bit for bit") {
    Fixture f({1, 2, 3}, 6, 3, 12);
    TrainConfig tc;
    tc.batch = 4;
    tc.lr = 1e-3;
    tc.seed = 5;
    tc.gamma = 0.0;
    SamplerConfig ssr;
    ssr.seed = 1;
    tc.sampler_for_ssr = ssr;
    GeneratorConfig gc = f.config;
    gc.label_drop_prob = 0.2;
    Trainer<float> tf(init_params<float>(gc), tc, &f.codebook);
    Trainer<float> sar(init_params<float>(gc), tc, &f.codebook);
    for (int i = 0; i < 20; ++i) {
        tf.tf_step(tf.sample_batch(f.data));
        sar.sar_step(sar.sample_batch(f.data));
    }
    REQUIRE(tf.state().params.size() == sar.state().params.size());
    CHECK(std::memcmp(tf.state().params.data(), sar.state().params.data(), tf.state().params.size() * sizeof(float)) == 0);
    CHECK(tf.adam().m == sar.adam().m);
}

TEST_CASE("label dropout and batches are derived from the step index") {
    Fixture f({1, 2}, 6, 3, 8);
    GeneratorConfig gc = f.config;
    gc.label_drop_prob = 0.5;
    const auto a = step_labels(gc, f.batch, 3, 7);
    CHECK(a == step_labels(gc, f.batch, 3, 7));
    int dropped = 0;
    for (std::int64_t st = 0; st < 200; ++st) {
        for (int l : step_labels(gc, f.batch, 3, st)) dropped += l == gc.null_label();
    }
    // 1600 Bernoulli(0.5) draws.
    CHECK(std::abs(dropped - 800) <= 3 * 20);
    gc.label_drop_prob = 0.0;
    CHECK(step_labels(gc, f.batch, 3, 1) == f.labels);
    TrainConfig tc;
    tc.batch = 5;
    Trainer<float> t(init_params<float>(f.config), tc, &f.codebook);
    const Batch b1 = t.sample_batch(f.data);
    CHECK(b1 == t.sample_batch(f.data));
    CHECK(b1.size() == 5);
}

TEST_CASE("cosine mask ratios have mean 2/pi") {
    Rng rng(21);
    const MaskRatioSchedule cos{};
    const int n = 20000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double r = cos.draw(rng);
        CHECK(r >= 0.0);
        CHECK(r <= 1.0);
        sum += r;
        sq += r * r;
    }
    const double mean = sum / n;
    const double var = 0.5 - 4.0 / (std::numbers::pi * std::numbers::pi);
    CHECK(std::abs(mean - 2.0 / std::numbers::pi) <= 3.0 * std::sqrt(var / n));
    const MaskRatioSchedule fixed{MaskRatioSchedule::Kind::fixed, 0.25};
    CHECK(fixed.draw(rng) == 0.25);
}

TEST_CASE("a non-finite loss aborts the step without touching the model") {
    Fixture f({1, 2}, 6);
    auto s = init_params<float>(f.config);
    s.params[s.layout.head_b.offset] = std::numeric_limits<float>::infinity();
    Trainer<float> t(s, TrainConfig{}, &f.codebook);
    CHECK_THROWS_AS(t.tf_step(f.batch), NonFiniteError);
    CHECK(t.iteration() == 0);
    CHECK(t.adam().step == 0);
    CHECK(std::isinf(t.state().params[s.layout.head_b.offset]));
}

TEST_CASE("configuration errors") {
    TrainConfig tc;
    tc.batch = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig();
    tc.beta2 = 1.0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    Fixture f({1, 2}, 6);
    CHECK_THROWS_AS(Trainer<float>(init_params<float>(f.config), TrainConfig{}, nullptr), ConfigError);
    CHECK(parse_schedule_kind("sf_interleave") == ScheduleKind::sf_interleave);
    CHECK(to_string(ScheduleKind::sar) == "sar");
    CHECK_THROWS_AS((void)parse_schedule_kind("scheduled"), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS((void)naive_sf_objective(init_params<double>(f.config), f.batch, f.labels, ScheduleKind::sf_hybrid, 5,
                                             SamplerConfig::argmax(), &f.codebook, rng),
                    UsageError);
}

}
