#include "sar/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>

#include "sar/errors.hpp"

namespace sar {

std::string to_string(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::tf: return "tf";
        case ScheduleKind::sf_full: return "sf_full";
        case ScheduleKind::sf_alternate: return "sf_alternate";
        case ScheduleKind::sf_interleave: return "sf_interleave";
        case ScheduleKind::sf_hybrid: return "sf_hybrid";
        case ScheduleKind::sar: return "sar";
    }
    return "unknown";
}

ScheduleKind parse_schedule_kind(const std::string& text) {
    for (auto k : {ScheduleKind::tf, ScheduleKind::sf_full, ScheduleKind::sf_alternate, ScheduleKind::sf_interleave,
                   ScheduleKind::sf_hybrid, ScheduleKind::sar}) {
        if (to_string(k) == text) return k;
    }
    throw ConfigError("unknown schedule kind '" + text + "'");
}

void TrainConfig::validate() const {
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in (0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (steps < 0 || batch < 1) throw ConfigError("steps must be >= 0 and batch >= 1");
    if (hybrid_k < 1) throw ConfigError("hybrid_k must be >= 1");
    sampler_for_ssr.validate();
}

TrainingExample prepare_example(int label, const LatentPyramid& pyramid, const Codebook* codebook,
                                const ScaleSchedule& schedule) {
    if (pyramid.scales() != schedule.size()) throw UsageError("pyramid does not match the schedule");
    TrainingExample ex;
    ex.label = label;
    if (codebook != nullptr) {
        ex.tokens = quantize(pyramid, *codebook);
        ex.gt = dequantize(ex.tokens, *codebook);
    } else {
        ex.gt = pyramid;
    }
    ex.tf_inputs.resize(static_cast<std::size_t>(schedule.size()));
    for (int i = 1; i < schedule.size(); ++i) {
        ex.tf_inputs[static_cast<std::size_t>(i)] = upsample(ex.gt.maps[static_cast<std::size_t>(i - 1)], schedule.side(i));
    }
    return ex;
}

std::vector<int> step_labels(const GeneratorConfig& config, const Batch& batch, std::uint64_t seed, std::int64_t step) {
    Rng rng = make_rng(seed, "labels", static_cast<std::uint64_t>(step));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<int> labels;
    labels.reserve(batch.size());
    for (const auto* ex : batch) {
        const bool drop = unif(rng) < config.label_drop_prob;
        labels.push_back(drop ? config.null_label() : ex->label);
    }
    return labels;
}

std::vector<SequenceInput> teacher_inputs(const Batch& batch, std::span<const int> labels) {
    if (labels.size() != batch.size()) throw UsageError("teacher_inputs: label count mismatch");
    std::vector<SequenceInput> inputs(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        inputs[b].label = labels[b];
        inputs[b].shifted = batch[b]->tf_inputs;
    }
    return inputs;
}

// ---------------------------------------------------------------------------

namespace {

// Cross-entropy of one scale block; positions with mask[p] == 0 are skipped
// when a mask is given. Returns the mean over counted positions.
template <typename Scalar>
double ce_block(const Eigen::Ref<const RowMatrix<Scalar>>& logits, const TokenMap& target,
                const std::vector<std::uint8_t>* mask, Eigen::Ref<RowMatrix<Scalar>> d, bool want_grad,
                double weight) {
    const Eigen::Index n = logits.rows();
    const Eigen::Index V = logits.cols();
    Eigen::Index counted = 0;
    for (Eigen::Index p = 0; p < n; ++p) {
        if (mask == nullptr || (*mask)[static_cast<std::size_t>(p)] != 0) ++counted;
    }
    if (counted == 0) return 0.0;
    double total = 0.0;
    std::vector<double> prob(static_cast<std::size_t>(V));
    for (Eigen::Index p = 0; p < n; ++p) {
        if (mask != nullptr && (*mask)[static_cast<std::size_t>(p)] == 0) continue;
        const int t = target.indices[static_cast<std::size_t>(p)];
        if (t < 0 || t >= V) throw InvariantError("target token out of vocabulary");
        double m = -std::numeric_limits<double>::infinity();
        for (Eigen::Index v = 0; v < V; ++v) m = std::max(m, static_cast<double>(logits(p, v)));
        double z = 0.0;
        for (Eigen::Index v = 0; v < V; ++v) {
            prob[static_cast<std::size_t>(v)] = std::exp(static_cast<double>(logits(p, v)) - m);
            z += prob[static_cast<std::size_t>(v)];
        }
        total += (m + std::log(z)) - static_cast<double>(logits(p, t));
        if (want_grad) {
            const double scale = weight / static_cast<double>(counted);
            for (Eigen::Index v = 0; v < V; ++v) {
                const double g = prob[static_cast<std::size_t>(v)] / z - (v == t ? 1.0 : 0.0);
                d(p, v) += static_cast<Scalar>(scale * g);
            }
        }
    }
    return total / static_cast<double>(counted);
}

// Mean squared error of one scale block against `target` (same shape).
template <typename Scalar, typename Target>
double mse_block(const Eigen::Ref<const RowMatrix<Scalar>>& pred, const Target& target,
                 Eigen::Ref<RowMatrix<Scalar>> d, bool want_grad, double weight,
                 RowMatrix<Scalar>* d_target_full, Eigen::Index target_row0) {
    const double count = static_cast<double>(pred.size());
    double total = 0.0;
    for (Eigen::Index p = 0; p < pred.rows(); ++p) {
        for (Eigen::Index c = 0; c < pred.cols(); ++c) {
            const double diff = static_cast<double>(pred(p, c)) - target(p, c);
            total += diff * diff;
            if (want_grad) {
                const double g = weight * 2.0 * diff / count;
                d(p, c) += static_cast<Scalar>(g);
                if (d_target_full != nullptr) (*d_target_full)(target_row0 + p, c) -= static_cast<Scalar>(g);
            }
        }
    }
    return total / count;
}

struct MapTarget {
    const FeatureMap& map;
    double operator()(Eigen::Index p, Eigen::Index c) const {
        return map.values[static_cast<std::size_t>(p * map.channels + c)];
    }
};

template <typename Scalar>
struct RowsTarget {
    const RowMatrix<Scalar>& rows;
    Eigen::Index row0;
    double operator()(Eigen::Index p, Eigen::Index c) const { return static_cast<double>(rows(row0 + p, c)); }
};

template <typename Scalar>
FeatureMap rows_to_map(const RowMatrix<Scalar>& out, Eigen::Index row0, int side) {
    FeatureMap m(side, static_cast<int>(out.cols()));
    for (int p = 0; p < side * side; ++p)
        for (Eigen::Index c = 0; c < out.cols(); ++c)
            m.values[static_cast<std::size_t>(p * out.cols() + c)] = static_cast<double>(out(row0 + p, c));
    return m;
}

template <typename Scalar>
std::vector<Scalar> add_scaled(const std::vector<Scalar>& a, const std::vector<Scalar>& b, double gamma) {
    std::vector<Scalar> out(a.size());
    const Scalar g = static_cast<Scalar>(gamma);
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + g * b[i];
    return out;
}

template <typename Scalar>
RowMatrix<Scalar> zeros_like(const RowMatrix<Scalar>& m) {
    return RowMatrix<Scalar>::Zero(m.rows(), m.cols());
}

}  // namespace

template <typename Scalar>
LossBreakdown loss_tf(const ForwardPass<Scalar>& pass, const Batch& batch, RowMatrix<Scalar>* d_out, double weight) {
    if (static_cast<int>(batch.size()) != pass.batch) throw UsageError("loss_tf: batch size mismatch");
    const bool discrete = !batch.front()->tokens.maps.empty();
    const int out_dim = static_cast<int>(pass.output.cols());
    LossBreakdown out;
    out.per_scale.assign(static_cast<std::size_t>(pass.scales), 0.0);
    const double inv_b = 1.0 / static_cast<double>(pass.batch);
    for (int b = 0; b < pass.batch; ++b) {
        const TrainingExample& ex = *batch[static_cast<std::size_t>(b)];
        for (int i = 0; i < pass.scales; ++i) {
            const int side = ex.gt.maps[static_cast<std::size_t>(i)].side;
            const Eigen::Index row0 = static_cast<Eigen::Index>(b) * pass.tokens + pass.scale_offset[static_cast<std::size_t>(i)];
            const Eigen::Index n = static_cast<Eigen::Index>(side) * side;
            const auto pred = pass.output.middleRows(row0, n);
            RowMatrix<Scalar> scratch;
            auto dblock = d_out != nullptr ? Eigen::Ref<RowMatrix<Scalar>>(d_out->middleRows(row0, n))
                                           : Eigen::Ref<RowMatrix<Scalar>>(scratch);
            double l;
            if (discrete) {
                if (out_dim != ex.tokens.vocab) throw UsageError("loss_tf: logits do not match the vocabulary");
                l = ce_block<Scalar>(pred, ex.tokens.maps[static_cast<std::size_t>(i)], nullptr, dblock,
                                     d_out != nullptr, weight * inv_b);
            } else {
                if (out_dim != ex.gt.maps[static_cast<std::size_t>(i)].channels) {
                    throw UsageError("loss_tf: continuous predictions need latent targets");
                }
                l = mse_block<Scalar>(pred, MapTarget{ex.gt.maps[static_cast<std::size_t>(i)]}, dblock,
                                      d_out != nullptr, weight * inv_b, nullptr, 0);
            }
            out.per_scale[static_cast<std::size_t>(i)] += l * inv_b;
        }
    }
    out.total = std::accumulate(out.per_scale.begin(), out.per_scale.end(), 0.0);
    return out;
}

template <typename Scalar>
RowMatrix<Scalar> RolloutTrace<Scalar>::sf_pred(int b, int scale) const {
    if (scale < 1 || scale >= sf_pass.scales) throw UsageError("student-forced predictions exist only for scales >= 2");
    const auto i = static_cast<std::size_t>(scale);
    const int end = scale + 1 < sf_pass.scales ? sf_pass.scale_offset[i + 1] : sf_pass.tokens;
    const int side = static_cast<int>(std::lround(std::sqrt(end - sf_pass.scale_offset[i])));
    return sf_pass.scale_rows(b, scale, side);
}

template <typename Scalar>
RolloutTrace<Scalar> ssr_rollout(const ModelState<Scalar>& state, const Batch& batch, std::span<const int> labels,
                                 const SamplerConfig& sampler, const Codebook* codebook, Rng& rng) {
    const GeneratorConfig& cfg = state.config;
    const ScaleSchedule& schedule = cfg.schedule;
    if (cfg.discrete() && codebook == nullptr) throw UsageError("ssr_rollout: discrete mode needs the codebook");
    NfeCounter counter;
    ForwardOptions fopts;
    fopts.nfe = &counter;
    RolloutTrace<Scalar> trace;
    const std::vector<SequenceInput> inputs = teacher_inputs(batch, labels);
    trace.tf_pass = forward_tf(state, std::span<const SequenceInput>(inputs), fopts);
    std::optional<ForwardPass<Scalar>> uncond;
    if (sampler.guided()) {
        std::vector<SequenceInput> u = inputs;
        for (auto& in : u) in.label = cfg.null_label();
        uncond = forward_tf(state, std::span<const SequenceInput>(u), fopts);
    }
    const int N = schedule.size();
    const auto B = batch.size();
    SsrBridge& bridge = trace.bridge;
    bridge.latents.assign(B, {});
    if (cfg.discrete()) bridge.tokens.assign(B, {});
    for (std::size_t b = 0; b < B; ++b) {
        for (int i = 0; i < N; ++i) {
            const int side = schedule.side(i);
            const Eigen::Index row0 = static_cast<Eigen::Index>(b) * trace.tf_pass.tokens + schedule.offset(i);
            FeatureMap pred = rows_to_map(trace.tf_pass.output, row0, side);
            if (uncond) pred.values = cfg_combine(pred.values, rows_to_map(uncond->output, row0, side).values, *sampler.cfg_scale);
            if (cfg.discrete()) {
                TokenMap t = sample_map(pred, sampler, rng);
                bridge.latents[b].push_back(dequantize(t, *codebook));
                bridge.tokens[b].push_back(std::move(t));
            } else {
                bridge.latents[b].push_back(std::move(pred));
            }
        }
    }
    bridge.sf_inputs.resize(B);
    for (std::size_t b = 0; b < B; ++b) {
        bridge.sf_inputs[b].label = labels[b];
        bridge.sf_inputs[b].shifted.resize(static_cast<std::size_t>(N));
        for (int i = 1; i < N; ++i) {
            bridge.sf_inputs[b].shifted[static_cast<std::size_t>(i)] =
                upsample(bridge.latents[b][static_cast<std::size_t>(i - 1)], schedule.side(i));
        }
    }
    trace.sf_pass = forward_tf(state, std::span<const SequenceInput>(bridge.sf_inputs), fopts);
    trace.nfe = counter.count();
    return trace;
}

template <typename Scalar>
RolloutTrace<Scalar> rollout_with_bridge(const ModelState<Scalar>& state, const Batch& batch,
                                         std::span<const int> labels, SsrBridge bridge) {
    NfeCounter counter;
    ForwardOptions fopts;
    fopts.nfe = &counter;
    RolloutTrace<Scalar> trace;
    const std::vector<SequenceInput> inputs = teacher_inputs(batch, labels);
    trace.tf_pass = forward_tf(state, std::span<const SequenceInput>(inputs), fopts);
    trace.bridge = std::move(bridge);
    trace.sf_pass = forward_tf(state, std::span<const SequenceInput>(trace.bridge.sf_inputs), fopts);
    trace.nfe = counter.count();
    return trace;
}

template <typename Scalar>
LossBreakdown loss_csfl(const RolloutTrace<Scalar>& trace, const Batch& batch, const TrainConfig& config,
                        int only_scale, RowMatrix<Scalar>* d_sf, RowMatrix<Scalar>* d_tf,
                        const RowMatrix<Scalar>* frozen_teacher, double weight) {
    const ForwardPass<Scalar>& sf = trace.sf_pass;
    if (static_cast<int>(batch.size()) != sf.batch) throw UsageError("loss_csfl: batch size mismatch");
    const bool discrete = !batch.front()->tokens.maps.empty();
    const bool teacher = config.csfl_target == CsflTarget::teacher;
    if (teacher && discrete && trace.bridge.tokens.size() != batch.size()) {
        throw UsageError("loss_csfl: trace has no sampled teacher tokens");
    }
    const RowMatrix<Scalar>& teacher_rows = frozen_teacher != nullptr ? *frozen_teacher : trace.tf_pass.output;
    RowMatrix<Scalar>* d_teacher = (teacher && !discrete && !config.csfl_detach && frozen_teacher == nullptr) ? d_tf : nullptr;
    LossBreakdown out;
    out.per_scale.assign(static_cast<std::size_t>(sf.scales), 0.0);
    const double inv_b = 1.0 / static_cast<double>(sf.batch);
    for (int b = 0; b < sf.batch; ++b) {
        const TrainingExample& ex = *batch[static_cast<std::size_t>(b)];
        for (int i = 1; i < sf.scales; ++i) {
            if (only_scale >= 1 && i != only_scale) continue;
            const int side = ex.gt.maps[static_cast<std::size_t>(i)].side;
            const Eigen::Index row0 = static_cast<Eigen::Index>(b) * sf.tokens + sf.scale_offset[static_cast<std::size_t>(i)];
            const Eigen::Index n = static_cast<Eigen::Index>(side) * side;
            const auto pred = sf.output.middleRows(row0, n);
            RowMatrix<Scalar> scratch;
            auto dblock = d_sf != nullptr ? Eigen::Ref<RowMatrix<Scalar>>(d_sf->middleRows(row0, n))
                                          : Eigen::Ref<RowMatrix<Scalar>>(scratch);
            const bool grad = d_sf != nullptr;
            double l;
            if (discrete) {
                const TokenMap& target = teacher ? trace.bridge.tokens[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)]
                                                 : ex.tokens.maps[static_cast<std::size_t>(i)];
                l = ce_block<Scalar>(pred, target, nullptr, dblock, grad, weight * inv_b);
            } else if (teacher) {
                l = mse_block<Scalar>(pred, RowsTarget<Scalar>{teacher_rows, row0}, dblock, grad, weight * inv_b,
                                      grad ? d_teacher : nullptr, row0);
            } else {
                l = mse_block<Scalar>(pred, MapTarget{ex.gt.maps[static_cast<std::size_t>(i)]}, dblock, grad,
                                      weight * inv_b, nullptr, 0);
            }
            out.per_scale[static_cast<std::size_t>(i)] += l * inv_b;
        }
    }
    out.total = std::accumulate(out.per_scale.begin(), out.per_scale.end(), 0.0);
    return out;
}

double MaskRatioSchedule::draw(Rng& rng) const {
    if (kind == Kind::fixed) return value;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    return std::cos(std::numbers::pi / 2.0 * unif(rng));
}

template <typename Scalar>
Objective<Scalar> tf_objective(const ModelState<Scalar>& state, const Batch& batch, std::span<const int> labels) {
    NfeCounter counter;
    ForwardOptions fopts;
    fopts.nfe = &counter;
    const std::vector<SequenceInput> inputs = teacher_inputs(batch, labels);
    const ForwardPass<Scalar> pass = forward_tf(state, std::span<const SequenceInput>(inputs), fopts);
    RowMatrix<Scalar> d = zeros_like(pass.output);
    Objective<Scalar> obj;
    obj.tf = loss_tf(pass, batch, &d);
    obj.loss = obj.tf.total;
    obj.grad.assign(state.size(), Scalar(0));
    backward(state, pass, d, std::span<Scalar>(obj.grad));
    obj.nfe = counter.count();
    return obj;
}

template <typename Scalar>
Objective<Scalar> sar_objective(const ModelState<Scalar>& state, const RolloutTrace<Scalar>& trace, const Batch& batch,
                                const TrainConfig& config, int only_scale, const RowMatrix<Scalar>* frozen_teacher) {
    Objective<Scalar> obj;
    RowMatrix<Scalar> d_tf = zeros_like(trace.tf_pass.output);
    RowMatrix<Scalar> d_sf = zeros_like(trace.sf_pass.output);
    RowMatrix<Scalar> d_teacher = zeros_like(trace.tf_pass.output);
    obj.tf = loss_tf(trace.tf_pass, batch, &d_tf);
    obj.csf = loss_csfl(trace, batch, config, only_scale, &d_sf, &d_teacher, frozen_teacher);
    obj.loss = obj.tf.total + config.gamma * obj.csf.total;
    std::vector<Scalar> g_tf(state.size(), Scalar(0));
    std::vector<Scalar> g_csf(state.size(), Scalar(0));
    backward(state, trace.tf_pass, d_tf, std::span<Scalar>(g_tf));
    backward(state, trace.sf_pass, d_sf, std::span<Scalar>(g_csf));
    const bool undetached = !config.csfl_detach && config.csfl_target == CsflTarget::teacher &&
                            !state.config.discrete() && frozen_teacher == nullptr;
    if (undetached) backward(state, trace.tf_pass, d_teacher, std::span<Scalar>(g_csf));
    obj.grad = add_scaled(g_tf, g_csf, config.gamma);
    obj.nfe = trace.nfe;
    return obj;
}

template <typename Scalar>
std::vector<SequenceInput> student_inputs(const ModelState<Scalar>& state, const Batch& batch,
                                          std::span<const int> labels, ScheduleKind kind, int first_sampled,
                                          const SamplerConfig& sampler, const Codebook* codebook, Rng& rng,
                                          NfeCounter* nfe) {
    const GeneratorConfig& cfg = state.config;
    const ScaleSchedule& schedule = cfg.schedule;
    const int N = schedule.size();
    if (cfg.discrete() && codebook == nullptr) throw UsageError("student_inputs: discrete mode needs the codebook");
    std::vector<SequenceInput> inputs = teacher_inputs(batch, labels);
    ForwardOptions fopts;
    fopts.nfe = nfe;
    for (int i = 1; i < N; ++i) {
        const bool sampled = kind == ScheduleKind::sf_interleave ? (i % 2 == 1) : (i >= first_sampled);
        if (!sampled) continue;
        // Prediction for scale i-1 given the (partly sampled) inputs so far.
        const auto preds = forward_prefix(state, std::span<const SequenceInput>(inputs), i, fopts);
        const int side = schedule.side(i - 1);
        for (std::size_t b = 0; b < inputs.size(); ++b) {
            FeatureMap pred = rows_to_map(preds[b], 0, side);
            FeatureMap latent = cfg.discrete() ? dequantize(sample_map(pred, sampler, rng), *codebook) : std::move(pred);
            inputs[b].shifted[static_cast<std::size_t>(i)] = upsample(latent, schedule.side(i));
        }
    }
    return inputs;
}

template <typename Scalar>
Objective<Scalar> naive_sf_objective(const ModelState<Scalar>& state, const Batch& batch, std::span<const int> labels,
                                     ScheduleKind kind, int hybrid_k, const SamplerConfig& sampler,
                                     const Codebook* codebook, Rng& rng) {
    const int N = state.config.schedule.size();
    int first_sampled = 1;
    switch (kind) {
        case ScheduleKind::sf_full: first_sampled = 1; break;
        case ScheduleKind::sf_hybrid:
            if (hybrid_k < 1 || hybrid_k > N) throw UsageError("hybrid k must be in [1, N]");
            first_sampled = hybrid_k;
            break;
        case ScheduleKind::sf_interleave: break;
        default: throw UsageError("naive_sf_objective: kind must be sf_full, sf_interleave or sf_hybrid");
    }
    NfeCounter counter;
    const std::vector<SequenceInput> inputs =
        student_inputs(state, batch, labels, kind, first_sampled, sampler, codebook, rng, &counter);
    ForwardOptions fopts;
    fopts.nfe = &counter;
    // Final pass over all scales: by causality its scale-i rows equal the
    // prefix forward that produced the sample feeding scale i+1, so one
    // backward through it carries the whole rollout's gradient.
    const ForwardPass<Scalar> pass = forward_tf(state, std::span<const SequenceInput>(inputs), fopts);
    RowMatrix<Scalar> d = zeros_like(pass.output);
    Objective<Scalar> obj;
    obj.tf = loss_tf(pass, batch, &d);
    obj.loss = obj.tf.total;
    obj.grad.assign(state.size(), Scalar(0));
    backward(state, pass, d, std::span<Scalar>(obj.grad));
    obj.nfe = counter.count();
    return obj;
}

template <typename Scalar>
Objective<Scalar> hybrid_mask_objective(const ModelState<Scalar>& state, const Batch& batch,
                                        std::span<const int> labels, double ratio, Rng& rng) {
    const GeneratorConfig& cfg = state.config;
    if (!cfg.discrete()) throw UsageError("masked coarse-scale modelling is unsupported in continuous mode");
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw UsageError("mask ratio must be in [0, 1]");
    const int h1 = cfg.schedule.side(0);
    const int n = h1 * h1;
    const int n_mask = std::clamp(static_cast<int>(std::ceil(ratio * n - 1e-9)), 0, n);
    std::vector<SequenceInput> inputs = teacher_inputs(batch, labels);
    for (std::size_t b = 0; b < inputs.size(); ++b) {
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        CoarseMaskInput ci{batch[b]->gt.maps[0], std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0)};
        for (int j = 0; j < n_mask; ++j) ci.masked[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])] = 1;
        inputs[b].coarse = std::move(ci);
    }
    NfeCounter counter;
    ForwardOptions fopts;
    fopts.nfe = &counter;
    const ForwardPass<Scalar> pass = forward_tf(state, std::span<const SequenceInput>(inputs), fopts);
    RowMatrix<Scalar> d = zeros_like(pass.output);
    Objective<Scalar> obj;
    obj.tf.per_scale.assign(static_cast<std::size_t>(pass.scales), 0.0);
    const double inv_b = 1.0 / static_cast<double>(pass.batch);
    for (int b = 0; b < pass.batch; ++b) {
        const TrainingExample& ex = *batch[static_cast<std::size_t>(b)];
        for (int i = 0; i < pass.scales; ++i) {
            const int side = cfg.schedule.side(i);
            const Eigen::Index row0 = static_cast<Eigen::Index>(b) * pass.tokens + pass.scale_offset[static_cast<std::size_t>(i)];
            const Eigen::Index rows = static_cast<Eigen::Index>(side) * side;
            const auto* mask = i == 0 ? &inputs[static_cast<std::size_t>(b)].coarse->masked : nullptr;
            const double l = ce_block<Scalar>(pass.output.middleRows(row0, rows), ex.tokens.maps[static_cast<std::size_t>(i)],
                                              mask, d.middleRows(row0, rows), true, inv_b);
            obj.tf.per_scale[static_cast<std::size_t>(i)] += l * inv_b;
        }
    }
    obj.tf.total = std::accumulate(obj.tf.per_scale.begin(), obj.tf.per_scale.end(), 0.0);
    obj.loss = obj.tf.total;
    obj.grad.assign(state.size(), Scalar(0));
    backward(state, pass, d, std::span<Scalar>(obj.grad));
    obj.nfe = counter.count();
    return obj;
}

template <typename Scalar>
void optimizer_step(std::vector<Scalar>& params, std::span<const Scalar> grads, AdamState<Scalar>& adam,
                    const TrainConfig& config) {
    if (grads.size() != params.size()) throw UsageError("optimizer_step: gradient size mismatch");
    for (Scalar g : grads) {
        if (!std::isfinite(static_cast<double>(g))) throw NonFiniteError("optimizer_step: non-finite gradient");
    }
    if (adam.m.size() != params.size()) {
        adam.m.assign(params.size(), Scalar(0));
        adam.v.assign(params.size(), Scalar(0));
    }
    const std::int64_t t = adam.step + 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
    const double decay = 1.0 - config.lr * config.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        const double m = config.beta1 * static_cast<double>(adam.m[i]) + (1.0 - config.beta1) * g;
        const double v = config.beta2 * static_cast<double>(adam.v[i]) + (1.0 - config.beta2) * g * g;
        adam.m[i] = static_cast<Scalar>(m);
        adam.v[i] = static_cast<Scalar>(v);
        double p = static_cast<double>(params[i]) * decay;
        p -= config.lr * (m / bc1) / (std::sqrt(v / bc2) + config.eps);
        params[i] = static_cast<Scalar>(p);
    }
    adam.step = t;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Trainer<Scalar>::Trainer(ModelState<Scalar> state, TrainConfig config, const Codebook* codebook)
    : Trainer(std::move(state), AdamState<Scalar>{}, std::move(config), codebook) {}

template <typename Scalar>
Trainer<Scalar>::Trainer(ModelState<Scalar> state, AdamState<Scalar> adam, TrainConfig config,
                         const Codebook* codebook)
    : state_(std::move(state)), adam_(std::move(adam)), config_(std::move(config)), codebook_(codebook) {
    config_.validate();
    if (state_.config.discrete() && codebook_ == nullptr) throw ConfigError("discrete trainer needs a codebook");
    if (adam_.m.size() != state_.size()) {
        adam_.m.assign(state_.size(), Scalar(0));
        adam_.v.assign(state_.size(), Scalar(0));
    }
}

template <typename Scalar>
void Trainer<Scalar>::set_config(TrainConfig config) {
    config.validate();
    config_ = std::move(config);
}

template <typename Scalar>
Batch Trainer<Scalar>::sample_batch(std::span<const TrainingExample> data) const {
    if (data.empty()) throw UsageError("sample_batch: empty dataset");
    Rng rng = make_rng(config_.seed, "batch", static_cast<std::uint64_t>(iteration_));
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    Batch batch;
    for (int i = 0; i < config_.batch; ++i) batch.push_back(&data[pick(rng)]);
    return batch;
}

template <typename Scalar>
StepMetrics Trainer<Scalar>::apply(Objective<Scalar>& objective, const std::string& scheme) {
    if (!std::isfinite(objective.loss)) {
        throw NonFiniteError("non-finite loss at step " + std::to_string(iteration_) + " (" + scheme +
                             "): loss_tf=" + std::to_string(objective.tf.total) +
                             " loss_csf=" + std::to_string(objective.csf.total));
    }
    optimizer_step(state_.params, std::span<const Scalar>(objective.grad), adam_, config_);
    StepMetrics m;
    m.step = iteration_;
    m.scheme = scheme;
    m.loss_tf = objective.tf.total;
    m.loss_csf = objective.csf.total;
    m.nfe = objective.nfe;
    ++iteration_;
    return m;
}

template <typename Scalar>
StepMetrics Trainer<Scalar>::tf_step(const Batch& batch) {
    const auto labels = step_labels(state_.config, batch, config_.seed, iteration_);
    Objective<Scalar> obj = tf_objective(state_, batch, labels);
    return apply(obj, "tf");
}

template <typename Scalar>
StepMetrics Trainer<Scalar>::sar_step(const Batch& batch) {
    const auto labels = step_labels(state_.config, batch, config_.seed, iteration_);
    Rng rng = make_rng(config_.seed, "ssr", static_cast<std::uint64_t>(iteration_));
    const RolloutTrace<Scalar> trace = ssr_rollout(state_, batch, labels, config_.sampler_for_ssr, codebook_, rng);
    int only_scale = -1;
    const int N = state_.config.schedule.size();
    if (config_.sf_scales == SfScales::single_random_k && N > 1) {
        Rng pick_rng = make_rng(config_.seed, "csf_scale", static_cast<std::uint64_t>(iteration_));
        only_scale = std::uniform_int_distribution<int>(1, N - 1)(pick_rng);
    }
    Objective<Scalar> obj = sar_objective(state_, trace, batch, config_, only_scale);
    return apply(obj, "sar");
}

template <typename Scalar>
StepMetrics Trainer<Scalar>::naive_sf_step(const Batch& batch, ScheduleKind kind) {
    if (kind == ScheduleKind::sf_alternate) {
        if (iteration_ % 2 == 0) {
            StepMetrics m = tf_step(batch);
            m.scheme = "sf_alternate";
            return m;
        }
        kind = ScheduleKind::sf_full;
        const auto labels = step_labels(state_.config, batch, config_.seed, iteration_);
        Rng rng = make_rng(config_.seed, "sf", static_cast<std::uint64_t>(iteration_));
        Objective<Scalar> obj = naive_sf_objective(state_, batch, labels, kind, config_.hybrid_k,
                                                   config_.sampler_for_ssr, codebook_, rng);
        return apply(obj, "sf_alternate");
    }
    const auto labels = step_labels(state_.config, batch, config_.seed, iteration_);
    Rng rng = make_rng(config_.seed, "sf", static_cast<std::uint64_t>(iteration_));
    Objective<Scalar> obj =
        naive_sf_objective(state_, batch, labels, kind, config_.hybrid_k, config_.sampler_for_ssr, codebook_, rng);
    std::string scheme = to_string(kind);
    if (kind == ScheduleKind::sf_hybrid) scheme += "@" + std::to_string(config_.hybrid_k);
    return apply(obj, scheme);
}

template <typename Scalar>
StepMetrics Trainer<Scalar>::hybrid_mask_step(const Batch& batch, const MaskRatioSchedule& ratios) {
    const auto labels = step_labels(state_.config, batch, config_.seed, iteration_);
    Rng rng = make_rng(config_.seed, "mask", static_cast<std::uint64_t>(iteration_));
    const double ratio = ratios.draw(rng);
    Objective<Scalar> obj = hybrid_mask_objective(state_, batch, labels, ratio, rng);
    return apply(obj, "hybrid_mask");
}

template <typename Scalar>
StepMetrics Trainer<Scalar>::step(const Batch& batch) {
    const auto t0 = std::chrono::steady_clock::now();
    StepMetrics m;
    switch (config_.schedule_kind) {
        case ScheduleKind::tf: m = tf_step(batch); break;
        case ScheduleKind::sar: m = sar_step(batch); break;
        default: m = naive_sf_step(batch, config_.schedule_kind); break;
    }
    m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

#define SAR_INSTANTIATE(S)                                                                                          \
    template LossBreakdown loss_tf<S>(const ForwardPass<S>&, const Batch&, RowMatrix<S>*, double);                  \
    template struct RolloutTrace<S>;                                                                                 \
    template RolloutTrace<S> ssr_rollout<S>(const ModelState<S>&, const Batch&, std::span<const int>,               \
                                            const SamplerConfig&, const Codebook*, Rng&);                            \
    template RolloutTrace<S> rollout_with_bridge<S>(const ModelState<S>&, const Batch&, std::span<const int>,       \
                                                    SsrBridge);                                                      \
    template LossBreakdown loss_csfl<S>(const RolloutTrace<S>&, const Batch&, const TrainConfig&, int,               \
                                        RowMatrix<S>*, RowMatrix<S>*, const RowMatrix<S>*, double);                   \
    template Objective<S> tf_objective<S>(const ModelState<S>&, const Batch&, std::span<const int>);                \
    template Objective<S> sar_objective<S>(const ModelState<S>&, const RolloutTrace<S>&, const Batch&,              \
                                           const TrainConfig&, int, const RowMatrix<S>*);                            \
    template std::vector<SequenceInput> student_inputs<S>(const ModelState<S>&, const Batch&, std::span<const int>, \
                                                          ScheduleKind, int, const SamplerConfig&, const Codebook*, \
                                                          Rng&, NfeCounter*);                                        \
    template Objective<S> naive_sf_objective<S>(const ModelState<S>&, const Batch&, std::span<const int>,           \
                                                ScheduleKind, int, const SamplerConfig&, const Codebook*, Rng&);     \
    template Objective<S> hybrid_mask_objective<S>(const ModelState<S>&, const Batch&, std::span<const int>,        \
                                                   double, Rng&);                                                    \
    template void optimizer_step<S>(std::vector<S>&, std::span<const S>, AdamState<S>&, const TrainConfig&);        \
    template class Trainer<S>;

SAR_INSTANTIATE(float)
SAR_INSTANTIATE(double)

#undef SAR_INSTANTIATE

}  // namespace sar
