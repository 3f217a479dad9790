#pragma once

// Training schemes for the scale-wise generator: teacher forcing, the naive
// student-forcing schedules, the two-pass stagger-scale rollout with the
// contrastive student-forcing loss, masked coarse-scale modelling, AdamW.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sar/generator.hpp"
#include "sar/pyramid.hpp"
#include "sar/sampling.hpp"

namespace sar {

enum class ScheduleKind { tf, sf_full, sf_alternate, sf_interleave, sf_hybrid, sar };
enum class CsflTarget { teacher, ground_truth };
enum class SfScales { all, single_random_k };

[[nodiscard]] std::string to_string(ScheduleKind kind);
/// Accepts "tf", "sf_full", "sf_alternate", "sf_interleave", "sf_hybrid", "sar".
[[nodiscard]] ScheduleKind parse_schedule_kind(const std::string& text);

struct TrainConfig {
    double gamma = 0.5;
    CsflTarget csfl_target = CsflTarget::teacher;
    /// When false the continuous teacher target also receives gradient.
    bool csfl_detach = true;
    SfScales sf_scales = SfScales::all;
    /// Also drives the naive SF schedules, which sample without guidance.
    SamplerConfig sampler_for_ssr = SamplerConfig::nucleus_guided();
    ScheduleKind schedule_kind = ScheduleKind::tf;
    int hybrid_k = 1;  ///< last ground-truth-fed scale for sf_hybrid (1-based)
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.05;
    double eps = 1e-8;
    int steps = 2000;
    int batch = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

/// One dataset item prepared for training: targets at every scale and the
/// teacher-forced (scale-shifted ground-truth) inputs.
struct TrainingExample {
    int label = 0;
    LatentPyramid gt;          ///< f_i; dequantized tokens in discrete mode
    TokenPyramid tokens;       ///< empty in continuous mode
    std::vector<FeatureMap> tf_inputs;  ///< [0] empty, [i] = upsample(f_{i-1} -> h_i)
};

/// Quantizes (when a codebook is given) and builds the shifted inputs.
[[nodiscard]] TrainingExample prepare_example(int label, const LatentPyramid& pyramid, const Codebook* codebook,
                                              const ScaleSchedule& schedule);

using Batch = std::vector<const TrainingExample*>;

struct LossBreakdown {
    double total = 0.0;
    std::vector<double> per_scale;  ///< batch-mean loss per scale (0 where unsupervised)
};

/// Mean-per-token cross-entropy (discrete) or mean-per-element squared
/// error (continuous) per scale, summed over scales, averaged over the
/// batch. When `d_out` is given, adds weight * d(loss)/d(output) to it.
template <typename Scalar>
[[nodiscard]] LossBreakdown loss_tf(const ForwardPass<Scalar>& pass, const Batch& batch,
                                    RowMatrix<Scalar>* d_out = nullptr, double weight = 1.0);

/// The sampled bridge between the two passes: per-sequence sampled tokens
/// and latents of every scale, and the resulting student-forced inputs.
struct SsrBridge {
    std::vector<std::vector<TokenMap>> tokens;   ///< empty in continuous mode
    std::vector<std::vector<FeatureMap>> latents;
    std::vector<SequenceInput> sf_inputs;
};

template <typename Scalar>
struct RolloutTrace {
    ForwardPass<Scalar> tf_pass;  ///< teacher-forced predictions, all scales
    SsrBridge bridge;
    ForwardPass<Scalar> sf_pass;  ///< student-forced predictions; scales >= 2 are meaningful
    int nfe = 0;

    /// Student-forced prediction rows of sequence b at 0-based scale i >= 1.
    [[nodiscard]] RowMatrix<Scalar> sf_pred(int b, int scale) const;
};

/// Per-sequence labels for a step: the class, or the null label with
/// probability label_drop_prob, drawn from stream (seed, "labels", step).
[[nodiscard]] std::vector<int> step_labels(const GeneratorConfig& config, const Batch& batch, std::uint64_t seed,
                                           std::int64_t step);

[[nodiscard]] std::vector<SequenceInput> teacher_inputs(const Batch& batch, std::span<const int> labels);

/// Pass 1 on ground-truth inputs, sample every scale, upsample/shift the
/// samples, pass 2 on the shifted samples. Samples carry no gradient.
/// A guided sampler costs one extra null-label forward for pass 1.
template <typename Scalar>
[[nodiscard]] RolloutTrace<Scalar> ssr_rollout(const ModelState<Scalar>& state, const Batch& batch,
                                               std::span<const int> labels, const SamplerConfig& sampler,
                                               const Codebook* codebook, Rng& rng);

/// Re-runs both passes with a fixed bridge (for gradient checks).
template <typename Scalar>
[[nodiscard]] RolloutTrace<Scalar> rollout_with_bridge(const ModelState<Scalar>& state, const Batch& batch,
                                                       std::span<const int> labels, SsrBridge bridge);

/// Contrastive student-forcing loss over scales 2..N (or the single 0-based
/// scale `only_scale` when >= 1). Teacher mode targets the sampled teacher
/// tokens (discrete) or the teacher predictions (continuous); ground-truth
/// mode targets the pyramid. `frozen_teacher` overrides the continuous
/// teacher target; `d_tf` receives the teacher-side gradient only in the
/// undetached continuous mode.
template <typename Scalar>
[[nodiscard]] LossBreakdown loss_csfl(const RolloutTrace<Scalar>& trace, const Batch& batch, const TrainConfig& config,
                                      int only_scale = -1, RowMatrix<Scalar>* d_sf = nullptr,
                                      RowMatrix<Scalar>* d_tf = nullptr, const RowMatrix<Scalar>* frozen_teacher = nullptr,
                                      double weight = 1.0);

struct MaskRatioSchedule {
    enum class Kind { cosine, fixed };
    Kind kind = Kind::cosine;
    double value = 1.0;  ///< ratio for Kind::fixed

    /// cosine: cos(pi/2 * u), u ~ U[0, 1).
    [[nodiscard]] double draw(Rng& rng) const;
};

/// Loss and gradient of one objective evaluation, before any update.
template <typename Scalar>
struct Objective {
    double loss = 0.0;
    LossBreakdown tf;
    LossBreakdown csf;
    std::vector<Scalar> grad;
    int nfe = 0;
};

template <typename Scalar>
[[nodiscard]] Objective<Scalar> tf_objective(const ModelState<Scalar>& state, const Batch& batch,
                                             std::span<const int> labels);

/// L_TF + gamma * L_CSF from an existing trace.
template <typename Scalar>
[[nodiscard]] Objective<Scalar> sar_objective(const ModelState<Scalar>& state, const RolloutTrace<Scalar>& trace,
                                              const Batch& batch, const TrainConfig& config, int only_scale = -1,
                                              const RowMatrix<Scalar>* frozen_teacher = nullptr);

/// Inputs of the naive student-forcing schedules. `first_sampled` (0-based)
/// is the first scale fed by samples for hybrid/full; interleave feeds
/// samples to every even 1-based scale. Runs the sequential prefix forwards
/// that produce the samples and returns the final full-sequence inputs.
template <typename Scalar>
[[nodiscard]] std::vector<SequenceInput> student_inputs(const ModelState<Scalar>& state, const Batch& batch,
                                                        std::span<const int> labels, ScheduleKind kind,
                                                        int first_sampled, const SamplerConfig& sampler,
                                                        const Codebook* codebook, Rng& rng, NfeCounter* nfe);

template <typename Scalar>
[[nodiscard]] Objective<Scalar> naive_sf_objective(const ModelState<Scalar>& state, const Batch& batch,
                                                   std::span<const int> labels, ScheduleKind kind, int hybrid_k,
                                                   const SamplerConfig& sampler, const Codebook* codebook, Rng& rng);

/// Scale-1 positions masked at `ratio` (chosen from rng) and predicted from
/// the unmasked ones; scales 2..N trained teacher-forced. Scale-1 loss is
/// the mean cross-entropy over masked positions only.
template <typename Scalar>
[[nodiscard]] Objective<Scalar> hybrid_mask_objective(const ModelState<Scalar>& state, const Batch& batch,
                                                      std::span<const int> labels, double ratio, Rng& rng);

template <typename Scalar>
struct AdamState {
    std::vector<Scalar> m;
    std::vector<Scalar> v;
    std::int64_t step = 0;
};

/// AdamW: params *= (1 - lr * wd), then the bias-corrected Adam update.
/// Throws NonFiniteError (leaving everything untouched) on non-finite grads.
template <typename Scalar>
void optimizer_step(std::vector<Scalar>& params, std::span<const Scalar> grads, AdamState<Scalar>& adam,
                    const TrainConfig& config);

struct StepMetrics {
    std::int64_t step = 0;
    std::string scheme;
    double loss_tf = 0.0;
    double loss_csf = 0.0;
    int nfe = 0;
    double wall_time = 0.0;
};

/// Owns a model in training: parameters, AdamW moments, and the step counter
/// from which every per-step random stream is derived.
template <typename Scalar>
class Trainer {
public:
    /// `codebook` must outlive the trainer (required in discrete mode).
    Trainer(ModelState<Scalar> state, TrainConfig config, const Codebook* codebook);
    Trainer(ModelState<Scalar> state, AdamState<Scalar> adam, TrainConfig config, const Codebook* codebook);

    /// One update of the configured scheme on `batch`.
    StepMetrics step(const Batch& batch);

    StepMetrics tf_step(const Batch& batch);
    StepMetrics sar_step(const Batch& batch);
    StepMetrics naive_sf_step(const Batch& batch, ScheduleKind kind);
    StepMetrics hybrid_mask_step(const Batch& batch, const MaskRatioSchedule& ratios);

    /// Seeded batch of indices for the current step.
    [[nodiscard]] Batch sample_batch(std::span<const TrainingExample> data) const;

    [[nodiscard]] const ModelState<Scalar>& state() const noexcept { return state_; }
    [[nodiscard]] const AdamState<Scalar>& adam() const noexcept { return adam_; }
    [[nodiscard]] const TrainConfig& config() const noexcept { return config_; }
    void set_config(TrainConfig config);
    [[nodiscard]] std::int64_t iteration() const noexcept { return iteration_; }
    void set_iteration(std::int64_t it) noexcept { iteration_ = it; }

private:
    StepMetrics apply(Objective<Scalar>& objective, const std::string& scheme);

    ModelState<Scalar> state_;
    AdamState<Scalar> adam_;
    TrainConfig config_;
    const Codebook* codebook_ = nullptr;
    std::int64_t iteration_ = 0;
};

}  // namespace sar
