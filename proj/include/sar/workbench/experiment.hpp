#pragma once

// Experiment orchestration: data preparation, training runs, evaluation,
// the two ablations, and the artifact files written around them.

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sar/evaluation.hpp"
#include "sar/training.hpp"
#include "sar/workbench/checkpoint.hpp"
#include "sar/workbench/config.hpp"
#include "sar/workbench/dataset.hpp"

namespace sar::workbench {

/// Everything derived from an ExperimentConfig before training starts.
struct Workspace {
    ExperimentConfig config;
    PatchEmbed embed;
    std::optional<Codebook> codebook;
    std::vector<TrainingExample> train;
    std::vector<TrainingExample> reference;  ///< held-out set for evaluation
    FeatureExtractor features;

    [[nodiscard]] const Codebook* codebook_ptr() const { return codebook ? &*codebook : nullptr; }
    [[nodiscard]] EvalContext eval_context() const;
    /// The evaluation sampler with its seed derived from the config seed.
    [[nodiscard]] SamplerConfig eval_sampler() const;
    /// The configured TrainConfig with its seed set to the config seed.
    [[nodiscard]] TrainConfig train_config() const;
};

/// Builds datasets, the fixed encoder, the codebook and all pyramids.
/// Passing `embed`/`codebook` (from a checkpoint) reuses them instead of
/// deriving new ones.
[[nodiscard]] Workspace prepare_workspace(const ExperimentConfig& config, const PatchEmbed* embed = nullptr,
                                          const Codebook* codebook = nullptr);

/// Freshly initialized model with zero optimizer state.
[[nodiscard]] Checkpoint fresh_checkpoint(const Workspace& ws);

struct EvalRecord {
    std::string scheme;
    std::int64_t step = 0;
    EvalResult result;
};

struct RunOptions {
    /// When non-empty: metrics.csv, timing.csv, eval.csv and config.txt are
    /// written here (the directory must be locked by the caller).
    std::string out_dir;
    /// Scheme name used for evaluation rows; defaults to the schedule kind.
    std::string label;
    bool evaluate_at_end = true;
    std::ostream* log = nullptr;
    int log_every = 100;
};

struct RunResult {
    Checkpoint checkpoint;
    std::vector<StepMetrics> steps;
    std::vector<EvalRecord> evals;
};

/// Continues `start` for `train.steps` updates of `train.schedule_kind`
/// (or masked coarse-scale steps when enabled in the workspace config).
[[nodiscard]] RunResult run_training(const Workspace& ws, Checkpoint start, const TrainConfig& train,
                                     const RunOptions& options = {});

[[nodiscard]] EvalResult evaluate_checkpoint(const Workspace& ws, const Checkpoint& ckpt,
                                             std::optional<SamplerConfig> sampler = std::nullopt);

struct AblationRow {
    std::string scheme;
    EvalResult eval;
    double nfe_per_step = 0.0;
    double final_loss_tf = 0.0;
};

/// TF, full SF, alternate, interleave and hybrid(N-1), each continued from
/// `start` for `steps` updates.
[[nodiscard]] std::vector<AblationRow> ablate_sf(const Workspace& ws, const Checkpoint& start, int steps,
                                                 std::ostream* log = nullptr);

/// SAR refinement from `start` with the rollout sampler set to argmax,
/// stochastic, and stochastic with guidance at `cfg_scale`.
[[nodiscard]] std::vector<AblationRow> ablate_sampling(const Workspace& ws, const Checkpoint& start, int steps,
                                                       double cfg_scale = 2.5, std::ostream* log = nullptr);

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path);

/// Exclusive ownership of an output directory through an O_EXCL lockfile.
class OutputLock {
public:
    explicit OutputLock(const std::string& dir);
    ~OutputLock();
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

private:
    std::string path_;
};

/// Binary PGM (C = 1) or PPM (C = 3); values clamped to [0, 1] and scaled
/// to 0..255 with rounding.
void write_pnm(const Image& image, const std::string& path);
[[nodiscard]] std::string pnm_bytes(const Image& image);

/// Plain-text grid dump: one block per scale ("scale i h"), one row per line.
[[nodiscard]] std::string token_dump(const TokenPyramid& tokens);

/// Plots and a markdown summary for every known CSV in `dir`.
void write_report(const std::string& dir, std::ostream* warnings = nullptr);

}  // namespace sar::workbench
