#pragma once

// Scale-wise autoregressive transformer: a single parallel pass over all
// scales under a block-causal mask, plus the matching prefix inference.

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sar/pyramid.hpp"

namespace sar {

struct GeneratorConfig {
    ScaleSchedule schedule{std::vector<int>{1, 2, 3, 4}};
    int depth = 4;
    int width = 64;
    int heads = 4;
    int mlp_ratio = 4;
    int vocab = 64;  ///< 0 selects continuous mode (L2 regression of latents)
    int latent_dim = 8;
    int classes = 4;
    double label_drop_prob = 0.1;
    std::uint64_t seed = 0;

    [[nodiscard]] bool discrete() const noexcept { return vocab > 0; }
    [[nodiscard]] int output_dim() const noexcept { return discrete() ? vocab : latent_dim; }
    /// Index of the learned null-class embedding used for guidance.
    [[nodiscard]] int null_label() const noexcept { return classes; }
    /// Throws ConfigError on violated invariants.
    void validate() const;

    friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

/// Flattened token order: position 0 is the start/class token, then each
/// scale in raster order. Scale indices are 1-based; the start token is 0.
struct SequenceLayout {
    struct Position {
        int scale = 0;
        int row = 0;
        int col = 0;
    };
    std::vector<Position> positions;
    std::vector<int> scale_begin;  ///< sequence index of the first token of scale i+1

    [[nodiscard]] int length() const noexcept { return static_cast<int>(positions.size()); }
};

[[nodiscard]] SequenceLayout build_layout(const ScaleSchedule& schedule);

/// allow(q, k) iff scale(k) <= scale(q).
class AttentionMask {
public:
    explicit AttentionMask(const SequenceLayout& layout);
    [[nodiscard]] bool allow(int query, int key) const {
        return key < limit_[static_cast<std::size_t>(query)];
    }
    /// Keys [0, limit(q)) are visible to query q.
    [[nodiscard]] int limit(int query) const { return limit_[static_cast<std::size_t>(query)]; }
    [[nodiscard]] int size() const noexcept { return static_cast<int>(limit_.size()); }

private:
    std::vector<int> limit_;
};

struct ParamBlock {
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;
    [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * cols; }
};

/// Offsets of every named tensor inside the flat parameter vector.
struct ParamLayout {
    struct Layer {
        ParamBlock ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
        ParamBlock ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    ParamBlock start, class_emb, pos_emb;
    std::vector<ParamBlock> in_w, in_b;  ///< per-scale input projections for scales 2..N
    ParamBlock coarse_w, coarse_b, mask_emb;  ///< masked coarse-scale modelling
    std::vector<Layer> layers;
    ParamBlock lnf_g, lnf_b, head_w, head_b;
    std::size_t total = 0;

    [[nodiscard]] std::vector<std::pair<std::string, ParamBlock>> named() const;
};

[[nodiscard]] ParamLayout param_layout(const GeneratorConfig& config);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct ModelState {
    GeneratorConfig config;
    ParamLayout layout;
    std::vector<Scalar> params;

    [[nodiscard]] std::size_t size() const noexcept { return params.size(); }
    [[nodiscard]] Eigen::Map<const RowMatrix<Scalar>> view(const ParamBlock& b) const {
        return {params.data() + b.offset, b.rows, b.cols};
    }
};

/// Truncated-normal (std 0.02, cut at 2 std) weights and embeddings, zero
/// biases, unit LayerNorm gains, zero output head. Deterministic per seed.
template <typename Scalar>
[[nodiscard]] ModelState<Scalar> init_params(const GeneratorConfig& config);

template <typename To, typename From>
[[nodiscard]] ModelState<To> cast_state(const ModelState<From>& state) {
    ModelState<To> out{state.config, state.layout, {}};
    out.params.assign(state.params.begin(), state.params.end());
    return out;
}

/// Counts generator forward evaluations.
class NfeCounter {
public:
    void add(int n = 1) noexcept { count_ += n; }
    [[nodiscard]] int count() const noexcept { return count_; }
    void reset() noexcept { count_ = 0; }

private:
    int count_ = 0;
};

/// Scale-1 tokens for masked coarse-scale modelling: the latent value of
/// each position, and whether it is replaced by the mask embedding.
struct CoarseMaskInput {
    FeatureMap latent;
    std::vector<std::uint8_t> masked;
};

/// Inputs for one sequence. shifted[i] (0-based scale) is the scale-shifted
/// map fed at scale i, of side h_i; shifted[0] is unused because scale 1 is
/// driven by the start token.
struct SequenceInput {
    int label = 0;
    std::vector<FeatureMap> shifted;
    std::optional<CoarseMaskInput> coarse;
};

struct ForwardOptions {
    /// Every position of a scale shares that scale's first positional
    /// embedding (test mode for within-scale permutation equivariance).
    bool constant_positions = false;
    NfeCounter* nfe = nullptr;
};

namespace detail {

template <typename Scalar>
struct LayerCache {
    RowMatrix<Scalar> x_in, xhat1, h1, qkv, attn, x1, xhat2, h2, pre_act, act;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd1, rstd2;
    std::vector<RowMatrix<Scalar>> probs;  ///< one (L x L) matrix per (sample, head)
};

template <typename Scalar>
struct Tape {
    std::vector<LayerCache<Scalar>> layers;
    RowMatrix<Scalar> x_final, xhatf, hf;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstdf;
    std::vector<int> labels;
    std::vector<int> pos_index;                  ///< positional row per sequence index
    std::vector<RowMatrix<Scalar>> scale_inputs;  ///< per scale >= 2: (B*h_i^2) x D
    RowMatrix<Scalar> coarse_in;                  ///< (B*h_1^2) x D, rows of masked positions unused
    std::vector<std::uint8_t> coarse_masked;      ///< empty when coarse mode is off
};

}  // namespace detail

/// Output of one generator evaluation over the first `scales` scales.
template <typename Scalar>
struct ForwardPass {
    int batch = 0;
    int scales = 0;
    int seq_len = 0;
    int tokens = 0;  ///< predicted positions per sequence (start token excluded)
    std::vector<int> scale_offset;
    /// Row b * tokens + scale_offset[i] + p holds the prediction for
    /// position p of scale i (0-based) in sequence b.
    RowMatrix<Scalar> output;
    detail::Tape<Scalar> tape;

    [[nodiscard]] auto scale_rows(int b, int scale, int side) const {
        return output.middleRows(static_cast<Eigen::Index>(b) * tokens + scale_offset[static_cast<std::size_t>(scale)],
                                 static_cast<Eigen::Index>(side) * side);
    }
};

/// One parallel evaluation over scales 1..scales under the block-causal mask.
template <typename Scalar>
[[nodiscard]] ForwardPass<Scalar> forward(const ModelState<Scalar>& state, std::span<const SequenceInput> inputs,
                                          int scales, const ForwardOptions& options = {});

/// Teacher-forced pass over all scales.
template <typename Scalar>
[[nodiscard]] ForwardPass<Scalar> forward_tf(const ModelState<Scalar>& state, std::span<const SequenceInput> inputs,
                                             const ForwardOptions& options = {}) {
    return forward(state, inputs, state.config.schedule.size(), options);
}

/// Prediction for scale `scale` (1-based) from inputs of scales 1..scale,
/// one (h_i^2 x out) matrix per sequence.
template <typename Scalar>
[[nodiscard]] std::vector<RowMatrix<Scalar>> forward_prefix(const ModelState<Scalar>& state,
                                                            std::span<const SequenceInput> inputs, int scale,
                                                            const ForwardOptions& options = {});

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
template <typename Scalar>
void backward(const ModelState<Scalar>& state, const ForwardPass<Scalar>& pass,
              const RowMatrix<Scalar>& d_output, std::span<Scalar> grad);

}  // namespace sar
