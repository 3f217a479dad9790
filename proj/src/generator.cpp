#include "sar/generator.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "sar/errors.hpp"
#include "sar/rng.hpp"

namespace sar {

void GeneratorConfig::validate() const {
    if (depth < 1 || width < 1 || heads < 1 || mlp_ratio < 1) throw ConfigError("generator dimensions must be positive");
    if (width % heads != 0) throw ConfigError("width must be divisible by heads");
    if (vocab < 0) throw ConfigError("vocab must be >= 0");
    if (latent_dim < 1) throw ConfigError("latent_dim must be positive");
    if (classes < 1) throw ConfigError("classes must be positive");
    if (!(label_drop_prob >= 0.0 && label_drop_prob <= 1.0)) throw ConfigError("label_drop_prob must be in [0, 1]");
    if (schedule.size() < 1) throw ConfigError("generator needs a non-empty schedule");
}

SequenceLayout build_layout(const ScaleSchedule& schedule) {
    SequenceLayout layout;
    layout.positions.push_back({0, 0, 0});
    for (int i = 0; i < schedule.size(); ++i) {
        layout.scale_begin.push_back(layout.length());
        const int h = schedule.side(i);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < h; ++c) layout.positions.push_back({i + 1, r, c});
    }
    return layout;
}

AttentionMask::AttentionMask(const SequenceLayout& layout) {
    limit_.resize(layout.positions.size());
    // Scales are contiguous, so the visible keys of a query are a prefix
    // ending at the last token of the query's own scale.
    for (int q = layout.length() - 1; q >= 0; --q) {
        const auto uq = static_cast<std::size_t>(q);
        if (q + 1 < layout.length() && layout.positions[uq + 1].scale == layout.positions[uq].scale) {
            limit_[uq] = limit_[uq + 1];
        } else {
            limit_[uq] = q + 1;
        }
    }
}

std::vector<std::pair<std::string, ParamBlock>> ParamLayout::named() const {
    std::vector<std::pair<std::string, ParamBlock>> out{
        {"start", start}, {"class_emb", class_emb}, {"pos_emb", pos_emb}};
    for (std::size_t i = 0; i < in_w.size(); ++i) {
        out.emplace_back("in_w." + std::to_string(i + 2), in_w[i]);
        out.emplace_back("in_b." + std::to_string(i + 2), in_b[i]);
    }
    out.emplace_back("coarse_w", coarse_w);
    out.emplace_back("coarse_b", coarse_b);
    out.emplace_back("mask_emb", mask_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto p = "layer." + std::to_string(l) + ".";
        const Layer& L = layers[l];
        out.emplace_back(p + "ln1_g", L.ln1_g);
        out.emplace_back(p + "ln1_b", L.ln1_b);
        out.emplace_back(p + "qkv_w", L.qkv_w);
        out.emplace_back(p + "qkv_b", L.qkv_b);
        out.emplace_back(p + "out_w", L.out_w);
        out.emplace_back(p + "out_b", L.out_b);
        out.emplace_back(p + "ln2_g", L.ln2_g);
        out.emplace_back(p + "ln2_b", L.ln2_b);
        out.emplace_back(p + "fc1_w", L.fc1_w);
        out.emplace_back(p + "fc1_b", L.fc1_b);
        out.emplace_back(p + "fc2_w", L.fc2_w);
        out.emplace_back(p + "fc2_b", L.fc2_b);
    }
    out.emplace_back("lnf_g", lnf_g);
    out.emplace_back("lnf_b", lnf_b);
    out.emplace_back("head_w", head_w);
    out.emplace_back("head_b", head_b);
    return out;
}

ParamLayout param_layout(const GeneratorConfig& config) {
    config.validate();
    ParamLayout p;
    std::size_t cursor = 0;
    auto add = [&](int rows, int cols) {
        ParamBlock b{cursor, rows, cols};
        cursor += b.size();
        return b;
    };
    const int W = config.width;
    const int D = config.latent_dim;
    const int M = config.width * config.mlp_ratio;
    p.start = add(1, W);
    p.class_emb = add(config.classes + 1, W);
    p.pos_emb = add(1 + config.schedule.token_count(), W);
    for (int i = 1; i < config.schedule.size(); ++i) {
        p.in_w.push_back(add(D, W));
        p.in_b.push_back(add(1, W));
    }
    p.coarse_w = add(D, W);
    p.coarse_b = add(1, W);
    p.mask_emb = add(1, W);
    for (int l = 0; l < config.depth; ++l) {
        ParamLayout::Layer L;
        L.ln1_g = add(1, W);
        L.ln1_b = add(1, W);
        L.qkv_w = add(W, 3 * W);
        L.qkv_b = add(1, 3 * W);
        L.out_w = add(W, W);
        L.out_b = add(1, W);
        L.ln2_g = add(1, W);
        L.ln2_b = add(1, W);
        L.fc1_w = add(W, M);
        L.fc1_b = add(1, M);
        L.fc2_w = add(M, W);
        L.fc2_b = add(1, W);
        p.layers.push_back(L);
    }
    p.lnf_g = add(1, W);
    p.lnf_b = add(1, W);
    p.head_w = add(W, config.output_dim());
    p.head_b = add(1, config.output_dim());
    p.total = cursor;
    return p;
}

template <typename Scalar>
ModelState<Scalar> init_params(const GeneratorConfig& config) {
    ModelState<Scalar> state{config, param_layout(config), {}};
    state.params.assign(state.layout.total, Scalar(0));
    Rng rng = make_rng(config.seed, "init_params");
    std::normal_distribution<double> normal(0.0, 0.02);
    auto trunc_normal = [&](const ParamBlock& b) {
        for (std::size_t i = 0; i < b.size(); ++i) {
            double v;
            do {
                v = normal(rng);
            } while (std::abs(v) > 0.04);
            state.params[b.offset + i] = static_cast<Scalar>(v);
        }
    };
    auto ones = [&](const ParamBlock& b) {
        std::fill_n(state.params.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size(), Scalar(1));
    };
    const ParamLayout& p = state.layout;
    trunc_normal(p.start);
    trunc_normal(p.class_emb);
    trunc_normal(p.pos_emb);
    for (const auto& b : p.in_w) trunc_normal(b);
    trunc_normal(p.coarse_w);
    trunc_normal(p.mask_emb);
    for (const auto& L : p.layers) {
        ones(L.ln1_g);
        trunc_normal(L.qkv_w);
        trunc_normal(L.out_w);
        ones(L.ln2_g);
        trunc_normal(L.fc1_w);
        trunc_normal(L.fc2_w);
    }
    ones(p.lnf_g);
    // head_w / head_b stay zero: uniform logits (or zero latents) at init.
    return state;
}

template ModelState<float> init_params<float>(const GeneratorConfig&);
template ModelState<double> init_params<double>(const GeneratorConfig&);

// ---------------------------------------------------------------------------

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using ConstMap = Eigen::Map<const RowMatrix<Scalar>>;

template <typename Scalar>
using GradMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
GradMap<Scalar> grad_view(std::span<Scalar> grad, const ParamBlock& b) {
    return {grad.data() + b.offset, b.rows, b.cols};
}

template <typename Scalar>
RowMatrix<Scalar> layer_norm(const RowMatrix<Scalar>& x, const ConstMap<Scalar>& gain, const ConstMap<Scalar>& bias,
                             RowMatrix<Scalar>& xhat, Vec<Scalar>& rstd) {
    const Eigen::Index n = x.rows();
    const Eigen::Index w = x.cols();
    xhat.resize(n, w);
    rstd.resize(n);
    RowMatrix<Scalar> y(n, w);
    for (Eigen::Index r = 0; r < n; ++r) {
        const Scalar mean = x.row(r).mean();
        const Scalar var = (x.row(r).array() - mean).square().mean();
        const Scalar rs = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
        rstd(r) = rs;
        xhat.row(r) = (x.row(r).array() - mean) * rs;
        y.row(r) = xhat.row(r).array() * gain.row(0).array() + bias.row(0).array();
    }
    return y;
}

template <typename Scalar>
RowMatrix<Scalar> layer_norm_backward(const RowMatrix<Scalar>& dy, const RowMatrix<Scalar>& xhat,
                                      const Vec<Scalar>& rstd, const ConstMap<Scalar>& gain, GradMap<Scalar> d_gain,
                                      GradMap<Scalar> d_bias) {
    const Eigen::Index n = dy.rows();
    const Eigen::Index w = dy.cols();
    d_gain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    d_bias.row(0) += dy.colwise().sum();
    RowMatrix<Scalar> dx(n, w);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto dxhat = (dy.row(r).array() * gain.row(0).array()).eval();
        const Scalar s1 = dxhat.sum();
        const Scalar s2 = (dxhat * xhat.row(r).array()).sum();
        dx.row(r) = (rstd(r) / Scalar(w)) * (Scalar(w) * dxhat - s1 - xhat.row(r).array() * s2);
    }
    return dx;
}

template <typename Scalar>
constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)

template <typename Scalar>
Scalar gelu(Scalar a) {
    const Scalar t = std::tanh(kGeluC<Scalar> * (a + Scalar(0.044715) * a * a * a));
    return Scalar(0.5) * a * (Scalar(1) + t);
}

template <typename Scalar>
Scalar gelu_grad(Scalar a) {
    const Scalar t = std::tanh(kGeluC<Scalar> * (a + Scalar(0.044715) * a * a * a));
    return Scalar(0.5) * (Scalar(1) + t) +
           Scalar(0.5) * a * (Scalar(1) - t * t) * kGeluC<Scalar> * (Scalar(1) + Scalar(3 * 0.044715) * a * a);
}

// Per-forward derived indexing.
struct Geometry {
    int batch = 0, scales = 0, tokens = 0, seq = 0;
    std::vector<int> offset;     // token offset per scale
    std::vector<int> seq_scale;  // 0 for start, i+1 for scale i
    std::vector<int> limit;      // visible-key prefix per query
    std::vector<int> pos_index;  // positional-embedding row per sequence index
};

Geometry make_geometry(const ScaleSchedule& schedule, int batch, int scales, bool constant_positions) {
    Geometry g;
    g.batch = batch;
    g.scales = scales;
    g.tokens = schedule.token_count(scales);
    g.seq = g.tokens + 1;
    for (int i = 0; i < scales; ++i) g.offset.push_back(schedule.offset(i));
    g.seq_scale.assign(static_cast<std::size_t>(g.seq), 0);
    g.limit.assign(static_cast<std::size_t>(g.seq), 1);
    g.pos_index.assign(static_cast<std::size_t>(g.seq), 0);
    for (int i = 0; i < scales; ++i) {
        const int begin = 1 + g.offset[static_cast<std::size_t>(i)];
        const int end = begin + schedule.side(i) * schedule.side(i);
        for (int q = begin; q < end; ++q) {
            g.seq_scale[static_cast<std::size_t>(q)] = i + 1;
            g.limit[static_cast<std::size_t>(q)] = end;
            g.pos_index[static_cast<std::size_t>(q)] = constant_positions ? begin : q;
        }
    }
    return g;
}

}  // namespace

template <typename Scalar>
ForwardPass<Scalar> forward(const ModelState<Scalar>& state, std::span<const SequenceInput> inputs, int scales,
                            const ForwardOptions& options) {
    const GeneratorConfig& cfg = state.config;
    const ScaleSchedule& schedule = cfg.schedule;
    const ParamLayout& P = state.layout;
    if (scales < 1 || scales > schedule.size()) throw UsageError("forward: scale count outside schedule");
    if (inputs.empty()) throw UsageError("forward: empty batch");
    const int B = static_cast<int>(inputs.size());
    const int W = cfg.width;
    const int H = cfg.heads;
    const int dh = W / H;
    const int D = cfg.latent_dim;
    const bool coarse = inputs.front().coarse.has_value();
    for (const auto& in : inputs) {
        if (in.label < 0 || in.label > cfg.null_label()) throw UsageError("forward: label out of range");
        if (in.coarse.has_value() != coarse) throw UsageError("forward: coarse-mask input must be set for all or none");
        if (static_cast<int>(in.shifted.size()) < scales && scales > 1) {
            throw UsageError("forward: missing scale-shifted inputs");
        }
        for (int i = 1; i < scales; ++i) {
            const FeatureMap& m = in.shifted[static_cast<std::size_t>(i)];
            if (m.side != schedule.side(i) || m.channels != D) {
                throw UsageError("forward: input map " + std::to_string(i + 1) + " does not match the schedule");
            }
        }
        if (coarse) {
            const int h1 = schedule.side(0);
            if (in.coarse->latent.side != h1 || in.coarse->latent.channels != D ||
                static_cast<int>(in.coarse->masked.size()) != h1 * h1) {
                throw UsageError("forward: coarse-mask input does not match scale 1");
            }
        }
    }
    if (options.nfe != nullptr) options.nfe->add();

    const Geometry g = make_geometry(schedule, B, scales, options.constant_positions);
    const int L = g.seq;
    ForwardPass<Scalar> pass;
    pass.batch = B;
    pass.scales = scales;
    pass.seq_len = L;
    pass.tokens = g.tokens;
    pass.scale_offset = g.offset;
    auto& tape = pass.tape;
    tape.pos_index = g.pos_index;
    for (const auto& in : inputs) tape.labels.push_back(in.label);

    // ---- embeddings
    const auto start = state.view(P.start);
    const auto cls = state.view(P.class_emb);
    const auto pos = state.view(P.pos_emb);
    RowMatrix<Scalar> x(static_cast<Eigen::Index>(B) * L, W);
    for (int b = 0; b < B; ++b) {
        const auto c = cls.row(inputs[static_cast<std::size_t>(b)].label);
        for (int q = 0; q < L; ++q) {
            x.row(static_cast<Eigen::Index>(b) * L + q) = c + pos.row(g.pos_index[static_cast<std::size_t>(q)]);
        }
        x.row(static_cast<Eigen::Index>(b) * L) += start.row(0);
    }
    const int h1sq = schedule.side(0) * schedule.side(0);
    if (coarse) {
        tape.coarse_in = RowMatrix<Scalar>::Zero(static_cast<Eigen::Index>(B) * h1sq, D);
        tape.coarse_masked.resize(static_cast<std::size_t>(B) * h1sq);
        for (int b = 0; b < B; ++b) {
            const auto& ci = *inputs[static_cast<std::size_t>(b)].coarse;
            for (int p = 0; p < h1sq; ++p) {
                const auto idx = static_cast<std::size_t>(b) * h1sq + p;
                tape.coarse_masked[idx] = ci.masked[static_cast<std::size_t>(p)] != 0 ? 1 : 0;
                if (tape.coarse_masked[idx] == 0) {
                    for (int d = 0; d < D; ++d) {
                        tape.coarse_in(static_cast<Eigen::Index>(idx), d) =
                            static_cast<Scalar>(ci.latent.values[static_cast<std::size_t>(p) * D + d]);
                    }
                }
            }
        }
        const RowMatrix<Scalar> proj = (tape.coarse_in * state.view(P.coarse_w)).rowwise() + state.view(P.coarse_b).row(0);
        const auto mask = state.view(P.mask_emb);
        for (int b = 0; b < B; ++b) {
            for (int p = 0; p < h1sq; ++p) {
                const auto idx = static_cast<Eigen::Index>(b) * h1sq + p;
                const auto row = static_cast<Eigen::Index>(b) * L + 1 + p;
                if (tape.coarse_masked[static_cast<std::size_t>(idx)] != 0) {
                    x.row(row) += mask.row(0);
                } else {
                    x.row(row) += proj.row(idx);
                }
            }
        }
    } else {
        for (int b = 0; b < B; ++b)
            for (int p = 0; p < h1sq; ++p) x.row(static_cast<Eigen::Index>(b) * L + 1 + p) += start.row(0);
    }
    tape.scale_inputs.resize(static_cast<std::size_t>(scales));
    for (int i = 1; i < scales; ++i) {
        const int hsq = schedule.side(i) * schedule.side(i);
        RowMatrix<Scalar>& U = tape.scale_inputs[static_cast<std::size_t>(i)];
        U.resize(static_cast<Eigen::Index>(B) * hsq, D);
        for (int b = 0; b < B; ++b) {
            const auto& vals = inputs[static_cast<std::size_t>(b)].shifted[static_cast<std::size_t>(i)].values;
            for (int p = 0; p < hsq; ++p)
                for (int d = 0; d < D; ++d)
                    U(static_cast<Eigen::Index>(b) * hsq + p, d) = static_cast<Scalar>(vals[static_cast<std::size_t>(p) * D + d]);
        }
        const RowMatrix<Scalar> proj =
            (U * state.view(P.in_w[static_cast<std::size_t>(i - 1)])).rowwise() + state.view(P.in_b[static_cast<std::size_t>(i - 1)]).row(0);
        const int begin = 1 + g.offset[static_cast<std::size_t>(i)];
        for (int b = 0; b < B; ++b) {
            x.middleRows(static_cast<Eigen::Index>(b) * L + begin, hsq) += proj.middleRows(static_cast<Eigen::Index>(b) * hsq, hsq);
        }
    }

    // ---- transformer blocks
    const Scalar attn_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    tape.layers.resize(P.layers.size());
    for (std::size_t l = 0; l < P.layers.size(); ++l) {
        const auto& LP = P.layers[l];
        auto& c = tape.layers[l];
        c.x_in = x;
        c.h1 = layer_norm<Scalar>(x, state.view(LP.ln1_g), state.view(LP.ln1_b), c.xhat1, c.rstd1);
        c.qkv = (c.h1 * state.view(LP.qkv_w)).rowwise() + state.view(LP.qkv_b).row(0);
        c.attn.resize(x.rows(), W);
        c.probs.resize(static_cast<std::size_t>(B) * H);
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const auto Q = c.qkv.block(static_cast<Eigen::Index>(b) * L, h * dh, L, dh);
                const auto K = c.qkv.block(static_cast<Eigen::Index>(b) * L, W + h * dh, L, dh);
                const auto V = c.qkv.block(static_cast<Eigen::Index>(b) * L, 2 * W + h * dh, L, dh);
                RowMatrix<Scalar> S = (Q * K.transpose()) * attn_scale;
                RowMatrix<Scalar>& Pm = c.probs[static_cast<std::size_t>(b) * H + h];
                Pm = RowMatrix<Scalar>::Zero(L, L);
                for (int q = 0; q < L; ++q) {
                    const int lim = g.limit[static_cast<std::size_t>(q)];
                    const Scalar m = S.row(q).head(lim).maxCoeff();
                    Scalar sum = 0;
                    for (int k = 0; k < lim; ++k) {
                        const Scalar e = std::exp(S(q, k) - m);
                        Pm(q, k) = e;
                        sum += e;
                    }
                    Pm.row(q).head(lim) /= sum;
                }
                c.attn.block(static_cast<Eigen::Index>(b) * L, h * dh, L, dh) = Pm * V;
            }
        }
        c.x1 = x + ((c.attn * state.view(LP.out_w)).rowwise() + state.view(LP.out_b).row(0));
        c.h2 = layer_norm<Scalar>(c.x1, state.view(LP.ln2_g), state.view(LP.ln2_b), c.xhat2, c.rstd2);
        c.pre_act = (c.h2 * state.view(LP.fc1_w)).rowwise() + state.view(LP.fc1_b).row(0);
        c.act = c.pre_act.unaryExpr([](Scalar a) { return gelu(a); });
        x = c.x1 + ((c.act * state.view(LP.fc2_w)).rowwise() + state.view(LP.fc2_b).row(0));
    }
    tape.x_final = x;
    tape.hf = layer_norm<Scalar>(x, state.view(P.lnf_g), state.view(P.lnf_b), tape.xhatf, tape.rstdf);

    // ---- output head (start-token rows dropped)
    const int out_dim = cfg.output_dim();
    pass.output.resize(static_cast<Eigen::Index>(B) * g.tokens, out_dim);
    const auto head_w = state.view(P.head_w);
    const auto head_b = state.view(P.head_b);
    for (int b = 0; b < B; ++b) {
        pass.output.middleRows(static_cast<Eigen::Index>(b) * g.tokens, g.tokens) =
            (tape.hf.middleRows(static_cast<Eigen::Index>(b) * L + 1, g.tokens) * head_w).rowwise() + head_b.row(0);
    }
    return pass;
}

template <typename Scalar>
std::vector<RowMatrix<Scalar>> forward_prefix(const ModelState<Scalar>& state, std::span<const SequenceInput> inputs,
                                              int scale, const ForwardOptions& options) {
    if (scale < 1 || scale > state.config.schedule.size()) throw UsageError("forward_prefix: scale outside schedule");
    const ForwardPass<Scalar> pass = forward(state, inputs, scale, options);
    const int side = state.config.schedule.side(scale - 1);
    std::vector<RowMatrix<Scalar>> out;
    out.reserve(inputs.size());
    for (int b = 0; b < pass.batch; ++b) out.emplace_back(pass.scale_rows(b, scale - 1, side));
    return out;
}

template <typename Scalar>
void backward(const ModelState<Scalar>& state, const ForwardPass<Scalar>& pass, const RowMatrix<Scalar>& d_output,
              std::span<Scalar> out) {
    const GeneratorConfig& cfg = state.config;
    const ParamLayout& P = state.layout;
    if (out.size() != state.params.size()) throw UsageError("backward: gradient buffer size mismatch");
    // Eigen's reduction order depends on the destination's alignment, so the
    // gradient is built in an owned buffer and added to `out` elementwise.
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> acc = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(
        static_cast<Eigen::Index>(out.size()));
    const std::span<Scalar> grad(acc.data(), out.size());
    if (d_output.rows() != pass.output.rows() || d_output.cols() != pass.output.cols()) {
        throw UsageError("backward: d_output shape mismatch");
    }
    const auto& tape = pass.tape;
    const int B = pass.batch;
    const int L = pass.seq_len;
    const int W = cfg.width;
    const int H = cfg.heads;
    const int dh = W / H;
    const ScaleSchedule& schedule = cfg.schedule;
    const Geometry g = make_geometry(schedule, B, pass.scales, false);

    // ---- head
    RowMatrix<Scalar> d_full = RowMatrix<Scalar>::Zero(static_cast<Eigen::Index>(B) * L, cfg.output_dim());
    for (int b = 0; b < B; ++b) {
        d_full.middleRows(static_cast<Eigen::Index>(b) * L + 1, pass.tokens) =
            d_output.middleRows(static_cast<Eigen::Index>(b) * pass.tokens, pass.tokens);
    }
    grad_view(grad, P.head_w).noalias() += tape.hf.transpose() * d_full;
    grad_view(grad, P.head_b).row(0) += d_full.colwise().sum();
    RowMatrix<Scalar> dx = d_full * state.view(P.head_w).transpose();
    dx = layer_norm_backward<Scalar>(dx, tape.xhatf, tape.rstdf, state.view(P.lnf_g), grad_view(grad, P.lnf_g),
                                     grad_view(grad, P.lnf_b));

    // ---- blocks
    const Scalar attn_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    for (std::size_t li = P.layers.size(); li-- > 0;) {
        const auto& LP = P.layers[li];
        const auto& c = tape.layers[li];
        // MLP
        grad_view(grad, LP.fc2_w).noalias() += c.act.transpose() * dx;
        grad_view(grad, LP.fc2_b).row(0) += dx.colwise().sum();
        RowMatrix<Scalar> d_pre = dx * state.view(LP.fc2_w).transpose();
        d_pre.array() *= c.pre_act.unaryExpr([](Scalar a) { return gelu_grad(a); }).array();
        grad_view(grad, LP.fc1_w).noalias() += c.h2.transpose() * d_pre;
        grad_view(grad, LP.fc1_b).row(0) += d_pre.colwise().sum();
        RowMatrix<Scalar> dh2 = d_pre * state.view(LP.fc1_w).transpose();
        RowMatrix<Scalar> dx1 = dx + layer_norm_backward<Scalar>(dh2, c.xhat2, c.rstd2, state.view(LP.ln2_g),
                                                                 grad_view(grad, LP.ln2_g), grad_view(grad, LP.ln2_b));
        // attention
        grad_view(grad, LP.out_w).noalias() += c.attn.transpose() * dx1;
        grad_view(grad, LP.out_b).row(0) += dx1.colwise().sum();
        const RowMatrix<Scalar> d_attn = dx1 * state.view(LP.out_w).transpose();
        RowMatrix<Scalar> d_qkv(c.qkv.rows(), c.qkv.cols());
        for (int b = 0; b < B; ++b) {
            for (int h = 0; h < H; ++h) {
                const auto r0 = static_cast<Eigen::Index>(b) * L;
                const auto Q = c.qkv.block(r0, h * dh, L, dh);
                const auto K = c.qkv.block(r0, W + h * dh, L, dh);
                const auto V = c.qkv.block(r0, 2 * W + h * dh, L, dh);
                const RowMatrix<Scalar>& Pm = c.probs[static_cast<std::size_t>(b) * H + h];
                const auto dO = d_attn.block(r0, h * dh, L, dh);
                const RowMatrix<Scalar> dP = dO * V.transpose();
                d_qkv.block(r0, 2 * W + h * dh, L, dh) = Pm.transpose() * dO;
                RowMatrix<Scalar> dS(L, L);
                for (int q = 0; q < L; ++q) {
                    const Scalar dot = (dP.row(q).array() * Pm.row(q).array()).sum();
                    dS.row(q) = Pm.row(q).array() * (dP.row(q).array() - dot);
                }
                dS *= attn_scale;
                d_qkv.block(r0, h * dh, L, dh) = dS * K;
                d_qkv.block(r0, W + h * dh, L, dh) = dS.transpose() * Q;
            }
        }
        grad_view(grad, LP.qkv_w).noalias() += c.h1.transpose() * d_qkv;
        grad_view(grad, LP.qkv_b).row(0) += d_qkv.colwise().sum();
        RowMatrix<Scalar> dh1 = d_qkv * state.view(LP.qkv_w).transpose();
        dx = dx1 + layer_norm_backward<Scalar>(dh1, c.xhat1, c.rstd1, state.view(LP.ln1_g), grad_view(grad, LP.ln1_g),
                                               grad_view(grad, LP.ln1_b));
    }

    // ---- embeddings
    auto d_start = grad_view(grad, P.start);
    auto d_cls = grad_view(grad, P.class_emb);
    auto d_pos = grad_view(grad, P.pos_emb);
    const bool coarse = !tape.coarse_masked.empty();
    const int h1sq = schedule.side(0) * schedule.side(0);
    for (int b = 0; b < B; ++b) {
        const auto r0 = static_cast<Eigen::Index>(b) * L;
        d_cls.row(tape.labels[static_cast<std::size_t>(b)]) += dx.middleRows(r0, L).colwise().sum();
        for (int q = 0; q < L; ++q) d_pos.row(tape.pos_index[static_cast<std::size_t>(q)]) += dx.row(r0 + q);
        d_start.row(0) += dx.row(r0);
        if (!coarse) d_start.row(0) += dx.middleRows(r0 + 1, h1sq).colwise().sum();
    }
    if (coarse) {
        RowMatrix<Scalar> d_proj = RowMatrix<Scalar>::Zero(static_cast<Eigen::Index>(B) * h1sq, W);
        auto d_mask = grad_view(grad, P.mask_emb);
        for (int b = 0; b < B; ++b) {
            for (int p = 0; p < h1sq; ++p) {
                const auto idx = static_cast<Eigen::Index>(b) * h1sq + p;
                const auto row = static_cast<Eigen::Index>(b) * L + 1 + p;
                if (tape.coarse_masked[static_cast<std::size_t>(idx)] != 0) {
                    d_mask.row(0) += dx.row(row);
                } else {
                    d_proj.row(idx) = dx.row(row);
                }
            }
        }
        grad_view(grad, P.coarse_w).noalias() += tape.coarse_in.transpose() * d_proj;
        grad_view(grad, P.coarse_b).row(0) += d_proj.colwise().sum();
    }
    for (int i = 1; i < pass.scales; ++i) {
        const int hsq = schedule.side(i) * schedule.side(i);
        const int begin = 1 + g.offset[static_cast<std::size_t>(i)];
        RowMatrix<Scalar> d_proj(static_cast<Eigen::Index>(B) * hsq, W);
        for (int b = 0; b < B; ++b) {
            d_proj.middleRows(static_cast<Eigen::Index>(b) * hsq, hsq) =
                dx.middleRows(static_cast<Eigen::Index>(b) * L + begin, hsq);
        }
        grad_view(grad, P.in_w[static_cast<std::size_t>(i - 1)]).noalias() +=
            tape.scale_inputs[static_cast<std::size_t>(i)].transpose() * d_proj;
        grad_view(grad, P.in_b[static_cast<std::size_t>(i - 1)]).row(0) += d_proj.colwise().sum();
    }
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += grad[k];
}

template ForwardPass<float> forward<float>(const ModelState<float>&, std::span<const SequenceInput>, int,
                                           const ForwardOptions&);
template ForwardPass<double> forward<double>(const ModelState<double>&, std::span<const SequenceInput>, int,
                                             const ForwardOptions&);
template std::vector<RowMatrix<float>> forward_prefix<float>(const ModelState<float>&, std::span<const SequenceInput>,
                                                             int, const ForwardOptions&);
template std::vector<RowMatrix<double>> forward_prefix<double>(const ModelState<double>&,
                                                               std::span<const SequenceInput>, int,
                                                               const ForwardOptions&);
template void backward<float>(const ModelState<float>&, const ForwardPass<float>&, const RowMatrix<float>&,
                              std::span<float>);
template void backward<double>(const ModelState<double>&, const ForwardPass<double>&, const RowMatrix<double>&,
                               std::span<double>);

}  // namespace sar
