#include "sar/workbench/dataset.hpp"

#include <cmath>
#include <numbers>

#include "sar/errors.hpp"
#include "sar/rng.hpp"

namespace sar::workbench {

std::string to_string(Family family) {
    switch (family) {
        case Family::blobs: return "blobs";
        case Family::stripes: return "stripes";
        case Family::rings: return "rings";
    }
    return "unknown";
}

Family parse_family(const std::string& text) {
    for (auto f : {Family::blobs, Family::stripes, Family::rings}) {
        if (to_string(f) == text) return f;
    }
    throw ConfigError("unknown dataset family '" + text + "'");
}

void SyntheticDatasetSpec::validate() const {
    if (classes < 1) throw ConfigError("dataset.classes must be >= 1");
    if (side < 1 || channels < 1) throw ConfigError("dataset side and channels must be >= 1");
    if (size < 0) throw ConfigError("dataset.size must be >= 0");
    if (!params.empty() && static_cast<int>(params.size()) != classes) {
        throw ConfigError("dataset: one parameter set per class is required");
    }
    for (const ClassParams& p : params) {
        if (p.u.hi < p.u.lo || p.v.hi < p.v.lo) throw ConfigError("dataset: parameter ranges must have lo <= hi");
        if (!(p.width > 0.0)) throw ConfigError("dataset: width must be > 0");
        if (!p.gain.empty() && static_cast<int>(p.gain.size()) != channels) {
            throw ConfigError("dataset: gain needs one entry per channel");
        }
    }
}

std::vector<ClassParams> default_class_params(Family family, int classes, int side) {
    const double S = side;
    std::vector<ClassParams> out;
    for (int c = 0; c < classes; ++c) {
        ClassParams p;
        switch (family) {
            case Family::blobs: {
                const double a = 2.0 * std::numbers::pi * c / classes;
                const double cx = S / 2 + S / 4 * std::cos(a);
                const double cy = S / 2 + S / 4 * std::sin(a);
                p.u = {cx - S / 8, cx + S / 8};
                p.v = {cy - S / 8, cy + S / 8};
                p.width = S / 8;
                break;
            }
            case Family::rings: {
                const double r = S / 8 + (classes > 1 ? c * (S / 4) / (classes - 1) : 0.0);
                p.u = {r - S / 16, r + S / 16};
                p.width = S / 16;
                break;
            }
            case Family::stripes:
                p.u = {0.0, 2.0 * std::numbers::pi};
                p.width = S / 4 * (1.0 + 0.5 * (c % 2));
                break;
        }
        out.push_back(std::move(p));
    }
    return out;
}

ClassParams SyntheticDatasetSpec::class_params(int label) const {
    if (label < 0 || label >= classes) throw UsageError("dataset: label out of range");
    if (params.empty()) return default_class_params(family, classes, side)[static_cast<std::size_t>(label)];
    return params[static_cast<std::size_t>(label)];
}

namespace {

double gaussian(double x, double mu, double sigma) {
    const double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z);
}

// E over mu ~ U[lo, hi] of gaussian(x, mu, sigma).
double gaussian_mean(double x, Range r, double sigma) {
    if (r.hi == r.lo) return gaussian(x, r.lo, sigma);
    const double s2 = sigma * std::numbers::sqrt2;
    return sigma * std::sqrt(std::numbers::pi / 2.0) / (r.hi - r.lo) * (std::erf((x - r.lo) / s2) - std::erf((x - r.hi) / s2));
}

double channel_gain(const ClassParams& p, int ch, int label, int channels) {
    if (!p.gain.empty()) return p.gain[static_cast<std::size_t>(ch)];
    if (channels == 1) return 1.0;
    return ch == label % channels ? 1.0 : 0.5;
}

struct Geometry {
    double x, y;      // pixel centre
    double cx, cy;    // image centre
};

template <typename F>
Image paint(const SyntheticDatasetSpec& spec, int label, F&& value) {
    const ClassParams p = spec.class_params(label);
    Image img(spec.side, spec.channels);
    for (int r = 0; r < spec.side; ++r) {
        for (int c = 0; c < spec.side; ++c) {
            const double v = value(Geometry{c + 0.5, r + 0.5, spec.side / 2.0, spec.side / 2.0});
            for (int ch = 0; ch < spec.channels; ++ch) img.at(r, c, ch) = channel_gain(p, ch, label, spec.channels) * v;
        }
    }
    return img;
}

}  // namespace

Image render(const SyntheticDatasetSpec& spec, int label, double u, double v) {
    const ClassParams p = spec.class_params(label);
    switch (spec.family) {
        case Family::blobs:
            return paint(spec, label, [&](Geometry g) { return gaussian(g.x, u, p.width) * gaussian(g.y, v, p.width); });
        case Family::rings:
            return paint(spec, label, [&](Geometry g) { return gaussian(std::hypot(g.x - g.cx, g.y - g.cy), u, p.width); });
        case Family::stripes: {
            const double theta = label * std::numbers::pi / spec.classes;
            return paint(spec, label, [&](Geometry g) {
                const double t = g.x * std::cos(theta) + g.y * std::sin(theta);
                return 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * t / p.width + u);
            });
        }
    }
    throw InvariantError("unknown dataset family");
}

Image analytic_class_mean(const SyntheticDatasetSpec& spec, int label) {
    spec.validate();
    const ClassParams p = spec.class_params(label);
    switch (spec.family) {
        case Family::blobs:
            return paint(spec, label, [&](Geometry g) { return gaussian_mean(g.x, p.u, p.width) * gaussian_mean(g.y, p.v, p.width); });
        case Family::rings:
            return paint(spec, label, [&](Geometry g) { return gaussian_mean(std::hypot(g.x - g.cx, g.y - g.cy), p.u, p.width); });
        case Family::stripes: {
            const double theta = label * std::numbers::pi / spec.classes;
            return paint(spec, label, [&](Geometry g) {
                const double a = 2.0 * std::numbers::pi * (g.x * std::cos(theta) + g.y * std::sin(theta)) / p.width;
                if (p.u.hi == p.u.lo) return 0.5 + 0.5 * std::sin(a + p.u.lo);
                return 0.5 + 0.5 * (std::cos(a + p.u.lo) - std::cos(a + p.u.hi)) / (p.u.hi - p.u.lo);
            });
        }
    }
    throw InvariantError("unknown dataset family");
}

Dataset make_dataset(const SyntheticDatasetSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.images.reserve(static_cast<std::size_t>(spec.size));
    for (int i = 0; i < spec.size; ++i) {
        const int label = i % spec.classes;
        const ClassParams p = spec.class_params(label);
        Rng rng = make_rng(spec.seed, "dataset", static_cast<std::uint64_t>(i));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const double u = p.u.lo + (p.u.hi - p.u.lo) * unif(rng);
        const double v = p.v.lo + (p.v.hi - p.v.lo) * unif(rng);
        ds.images.push_back(render(spec, label, u, v));
        ds.labels.push_back(label);
    }
    return ds;
}

}  // namespace sar::workbench
