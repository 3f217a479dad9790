#include "sar/workbench/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "sar/errors.hpp"

namespace sar::workbench {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(trim(cur));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const char* b = text.data();
    const char* e = b + text.size();
    const auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || ptr != e) throw ConfigError("config: bad value for '" + key + "': '" + text + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true") return true;
    if (text == "false") return false;
    throw ConfigError("config: '" + key + "' must be true or false");
}

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::string format_mask(const MaskRatioSchedule& r, bool enabled) {
    if (!enabled) return "off";
    if (r.kind == MaskRatioSchedule::Kind::cosine) return "cosine";
    return "fixed:" + format_double(r.value);
}

std::string format_params(const std::vector<ClassParams>& params) {
    if (params.empty()) return "default";
    std::string s;
    for (std::size_t c = 0; c < params.size(); ++c) {
        const ClassParams& p = params[c];
        if (c) s += ";";
        s += format_double(p.u.lo) + "," + format_double(p.u.hi) + "," + format_double(p.v.lo) + "," +
             format_double(p.v.hi) + "," + format_double(p.width);
        for (double g : p.gain) s += "," + format_double(g);
    }
    return s;
}

std::vector<ClassParams> parse_params(const std::string& key, const std::string& text) {
    if (text == "default") return {};
    std::vector<ClassParams> out;
    for (const std::string& item : split(text, ';')) {
        const auto f = split(item, ',');
        if (f.size() < 5) throw ConfigError("config: '" + key + "' needs u_lo,u_hi,v_lo,v_hi,width[,gain...] per class");
        ClassParams p;
        p.u = {parse_number<double>(key, f[0]), parse_number<double>(key, f[1])};
        p.v = {parse_number<double>(key, f[2]), parse_number<double>(key, f[3])};
        p.width = parse_number<double>(key, f[4]);
        for (std::size_t i = 5; i < f.size(); ++i) p.gain.push_back(parse_number<double>(key, f[i]));
        out.push_back(std::move(p));
    }
    return out;
}

struct Field {
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

// Sampler fields shared by the SSR sampler and the evaluation sampler.
void sampler_fields(std::vector<Field>& f, const std::string& prefix, SamplerConfig ExperimentConfig::*outer,
                    SamplerConfig TrainConfig::*inner) {
    auto ref = [outer, inner](ExperimentConfig& c) -> SamplerConfig& {
        return outer != nullptr ? c.*outer : c.train.*inner;
    };
    auto cref = [outer, inner](const ExperimentConfig& c) -> const SamplerConfig& {
        return outer != nullptr ? c.*outer : c.train.*inner;
    };
    f.push_back({prefix + ".strategy",
                 [=](const ExperimentConfig& c) {
                     return std::string(cref(c).strategy == SamplerConfig::Strategy::argmax ? "argmax" : "stochastic");
                 },
                 [=](ExperimentConfig& c, const std::string& v) {
                     if (v == "argmax") ref(c).strategy = SamplerConfig::Strategy::argmax;
                     else if (v == "stochastic") ref(c).strategy = SamplerConfig::Strategy::stochastic;
                     else throw ConfigError("config: " + prefix + ".strategy must be argmax or stochastic");
                 }});
    f.push_back({prefix + ".top_k",
                 [=](const ExperimentConfig& c) { return cref(c).top_k == 0 ? std::string("all") : std::to_string(cref(c).top_k); },
                 [=](ExperimentConfig& c, const std::string& v) {
                     ref(c).top_k = v == "all" ? 0 : parse_number<int>(prefix + ".top_k", v);
                 }});
    f.push_back({prefix + ".top_p", [=](const ExperimentConfig& c) { return format_double(cref(c).top_p); },
                 [=](ExperimentConfig& c, const std::string& v) { ref(c).top_p = parse_number<double>(prefix + ".top_p", v); }});
    f.push_back({prefix + ".temperature", [=](const ExperimentConfig& c) { return format_double(cref(c).temperature); },
                 [=](ExperimentConfig& c, const std::string& v) {
                     ref(c).temperature = parse_number<double>(prefix + ".temperature", v);
                 }});
    f.push_back({prefix + ".cfg",
                 [=](const ExperimentConfig& c) {
                     return cref(c).cfg_scale ? format_double(*cref(c).cfg_scale) : std::string("off");
                 },
                 [=](ExperimentConfig& c, const std::string& v) {
                     if (v == "off") ref(c).cfg_scale.reset();
                     else ref(c).cfg_scale = parse_number<double>(prefix + ".cfg", v);
                 }});
}

template <typename T, typename Obj>
Field number_field(std::string key, T Obj::*member, Obj& (*pick)(ExperimentConfig&), const Obj& (*cpick)(const ExperimentConfig&)) {
    return {key,
            [=](const ExperimentConfig& c) {
                if constexpr (std::is_floating_point_v<T>) return format_double(cpick(c).*member);
                else return std::to_string(cpick(c).*member);
            },
            [=](ExperimentConfig& c, const std::string& v) { pick(c).*member = parse_number<T>(key, v); }};
}

ExperimentConfig& self(ExperimentConfig& c) { return c; }
const ExperimentConfig& cself(const ExperimentConfig& c) { return c; }
SyntheticDatasetSpec& ds(ExperimentConfig& c) { return c.dataset; }
const SyntheticDatasetSpec& cds(const ExperimentConfig& c) { return c.dataset; }
TrainConfig& tr(ExperimentConfig& c) { return c.train; }
const TrainConfig& ctr(const ExperimentConfig& c) { return c.train; }
EvalSettings& ev(ExperimentConfig& c) { return c.eval; }
const EvalSettings& cev(const ExperimentConfig& c) { return c.eval; }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back(number_field("seed", &ExperimentConfig::seed, self, cself));
        f.push_back({"out", [](const ExperimentConfig& c) { return c.out; },
                     [](ExperimentConfig& c, const std::string& v) { c.out = v; }});

        f.push_back({"dataset.family", [](const ExperimentConfig& c) { return to_string(c.dataset.family); },
                     [](ExperimentConfig& c, const std::string& v) { c.dataset.family = parse_family(v); }});
        f.push_back(number_field("dataset.classes", &SyntheticDatasetSpec::classes, ds, cds));
        f.push_back(number_field("dataset.side", &SyntheticDatasetSpec::side, ds, cds));
        f.push_back(number_field("dataset.channels", &SyntheticDatasetSpec::channels, ds, cds));
        f.push_back(number_field("dataset.size", &SyntheticDatasetSpec::size, ds, cds));
        f.push_back({"dataset.params", [](const ExperimentConfig& c) { return format_params(c.dataset.params); },
                     [](ExperimentConfig& c, const std::string& v) { c.dataset.params = parse_params("dataset.params", v); }});

        f.push_back({"pyramid.schedule", [](const ExperimentConfig& c) { return join_ints(c.schedule); },
                     [](ExperimentConfig& c, const std::string& v) {
                         c.schedule.clear();
                         for (const std::string& s : split(v, ',')) c.schedule.push_back(parse_number<int>("pyramid.schedule", s));
                     }});
        f.push_back({"pyramid.pathway",
                     [](const ExperimentConfig& c) {
                         return std::string(c.pathway == Pathway::latent_supervision ? "latent" : "image");
                     },
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "latent") c.pathway = Pathway::latent_supervision;
                         else if (v == "image") c.pathway = Pathway::image_supervision;
                         else throw ConfigError("config: pyramid.pathway must be latent or image");
                     }});
        f.push_back(number_field("pyramid.latent_dim", &ExperimentConfig::latent_dim, self, cself));
        f.push_back(number_field("pyramid.vocab", &ExperimentConfig::vocab, self, cself));

        f.push_back(number_field("model.depth", &ExperimentConfig::depth, self, cself));
        f.push_back(number_field("model.width", &ExperimentConfig::width, self, cself));
        f.push_back(number_field("model.heads", &ExperimentConfig::heads, self, cself));
        f.push_back(number_field("model.mlp_ratio", &ExperimentConfig::mlp_ratio, self, cself));
        f.push_back(number_field("model.label_drop", &ExperimentConfig::label_drop, self, cself));

        f.push_back({"train.scheme", [](const ExperimentConfig& c) { return to_string(c.train.schedule_kind); },
                     [](ExperimentConfig& c, const std::string& v) { c.train.schedule_kind = parse_schedule_kind(v); }});
        f.push_back(number_field("train.steps", &TrainConfig::steps, tr, ctr));
        f.push_back(number_field("train.batch", &TrainConfig::batch, tr, ctr));
        f.push_back(number_field("train.lr", &TrainConfig::lr, tr, ctr));
        f.push_back(number_field("train.beta1", &TrainConfig::beta1, tr, ctr));
        f.push_back(number_field("train.beta2", &TrainConfig::beta2, tr, ctr));
        f.push_back(number_field("train.weight_decay", &TrainConfig::weight_decay, tr, ctr));
        f.push_back(number_field("train.gamma", &TrainConfig::gamma, tr, ctr));
        f.push_back(number_field("train.hybrid_k", &TrainConfig::hybrid_k, tr, ctr));
        f.push_back({"train.csfl_target",
                     [](const ExperimentConfig& c) {
                         return std::string(c.train.csfl_target == CsflTarget::teacher ? "teacher" : "ground_truth");
                     },
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "teacher") c.train.csfl_target = CsflTarget::teacher;
                         else if (v == "ground_truth") c.train.csfl_target = CsflTarget::ground_truth;
                         else throw ConfigError("config: train.csfl_target must be teacher or ground_truth");
                     }});
        f.push_back({"train.csfl_detach", [](const ExperimentConfig& c) { return std::string(c.train.csfl_detach ? "true" : "false"); },
                     [](ExperimentConfig& c, const std::string& v) { c.train.csfl_detach = parse_bool("train.csfl_detach", v); }});
        f.push_back({"train.sf_scales",
                     [](const ExperimentConfig& c) {
                         return std::string(c.train.sf_scales == SfScales::all ? "all" : "single_random_k");
                     },
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "all") c.train.sf_scales = SfScales::all;
                         else if (v == "single_random_k") c.train.sf_scales = SfScales::single_random_k;
                         else throw ConfigError("config: train.sf_scales must be all or single_random_k");
                     }});
        sampler_fields(f, "train.ssr", nullptr, &TrainConfig::sampler_for_ssr);
        f.push_back({"train.coarse_mask", [](const ExperimentConfig& c) { return format_mask(c.coarse_mask.ratio, c.coarse_mask.enabled); },
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "off") {
                             c.coarse_mask.enabled = false;
                         } else if (v == "cosine") {
                             c.coarse_mask.enabled = true;
                             c.coarse_mask.ratio = {MaskRatioSchedule::Kind::cosine, 1.0};
                         } else if (v.rfind("fixed:", 0) == 0) {
                             c.coarse_mask.enabled = true;
                             c.coarse_mask.ratio = {MaskRatioSchedule::Kind::fixed,
                                                    parse_number<double>("train.coarse_mask", v.substr(6))};
                         } else {
                             throw ConfigError("config: train.coarse_mask must be off, cosine or fixed:<ratio>");
                         }
                     }});

        sampler_fields(f, "sample", &ExperimentConfig::sampler, nullptr);
        f.push_back({"sample.coarse_mask_steps", [](const ExperimentConfig& c) { return std::to_string(c.coarse_mask.decode_steps); },
                     [](ExperimentConfig& c, const std::string& v) {
                         c.coarse_mask.decode_steps = parse_number<int>("sample.coarse_mask_steps", v);
                     }});

        f.push_back(number_field("eval.every", &EvalSettings::every, ev, cev));
        f.push_back(number_field("eval.samples", &EvalSettings::samples, ev, cev));
        f.push_back(number_field("eval.reference", &EvalSettings::reference, ev, cev));
        f.push_back(number_field("eval.pr_k", &EvalSettings::pr_k, ev, cev));
        f.push_back(number_field("eval.projections", &EvalSettings::projections, ev, cev));
        return f;
    }();
    return table;
}

}  // namespace

std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw InvariantError("format_double failed");
    return std::string(buf, ptr);
}

ExperimentConfig::ExperimentConfig() { dataset.size = 2048; }

void ExperimentConfig::validate() const {
    dataset.validate();
    const ScaleSchedule s(schedule);
    if (s.size() < 2) throw ConfigError("pyramid.schedule needs at least two scales for training");
    if (dataset.side % s.top() != 0) throw ConfigError("dataset.side must be a multiple of the top scale side");
    if (latent_dim < 1) throw ConfigError("pyramid.latent_dim must be >= 1");
    if (vocab < 0) throw ConfigError("pyramid.vocab must be >= 0");
    generator().validate();
    train.validate();
    sampler.validate();
    if (train.schedule_kind == ScheduleKind::sf_hybrid && train.hybrid_k > s.size()) {
        throw ConfigError("train.hybrid_k must be in [1, N]");
    }
    if (coarse_mask.enabled && vocab == 0) throw ConfigError("train.coarse_mask needs discrete mode");
    if (coarse_mask.ratio.kind == MaskRatioSchedule::Kind::fixed &&
        !(coarse_mask.ratio.value >= 0.0 && coarse_mask.ratio.value <= 1.0)) {
        throw ConfigError("train.coarse_mask ratio must be in [0, 1]");
    }
    if (coarse_mask.decode_steps < 1) throw ConfigError("sample.coarse_mask_steps must be >= 1");
    if (eval.every < 0 || eval.samples < 2 || eval.reference < 2 || eval.pr_k < 1 || eval.projections < 1) {
        throw ConfigError("eval settings out of range");
    }
    if (eval.samples < eval.projections + dataset.channels + 1 || eval.reference < eval.projections + dataset.channels + 1) {
        throw ConfigError("eval.samples and eval.reference must exceed the feature dimension");
    }
    if (out.empty()) throw ConfigError("out must not be empty");
}

GeneratorConfig ExperimentConfig::generator() const {
    GeneratorConfig g;
    g.schedule = ScaleSchedule(schedule);
    g.depth = depth;
    g.width = width;
    g.heads = heads;
    g.mlp_ratio = mlp_ratio;
    g.vocab = vocab;
    g.latent_dim = latent_dim;
    g.classes = dataset.classes;
    g.label_drop_prob = label_drop;
    g.seed = seed;
    return g;
}

int ExperimentConfig::patch() const { return dataset.side / schedule.back(); }

ExperimentConfig default_experiment() { return ExperimentConfig(); }

ExperimentConfig tiny_experiment() {
    ExperimentConfig c;
    c.dataset.size = 256;
    c.dataset.side = 8;
    c.schedule = {1, 2};
    c.vocab = 16;
    c.latent_dim = 4;
    c.depth = 1;
    c.width = 16;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.train.steps = 20;
    c.train.batch = 8;
    c.train.lr = 1e-3;
    c.eval.samples = 48;
    c.eval.reference = 48;
    c.eval.projections = 8;
    return c;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (!kv.emplace(key, value).second) throw ConfigError("config: repeated key '" + key + "'");
    }
    return kv;
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
    const auto kv = parse_key_values(text);
    for (const auto& [key, value] : kv) {
        const auto& table = fields();
        const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
        if (it == table.end()) throw ConfigError("config: unknown key '" + key + "'");
        it->set(base, value);
    }
    return base;
}

ExperimentConfig load_config(const std::string& path, ExperimentConfig base) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string to_text(const ExperimentConfig& config) {
    std::string s;
    for (const Field& f : fields()) s += f.key + " = " + f.get(config) + "\n";
    return s;
}

}  // namespace sar::workbench
