#include "sar/workbench/experiment.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sar/errors.hpp"
#include "sar/rng.hpp"
#include "sar/workbench/metrics.hpp"
#include "sar/workbench/plot.hpp"

namespace sar::workbench {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Workspace

EvalContext Workspace::eval_context() const {
    EvalContext ctx;
    ctx.reference = &reference;
    ctx.codebook = codebook_ptr();
    ctx.embed = &embed;
    ctx.features = &features;
    ctx.samples = config.eval.samples;
    ctx.pr_k = config.eval.pr_k;
    ctx.coarse_mask_steps = config.coarse_mask.enabled ? config.coarse_mask.decode_steps : 0;
    return ctx;
}

SamplerConfig Workspace::eval_sampler() const {
    SamplerConfig s = config.sampler;
    s.seed = derive_seed(config.seed, "sample");
    return s;
}

TrainConfig Workspace::train_config() const {
    TrainConfig t = config.train;
    t.seed = config.seed;
    return t;
}

namespace {

std::vector<TrainingExample> build_examples(const Dataset& ds, const ExperimentConfig& config, const PatchEmbed& embed,
                                            const Codebook* codebook, std::vector<LatentPyramid>* pyramids_out) {
    const ScaleSchedule schedule(config.schedule);
    std::vector<LatentPyramid> pyramids;
    pyramids.reserve(ds.images.size());
    for (const Image& img : ds.images) {
        pyramids.push_back(build_pyramid(embed.encode(img), schedule, config.pathway, &img, embed));
    }
    std::vector<TrainingExample> out;
    if (codebook != nullptr || config.vocab == 0) {
        for (std::size_t i = 0; i < pyramids.size(); ++i) {
            out.push_back(prepare_example(ds.labels[i], pyramids[i], codebook, schedule));
        }
    }
    if (pyramids_out != nullptr) *pyramids_out = std::move(pyramids);
    return out;
}

}  // namespace

Workspace prepare_workspace(const ExperimentConfig& config, const PatchEmbed* embed, const Codebook* codebook) {
    config.validate();
    Workspace ws;
    ws.config = config;
    const int patch = config.patch();
    if (embed != nullptr) {
        if (embed->patch() != patch || embed->channels() != config.dataset.channels || embed->dim() != config.latent_dim) {
            throw ConfigError("checkpoint encoder does not match the experiment config");
        }
        ws.embed = *embed;
    } else {
        // Float-rounded so the checkpoint round trip is exact.
        const PatchEmbed raw(patch, config.dataset.channels, config.latent_dim, derive_seed(config.seed, "patch_embed"));
        ws.embed = PatchEmbed(patch, config.dataset.channels, config.latent_dim, round_to_float(raw.weights()));
    }

    SyntheticDatasetSpec train_spec = config.dataset;
    train_spec.seed = derive_seed(config.seed, "dataset");
    SyntheticDatasetSpec ref_spec = config.dataset;
    ref_spec.seed = derive_seed(config.seed, "reference");
    ref_spec.size = config.eval.reference;
    const Dataset train_ds = make_dataset(train_spec);
    const Dataset ref_ds = make_dataset(ref_spec);

    if (config.vocab > 0) {
        if (codebook != nullptr) {
            if (codebook->size() != config.vocab || codebook->dim() != config.latent_dim) {
                throw ConfigError("checkpoint codebook does not match the experiment config");
            }
            ws.codebook = *codebook;
        } else {
            std::vector<LatentPyramid> pyramids;
            (void)build_examples(train_ds, config, ws.embed, nullptr, &pyramids);
            std::vector<double> samples;
            for (const LatentPyramid& p : pyramids)
                for (const FeatureMap& m : p.maps) samples.insert(samples.end(), m.values.begin(), m.values.end());
            const Codebook fitted = fit_codebook(samples, config.latent_dim, config.vocab, derive_seed(config.seed, "codebook"));
            ws.codebook = Codebook(config.vocab, config.latent_dim, round_to_float(fitted.entries()));
        }
    }
    ws.train = build_examples(train_ds, config, ws.embed, ws.codebook_ptr(), nullptr);
    ws.reference = build_examples(ref_ds, config, ws.embed, ws.codebook_ptr(), nullptr);
    ws.features = FeatureExtractor(config.dataset.side, config.dataset.channels, config.eval.projections,
                                   derive_seed(config.seed, "features"));
    return ws;
}

Checkpoint fresh_checkpoint(const Workspace& ws) {
    Checkpoint c;
    c.state = init_params<float>(ws.config.generator());
    c.adam.m.assign(c.state.size(), 0.0f);
    c.adam.v.assign(c.state.size(), 0.0f);
    c.codebook = ws.codebook;
    c.embed = ws.embed;
    c.rng_seed = ws.config.seed;
    c.config_text = to_text(ws.config);
    return c;
}

// ---------------------------------------------------------------------------
// Training runs

EvalResult evaluate_checkpoint(const Workspace& ws, const Checkpoint& ckpt, std::optional<SamplerConfig> sampler) {
    return evaluate(ckpt.state, ws.eval_context(), sampler ? *sampler : ws.eval_sampler());
}

RunResult run_training(const Workspace& ws, Checkpoint start, const TrainConfig& train, const RunOptions& options) {
    if (!(start.state.config == ws.config.generator())) {
        // Only the seed may differ (it seeds initialization, which is done).
        GeneratorConfig a = start.state.config, b = ws.config.generator();
        a.seed = b.seed;
        if (!(a == b)) throw ConfigError("checkpoint model does not match the experiment config");
    }
    const bool masked = ws.config.coarse_mask.enabled;
    if (masked && train.schedule_kind != ScheduleKind::tf) {
        throw ConfigError("masked coarse-scale modelling runs with train.scheme = tf");
    }
    const std::string label = !options.label.empty() ? options.label : (masked ? "hybrid_mask" : to_string(train.schedule_kind));

    std::optional<CsvSink> steps_csv, timing_csv, eval_csv;
    if (!options.out_dir.empty()) {
        fs::create_directories(options.out_dir);
        ExperimentConfig resolved = ws.config;
        resolved.train = train;
        std::ofstream(fs::path(options.out_dir) / "config.txt", std::ios::trunc) << to_text(resolved);
        steps_csv.emplace((fs::path(options.out_dir) / "metrics.csv").string(), kStepColumns);
        timing_csv.emplace((fs::path(options.out_dir) / "timing.csv").string(), kTimingColumns);
        eval_csv.emplace((fs::path(options.out_dir) / "eval.csv").string(), kEvalColumns);
    }

    Trainer<float> trainer(std::move(start.state), std::move(start.adam), train, ws.codebook_ptr());
    trainer.set_iteration(start.step);
    RunResult result;
    auto record_eval = [&]() {
        const EvalResult r = evaluate(trainer.state(), ws.eval_context(), ws.eval_sampler());
        result.evals.push_back({label, trainer.iteration(), r});
        if (eval_csv) eval_csv->write(eval_row(label, trainer.iteration(), r));
        if (options.log != nullptr) {
            *options.log << "eval step=" << trainer.iteration() << " scheme=" << label << " fd=" << r.fd
                         << " precision=" << r.precision << " recall=" << r.recall << "\n";
        }
    };
    for (int s = 0; s < train.steps; ++s) {
        const Batch batch = trainer.sample_batch(ws.train);
        StepMetrics m = masked ? trainer.hybrid_mask_step(batch, ws.config.coarse_mask.ratio) : trainer.step(batch);
        result.steps.push_back(m);
        if (steps_csv) steps_csv->write(step_row(m));
        if (timing_csv) timing_csv->write(timing_row(m));
        if (options.log != nullptr && options.log_every > 0 && (s + 1) % options.log_every == 0) {
            *options.log << "step=" << m.step << " scheme=" << m.scheme << " loss_tf=" << m.loss_tf
                         << " loss_csf=" << m.loss_csf << " nfe=" << m.nfe << "\n";
        }
        const int every = ws.config.eval.every;
        if (every > 0 && (s + 1) % every == 0 && s + 1 < train.steps) record_eval();
    }
    if (options.evaluate_at_end) record_eval();

    result.checkpoint.state = trainer.state();
    result.checkpoint.adam = trainer.adam();
    result.checkpoint.codebook = ws.codebook;
    result.checkpoint.embed = ws.embed;
    result.checkpoint.step = trainer.iteration();
    result.checkpoint.rng_seed = train.seed;
    ExperimentConfig resolved = ws.config;
    resolved.train = train;
    result.checkpoint.config_text = to_text(resolved);
    return result;
}

// ---------------------------------------------------------------------------
// Ablations

namespace {

AblationRow ablation_run(const Workspace& ws, const Checkpoint& start, TrainConfig train, const std::string& name,
                         std::ostream* log) {
    RunOptions opts;
    opts.label = name;
    opts.log = log;
    opts.log_every = 0;
    const RunResult r = run_training(ws, start, train, opts);
    AblationRow row;
    row.scheme = name;
    row.eval = r.evals.back().result;
    double nfe = 0.0;
    for (const StepMetrics& m : r.steps) nfe += m.nfe;
    row.nfe_per_step = r.steps.empty() ? 0.0 : nfe / static_cast<double>(r.steps.size());
    row.final_loss_tf = r.steps.empty() ? 0.0 : r.steps.back().loss_tf;
    return row;
}

}  // namespace

std::vector<AblationRow> ablate_sf(const Workspace& ws, const Checkpoint& start, int steps, std::ostream* log) {
    const int N = static_cast<int>(ws.config.schedule.size());
    std::vector<AblationRow> rows;
    const std::pair<ScheduleKind, std::string> kinds[] = {
        {ScheduleKind::tf, "tf"},
        {ScheduleKind::sf_full, "sf_full"},
        {ScheduleKind::sf_alternate, "sf_alternate"},
        {ScheduleKind::sf_interleave, "sf_interleave"},
        {ScheduleKind::sf_hybrid, "sf_hybrid@" + std::to_string(std::max(1, N - 1))},
    };
    for (const auto& [kind, name] : kinds) {
        TrainConfig train = ws.train_config();
        train.schedule_kind = kind;
        train.hybrid_k = std::max(1, N - 1);
        train.steps = steps;
        rows.push_back(ablation_run(ws, start, train, name, log));
    }
    return rows;
}

std::vector<AblationRow> ablate_sampling(const Workspace& ws, const Checkpoint& start, int steps, double cfg_scale,
                                         std::ostream* log) {
    std::vector<AblationRow> rows;
    SamplerConfig argmax = SamplerConfig::argmax();
    SamplerConfig stochastic;
    stochastic.top_k = std::min(ws.config.vocab, 900);
    stochastic.top_p = 0.95;
    SamplerConfig guided = stochastic;
    guided.cfg_scale = cfg_scale;
    const std::pair<SamplerConfig, std::string> variants[] = {
        {argmax, "ssr_argmax"}, {stochastic, "ssr_stochastic"}, {guided, "ssr_cfg"}};
    for (const auto& [sampler, name] : variants) {
        TrainConfig train = ws.train_config();
        train.schedule_kind = ScheduleKind::sar;
        train.sampler_for_ssr = sampler;
        train.steps = steps;
        rows.push_back(ablation_run(ws, start, train, name, log));
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw UsageError("cannot write '" + path + "'");
    out << "scheme,fd,precision,recall,per_scale_fd,nfe_per_step,final_loss_tf\n";
    for (const AblationRow& r : rows) {
        const auto e = eval_row(r.scheme, 0, r.eval);
        out << r.scheme << "," << e[2] << "," << e[3] << "," << e[4] << "," << e[5] << "," << metric_text(r.nfe_per_step)
            << "," << metric_text(r.final_loss_tf) << "\n";
    }
}

// ---------------------------------------------------------------------------
// Files

OutputLock::OutputLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".lock").string();
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        const std::string why = errno == EEXIST ? "is locked by another process (remove " + path_ + " if stale)"
                                                : std::string("cannot be locked: ") + std::strerror(errno);
        path_.clear();
        throw UsageError("output directory '" + dir + "' " + why);
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    (void)!::write(fd, pid.data(), pid.size());
    ::close(fd);
}

OutputLock::~OutputLock() {
    if (!path_.empty()) ::unlink(path_.c_str());
}

std::string pnm_bytes(const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw UsageError("pnm output needs 1 or 3 channels");
    std::string s = (image.channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.side) + " " +
                    std::to_string(image.side) + "\n255\n";
    for (double v : image.pixels) {
        const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
        s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    return s;
}

void write_pnm(const Image& image, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write '" + path + "'");
    const std::string bytes = pnm_bytes(image);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string token_dump(const TokenPyramid& tokens) {
    std::string s = "vocab " + std::to_string(tokens.vocab) + "\n";
    for (std::size_t i = 0; i < tokens.maps.size(); ++i) {
        const TokenMap& m = tokens.maps[i];
        s += "scale " + std::to_string(i + 1) + " " + std::to_string(m.side) + "\n";
        for (int r = 0; r < m.side; ++r) {
            for (int c = 0; c < m.side; ++c) {
                s += (c ? " " : "") + std::to_string(m.indices[static_cast<std::size_t>(r * m.side + c)]);
            }
            s += "\n";
        }
    }
    return s;
}

void write_report(const std::string& dir, std::ostream* warnings) {
    if (!fs::is_directory(dir)) throw UsageError("report: '" + dir + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::ostringstream md;
    md << "# Report\n\n";
    for (const fs::path& p : files) {
        const CsvTable t = read_csv(p.string(), warnings);
        const std::string stem = p.parent_path().filename().string() + "_" + p.stem().string();
        const fs::path svg = fs::path(dir) / (stem + ".svg");
        const std::string name = p.filename().string();
        if (name == "metrics.csv") {
            emit_plot(p.string(), svg.string(), "step", "loss_tf", "scheme", {"Teacher-forced loss", "step", "loss_tf"}, warnings);
            md << "## " << fs::relative(p, dir).string() << "\n\n![loss](" << svg.filename().string() << ")\n\n";
            std::vector<StepMetrics> recs;
            const int si = t.column("step"), sc = t.column("scheme"), ni = t.column("nfe");
            for (const auto& row : t.rows) {
                StepMetrics m;
                m.scheme = row[static_cast<std::size_t>(sc)];
                try {
                    m.step = std::stoll(row[static_cast<std::size_t>(si)]);
                    m.nfe = std::stoi(row[static_cast<std::size_t>(ni)]);
                } catch (const std::exception&) {
                    continue;
                }
                recs.push_back(m);
            }
            md << "| scheme | steps | forwards/step (min) | (max) | (mean) |\n|---|---|---|---|---|\n";
            for (const NfeRow& r : nfe_report(recs)) {
                md << "| " << r.scheme << " | " << r.steps << " | " << r.min << " | " << r.max << " | " << r.mean << " |\n";
            }
            md << "\n";
        } else if (name == "eval.csv") {
            emit_plot(p.string(), svg.string(), "step", "fd", "scheme", {"FD proxy", "step", "fd"}, warnings);
            md << "## " << fs::relative(p, dir).string() << "\n\n![fd](" << svg.filename().string() << ")\n\n";
        } else if (t.column("scheme") >= 0 && t.column("fd") >= 0) {
            md << "## " << fs::relative(p, dir).string() << "\n\n";
        } else {
            continue;
        }
        if (name != "metrics.csv") {
            md << "|";
            for (const auto& h : t.header) md << " " << h << " |";
            md << "\n|";
            for (std::size_t i = 0; i < t.header.size(); ++i) md << "---|";
            md << "\n";
            for (const auto& row : t.rows) {
                md << "|";
                for (const auto& f : row) md << " " << f << " |";
                md << "\n";
            }
            md << "\n";
        }
    }
    std::ofstream(fs::path(dir) / "report.md", std::ios::trunc) << md.str();
}

}  // namespace sar::workbench
