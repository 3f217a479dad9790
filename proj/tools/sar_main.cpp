// Command-line front end: train, refine, sample, eval, ablate-sf,
// ablate-sampling, report.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sar/errors.hpp"
#include "sar/workbench/checkpoint.hpp"
#include "sar/workbench/config.hpp"
#include "sar/workbench/experiment.hpp"
#include "sar/workbench/metrics.hpp"

namespace fs = std::filesystem;
using namespace sar;
using namespace sar::workbench;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ExperimentConfig checkpoint_config(const Checkpoint& ckpt) { return parse_config(ckpt.config_text); }

Workspace checkpoint_workspace(const Checkpoint& ckpt, const ExperimentConfig& config) {
    return prepare_workspace(config, &ckpt.embed, ckpt.codebook ? &*ckpt.codebook : nullptr);
}

void finish_run(const RunResult& r, const std::string& out) {
    save_checkpoint(r.checkpoint, (fs::path(out) / "checkpoint.ckpt").string());
    if (!r.evals.empty()) {
        const EvalResult& e = r.evals.back().result;
        std::cout << "final fd=" << metric_text(e.fd) << " precision=" << metric_text(e.precision)
                  << " recall=" << metric_text(e.recall) << "\n";
    }
}

int cmd_train(const std::string& config_path, const std::string& out_override) {
    ExperimentConfig config = load_config(config_path);
    if (!out_override.empty()) config.out = out_override;
    OutputLock lock(config.out);
    const Workspace ws = prepare_workspace(config);
    RunOptions opts;
    opts.out_dir = config.out;
    opts.log = &std::cout;
    const RunResult r = run_training(ws, fresh_checkpoint(ws), ws.train_config(), opts);
    finish_run(r, config.out);
    return 0;
}

int cmd_refine(const std::string& from, const std::string& config_path, const std::string& out_override) {
    const Checkpoint ckpt = load_checkpoint(from);
    const std::string text = read_file(config_path);
    ExperimentConfig config = parse_config(text, checkpoint_config(ckpt));
    if (parse_key_values(text).count("train.scheme") == 0) config.train.schedule_kind = ScheduleKind::sar;
    if (!out_override.empty()) config.out = out_override;
    OutputLock lock(config.out);
    const Workspace ws = checkpoint_workspace(ckpt, config);
    RunOptions opts;
    opts.out_dir = config.out;
    opts.log = &std::cout;
    const RunResult r = run_training(ws, ckpt, ws.train_config(), opts);
    finish_run(r, config.out);
    return 0;
}

int cmd_sample(const std::string& ckpt_path, int label, int n, const std::string& out, std::optional<std::uint64_t> seed) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const ExperimentConfig config = checkpoint_config(ckpt);
    if (label < 0 || label >= config.dataset.classes) throw UsageError("label out of range");
    if (n < 1) throw UsageError("--n must be >= 1");
    OutputLock lock(out);
    SamplerConfig sampler = config.sampler;
    sampler.seed = seed ? *seed : derive_seed(config.seed, "sample");
    GenerateOptions opts;
    if (config.coarse_mask.enabled) opts.coarse_mask_steps = config.coarse_mask.decode_steps;
    const std::vector<int> labels(static_cast<std::size_t>(n), label);
    const auto gen = generate(ckpt.state, std::span<const int>(labels), sampler, ckpt.codebook ? &*ckpt.codebook : nullptr,
                              ckpt.embed, opts);
    for (int i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03d", i);
        const auto& g = gen[static_cast<std::size_t>(i)];
        const std::string ext = g.image.channels == 1 ? ".pgm" : ".ppm";
        if (g.image.channels == 1 || g.image.channels == 3) write_pnm(g.image, (fs::path(out) / (name + ext)).string());
        if (!g.tokens.maps.empty()) {
            std::ofstream(fs::path(out) / (std::string(name) + "_tokens.txt"), std::ios::trunc) << token_dump(g.tokens);
        }
    }
    std::cout << "wrote " << n << " samples to " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dataset_path, const std::string& out) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    ExperimentConfig config = checkpoint_config(ckpt);
    if (!dataset_path.empty()) config = parse_config(read_file(dataset_path), config);
    OutputLock lock(out);
    const Workspace ws = checkpoint_workspace(ckpt, config);
    const EvalResult r = evaluate_checkpoint(ws, ckpt);
    CsvSink sink((fs::path(out) / "eval.csv").string(), kEvalColumns);
    sink.write(eval_row(to_string(config.train.schedule_kind), ckpt.step, r));
    std::cout << "fd=" << metric_text(r.fd) << " precision=" << metric_text(r.precision)
              << " recall=" << metric_text(r.recall) << "\n";
    return 0;
}

int cmd_ablate(const std::string& ckpt_path, int steps, const std::string& out, bool sampling, double cfg) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const ExperimentConfig config = checkpoint_config(ckpt);
    OutputLock lock(out);
    const Workspace ws = checkpoint_workspace(ckpt, config);
    const auto rows = sampling ? ablate_sampling(ws, ckpt, steps, cfg, &std::cout) : ablate_sf(ws, ckpt, steps, &std::cout);
    const std::string file = sampling ? "ablate_sampling.csv" : "ablate_sf.csv";
    write_ablation_csv(rows, (fs::path(out) / file).string());
    std::ofstream(fs::path(out) / "config.txt", std::ios::trunc) << to_text(config);
    std::cout << "wrote " << rows.size() << " rows to " << (fs::path(out) / file).string() << "\n";
    return 0;
}

int cmd_report(const std::string& dir) {
    write_report(dir, &std::cerr);
    std::cout << "wrote " << (fs::path(dir) / "report.md").string() << "\n";
    return 0;
}

int fail(const char* kind, const std::string& message, int code) {
    nlohmann::json j;
    j["error"] = kind;
    j["message"] = message;
    std::cerr << j.dump() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Scale-wise autoregressive training workbench"};
    app.require_subcommand(1);

    std::string config_path, out, from, ckpt_path, dataset_path, dir;
    int label = 0, n = 1, steps = 200;
    double cfg = 2.5;
    std::optional<std::uint64_t> seed;

    auto* train = app.add_subcommand("train", "Train from scratch (teacher forcing or a naive student-forcing schedule)");
    train->add_option("--config", config_path, "Experiment config file")->required()->check(CLI::ExistingFile);
    train->add_option("--out", out, "Output directory (overrides the config)");

    auto* refine = app.add_subcommand("refine", "Continue a checkpoint with the refinement objective");
    refine->add_option("--from", from, "Starting checkpoint")->required()->check(CLI::ExistingFile);
    refine->add_option("--config", config_path, "Overrides on top of the checkpoint's config")->required()->check(CLI::ExistingFile);
    refine->add_option("--out", out, "Output directory (overrides the config)");

    auto* sample = app.add_subcommand("sample", "Generate images for one class");
    sample->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    sample->add_option("--label", label, "Class label")->required();
    sample->add_option("--n", n, "Number of images")->required();
    sample->add_option("--out", out, "Output directory")->required();
    sample->add_option("--seed", seed, "Sampler seed (default: derived from the config seed)");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--dataset", dataset_path, "Config file overriding dataset.* and eval.* keys")->check(CLI::ExistingFile);
    eval->add_option("--out", out, "Output directory")->required();

    auto* ablate_sf_cmd = app.add_subcommand("ablate-sf", "Five student-forcing schedules continued from a checkpoint");
    ablate_sf_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    ablate_sf_cmd->add_option("--steps", steps, "Updates per schedule");
    ablate_sf_cmd->add_option("--out", out, "Output directory")->required();

    auto* ablate_sampling_cmd = app.add_subcommand("ablate-sampling", "Rollout sampler variants of the refinement");
    ablate_sampling_cmd->add_option("--ckpt", ckpt_path, "Checkpoint")->required()->check(CLI::ExistingFile);
    ablate_sampling_cmd->add_option("--steps", steps, "Updates per variant");
    ablate_sampling_cmd->add_option("--cfg", cfg, "Guidance scale of the guided variant");
    ablate_sampling_cmd->add_option("--out", out, "Output directory")->required();

    auto* report = app.add_subcommand("report", "Plots and tables for every CSV in a directory");
    report->add_option("--dir", dir, "Directory")->required()->check(CLI::ExistingDirectory);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("UsageError", e.what(), 2);
    }

    try {
        if (*train) return cmd_train(config_path, out);
        if (*refine) return cmd_refine(from, config_path, out);
        if (*sample) return cmd_sample(ckpt_path, label, n, out, seed);
        if (*eval) return cmd_eval(ckpt_path, dataset_path, out);
        if (*ablate_sf_cmd) return cmd_ablate(ckpt_path, steps, out, false, cfg);
        if (*ablate_sampling_cmd) return cmd_ablate(ckpt_path, steps, out, true, cfg);
        if (*report) return cmd_report(dir);
    } catch (const ConfigError& e) {
        return fail("ConfigError", e.what(), 2);
    } catch (const UsageError& e) {
        return fail("UsageError", e.what(), 2);
    } catch (const IntegrityError& e) {
        return fail("IntegrityError", e.what(), 3);
    } catch (const NonFiniteError& e) {
        return fail("NonFiniteError", e.what(), 4);
    } catch (const std::exception& e) {
        return fail("Error", e.what(), 1);
    }
    return 0;
}
