// dedit: reference-conditioned image editing at desk scale.
//
// Commands cover the full workflow: gen-data, train, edit, eval, sweep,
// ablate, selftest, gradcheck. Every command is deterministic given its
// flags; all outputs carry the config digest. Exit codes: 0 success,
// 1 usage/config error, 2 data/format error, 3 invariant failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dedit/checkpoint.hpp"
#include "dedit/config.hpp"
#include "dedit/dataset.hpp"
#include "dedit/image_io.hpp"
#include "dedit/io_util.hpp"
#include "dedit/metrics.hpp"
#include "dedit/pipeline.hpp"
#include "dedit/selftest.hpp"

namespace {

using namespace dedit;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitFormat = 2;
constexpr int kExitInvariant = 3;

// The one environment override: DEDIT_OUT_DIR redirects all file outputs.
std::string resolve_out_dir(const std::string& flag_value) {
    if (const char* env = std::getenv("DEDIT_OUT_DIR"); env && *env) return env;
    return flag_value;
}

void ensure_dir(const std::string& dir) {
    if (!dir.empty()) std::filesystem::create_directories(dir);
}

std::string join_path(const std::string& dir, const std::string& name) {
    return dir.empty() ? name : dir + "/" + name;
}

void write_text(const std::string& path, const std::string& text) {
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// Applies command-line overrides after the config file, so flags win.
struct ConfigFlags {
    std::string config_path;
    std::string dataset;
    std::string checkpoint;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;

    // `base` is the fallback when no --config file is given; commands that
    // consume a checkpoint pass its embedded config so the digest printed at
    // train time carries through the rest of the pipeline.
    RunConfig resolve_from(const RunConfig& base) const {
        RunConfig cfg = config_path.empty() ? base : load_run_config(config_path);
        if (!dataset.empty()) cfg.dataset_path = dataset;
        if (!checkpoint.empty()) cfg.checkpoint_path = checkpoint;
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (seed_set) cfg.train.seed = seed;
        cfg.out_dir = resolve_out_dir(cfg.out_dir);
        cfg.validate();
        return cfg;
    }
    RunConfig resolve() const { return resolve_from(RunConfig{}); }

    // Where to find the checkpoint before the full config is known.
    std::string checkpoint_source() const {
        if (!checkpoint.empty()) return checkpoint;
        if (!config_path.empty()) return load_run_config(config_path).checkpoint_path;
        return {};
    }
};

void add_config_flags(CLI::App* cmd, ConfigFlags& cf) {
    cmd->add_option("--config", cf.config_path, "JSON run configuration; missing keys use defaults");
    cmd->add_option("--data", cf.dataset, "dataset file (overrides config)");
    cmd->add_option("--checkpoint", cf.checkpoint, "checkpoint file (overrides config)");
    cmd->add_option("--out", cf.out_dir, "output directory (overrides config)");
    cmd->add_option("--seed", cf.seed, "run seed (overrides config)")
        ->each([&cf](const std::string&) { cf.seed_set = true; });
}

std::vector<EditPair> load_pairs(const std::string& path) {
    if (path.empty()) throw std::invalid_argument("no dataset path given (--data or config)");
    return load_dataset(path);
}

Checkpoint load_ckpt(const std::string& path) {
    if (path.empty()) throw std::invalid_argument("no checkpoint path given (--checkpoint or config)");
    return load_checkpoint(path);
}

// Held-out protocol: the last `count` pairs of the dataset are never sampled
// by training batches, which draw indices only from the front split.
std::span<const EditPair> train_split(const std::vector<EditPair>& all, int holdout) {
    if (holdout < 0 || std::size_t(holdout) >= all.size())
        throw std::invalid_argument("holdout larger than dataset");
    return {all.data(), all.size() - holdout};
}

std::span<const EditPair> eval_split(const std::vector<EditPair>& all, int holdout) {
    if (holdout <= 0 || std::size_t(holdout) > all.size())
        throw std::invalid_argument("holdout larger than dataset");
    return {all.data() + (all.size() - holdout), std::size_t(holdout)};
}

int cmd_gen_data(std::uint64_t seed, int count, const std::string& out) {
    const auto pairs = gen_dataset(seed, count);
    const auto bytes = serialize_dataset(pairs);
    write_file(out, bytes);
    std::printf("wrote %d pairs to %s (file digest %016llx)\n", count, out.c_str(),
                static_cast<unsigned long long>(fnv1a64_bytes(bytes.data(), bytes.size())));
    return kExitOk;
}

int cmd_train(const ConfigFlags& cf, int log_every, int holdout, int snapshot_every) {
    RunConfig cfg = cf.resolve();
    const std::string digest = config_digest(cfg);
    const auto pairs = load_pairs(cfg.dataset_path);
    const auto train_data = train_split(pairs, holdout);
    std::printf("config %s | %zu train pairs (%d held out) | %d steps, batch %d, lr %g, %s/%s\n",
                digest.c_str(), train_data.size(), holdout, cfg.train.steps, cfg.train.batch_size,
                cfg.train.lr, text_mode_name(cfg.text_mode), fusion_mode_name(cfg.model.fusion));

    ensure_dir(cfg.out_dir);
    const std::string ckpt_path = cfg.checkpoint_path.empty()
                                      ? join_path(cfg.out_dir, "model.dedt")
                                      : cfg.checkpoint_path;

    const TrainResult res = train_pipeline(
        cfg, train_data,
        [&](const TrainLogEntry& e) {
            const int last = e.pretrain ? cfg.train.pretrain_steps : cfg.train.steps;
            if (log_every > 0 && (e.step % log_every == 0 || e.step == 1 || e.step == last))
                std::printf("%sstep %6ld  loss %.6f\n", e.pretrain ? "prep " : "", e.step, e.loss);
        },
        [&](const ModelT<float>& m, long step) {
            if (snapshot_every <= 0 || step % snapshot_every != 0 || step == cfg.train.steps)
                return;
            const std::string path = ckpt_path + ".step" + std::to_string(step);
            save_checkpoint(path, m.params, cfg, step);
            std::printf("snapshot %s\n", path.c_str());
        });
    save_checkpoint(ckpt_path, res.model.params, cfg, cfg.train.steps);
    std::printf("first-step loss %.6f, final loss %.6f\n", res.first_loss, res.final_loss);
    std::printf("checkpoint %s (config %s)\n", ckpt_path.c_str(), digest.c_str());
    return kExitOk;
}

int cmd_edit(const ConfigFlags& cf, int index, double lambda_i, double lambda_t) {
    const Checkpoint ckpt = load_ckpt(cf.checkpoint_source());
    RunConfig cfg = cf.resolve_from(ckpt.config);
    ModelT<float> m = model_from_checkpoint(ckpt);
    const auto pairs = load_pairs(cfg.dataset_path);
    if (index < 0 || std::size_t(index) >= pairs.size())
        throw std::invalid_argument("pair index " + std::to_string(index) + " outside dataset of " +
                                    std::to_string(pairs.size()));
    const EditPair& pair = pairs[index];

    GuidanceConfig g = cfg.guidance;
    if (lambda_i >= 0) g.lambda_i = lambda_i;
    if (lambda_t >= 0) g.lambda_t = lambda_t;
    const NoiseSchedule sch = cfg.schedule();
    const TensorF out = edit_pipeline(m, pair, cfg.text_mode, g, sch,
                                      Rng(cfg.train.seed).split("edit").split(std::uint64_t(index)));

    ensure_dir(cfg.out_dir);
    const std::string stem = join_path(cfg.out_dir, "pair" + std::to_string(index));
    write_ppm(stem + "_original.ppm", pair.original_image);
    write_ppm(stem + "_output.ppm", out);
    write_ppm(stem + "_target.ppm", pair.target_image);

    const RegionScores rs = region_metrics(out, pair);
    std::printf("config %s | pair %d (%s) | lambda_i %.2f lambda_t %.2f\n",
                config_digest(cfg).c_str(), index, edit_kind_name(pair.kind), g.lambda_i, g.lambda_t);
    std::printf("l1_target %.4f  l1_original %.4f  consistency %.4f  adherence %.4f  success %d\n",
                l1(out, pair.target_image), l1(out, pair.original_image), rs.consistency,
                rs.adherence, edit_success(out, pair) ? 1 : 0);
    return kExitOk;
}

int cmd_eval(const ConfigFlags& cf, int count) {
    const Checkpoint ckpt = load_ckpt(cf.checkpoint_source());
    RunConfig cfg = cf.resolve_from(ckpt.config);
    ModelT<float> m = model_from_checkpoint(ckpt);
    const auto pairs = load_pairs(cfg.dataset_path);
    const auto held = eval_split(pairs, count);

    const NoiseSchedule sch = cfg.schedule();
    std::vector<MethodRun> runs;
    runs.push_back(eval_pipeline(m, held, cfg.text_mode, cfg.guidance, sch, cfg.train.seed, "edited"));
    runs.push_back(identity_baseline(held, cfg.train.seed));

    ReportMeta meta;
    meta.seed = cfg.train.seed;
    meta.config_digest = config_digest(cfg);
    const MetricReport rep = build_report(runs, meta);
    std::fputs(rep.text.c_str(), stdout);
    std::printf("edit-success rate: %.4f\n", success_rate(runs[0]));
    ensure_dir(cfg.out_dir);
    write_text(join_path(cfg.out_dir, "eval_report.json"), rep.json);
    return kExitOk;
}

int cmd_sweep(const ConfigFlags& cf, const std::vector<double>& lambdas, int count) {
    if (lambdas.empty()) throw std::invalid_argument("sweep: need at least one lambda value");
    const Checkpoint ckpt = load_ckpt(cf.checkpoint_source());
    RunConfig cfg = cf.resolve_from(ckpt.config);
    ModelT<float> m = model_from_checkpoint(ckpt);
    const auto pairs = load_pairs(cfg.dataset_path);
    const auto held = eval_split(pairs, count);
    const NoiseSchedule sch = cfg.schedule();

    ensure_dir(cfg.out_dir);
    std::vector<MethodRun> runs;
    std::printf("config %s | sweep over %zu pairs\n", config_digest(cfg).c_str(), held.size());
    std::printf("%8s %12s %12s %12s %12s\n", "lambda_i", "l1_original", "l1_target", "adherence",
                "success");
    for (double li : lambdas) {
        GuidanceConfig g = cfg.guidance;
        g.lambda_i = li;
        // Same eval seed for every lambda: initial noise is paired per index.
        MethodRun run = eval_pipeline(m, held, cfg.text_mode, g, sch, cfg.train.seed,
                                      "lambda_i=" + std::to_string(li));
        double l1_orig = 0;
        for (std::size_t i = 0; i < held.size(); ++i) {
            const TensorF out = edit_pipeline(m, held[i], cfg.text_mode, g, sch,
                                              Rng(cfg.train.seed).split("eval").split(i));
            l1_orig += l1(out, held[i].original_image);
        }
        l1_orig /= double(held.size());
        std::printf("%8.2f %12.4f %12.4f %12.4f %12.4f\n", li, l1_orig, mean(run.l1),
                    mean(run.adherence), success_rate(run));
        runs.push_back(std::move(run));

        // Image strip for the first few pairs at this guidance strength.
        for (std::size_t i = 0; i < held.size() && i < 4; ++i) {
            const TensorF out = edit_pipeline(m, held[i], cfg.text_mode, g, sch,
                                              Rng(cfg.train.seed).split("eval").split(i));
            char name[64];
            std::snprintf(name, sizeof name, "sweep_li%.2f_pair%zu.ppm", li, i);
            write_ppm(join_path(cfg.out_dir, name), out);
        }
    }
    ReportMeta meta;
    meta.seed = cfg.train.seed;
    meta.config_digest = config_digest(cfg);
    write_text(join_path(cfg.out_dir, "sweep_report.json"), build_report(runs, meta).json);
    return kExitOk;
}

int cmd_ablate(const ConfigFlags& cf, const std::vector<std::string>& modes, int holdout) {
    RunConfig base = cf.resolve();
    if (modes.empty()) throw std::invalid_argument("ablate: need at least one fusion mode");
    const auto pairs = load_pairs(base.dataset_path);
    const auto train_data = train_split(pairs, holdout);
    const auto held = eval_split(pairs, holdout);

    std::vector<MethodRun> runs;
    for (const std::string& mode : modes) {
        RunConfig cfg = base;
        cfg.model.fusion = fusion_mode_from_name(mode);
        std::printf("training fusion mode %s (config %s)\n", mode.c_str(),
                    config_digest(cfg).c_str());
        const TrainResult res = train_pipeline(cfg, train_data);
        const NoiseSchedule sch = cfg.schedule();
        runs.push_back(eval_pipeline(res.model, held, cfg.text_mode, cfg.guidance, sch,
                                     cfg.train.seed, mode));
        std::printf("  final loss %.6f, edit-success %.4f\n", res.final_loss,
                    success_rate(runs.back()));
    }
    ReportMeta meta;
    meta.seed = base.train.seed;
    meta.config_digest = config_digest(base);
    const MetricReport rep = build_report(runs, meta);
    std::fputs(rep.text.c_str(), stdout);
    ensure_dir(base.out_dir);
    write_text(join_path(base.out_dir, "ablate_report.json"), rep.json);
    return kExitOk;
}

int cmd_selftest(bool sabotage) {
    const auto results = run_selftest(sabotage);
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("[%s] %s%s%s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                    r.detail.empty() ? "" : ": ", r.detail.c_str());
        all_pass = all_pass && r.pass;
    }
    return all_pass ? kExitOk : kExitInvariant;
}

int cmd_gradcheck(int samples, double h, std::uint64_t seed) {
    const FdReport rep = run_gradcheck(samples, h, seed);
    std::printf("gradcheck: %zu samples, max relative error %.3e, mean %.3e\n",
                rep.samples.size(), rep.max_rel, rep.mean_rel);
    if (rep.max_rel >= 1e-3) {
        for (const auto& s : rep.samples)
            if (s.rel_err >= 1e-3)
                std::printf("  %s[%zu]: analytic %.6e vs numeric %.6e\n", s.name.c_str(), s.index,
                            s.analytic, s.numeric);
        return kExitInvariant;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"reference-conditioned text-to-image editor, desk scale"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic edit-pair dataset");
    std::uint64_t gen_seed = 0;
    int gen_count = 3000;
    std::string gen_out = "dataset.deds";
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--count", gen_count, "number of pairs")->check(CLI::PositiveNumber);
    gen->add_option("--out", gen_out, "output file");

    // train
    auto* train = app.add_subcommand("train", "train the editing bridge on a dataset");
    ConfigFlags train_cf;
    add_config_flags(train, train_cf);
    int log_every = 100;
    int train_holdout = 200;
    int snapshot_every = 0;
    train->add_option("--log-every", log_every, "loss log cadence in steps");
    train->add_option("--holdout", train_holdout, "pairs reserved from the end for evaluation");
    train->add_option("--snapshot-every", snapshot_every,
                      "also save intermediate checkpoints at this bridge-step cadence");

    // edit
    auto* edit = app.add_subcommand("edit", "edit one dataset pair with a trained checkpoint");
    ConfigFlags edit_cf;
    add_config_flags(edit, edit_cf);
    int edit_index = 0;
    double edit_li = -1, edit_lt = -1;
    edit->add_option("--index", edit_index, "pair index into the dataset");
    edit->add_option("--lambda-i", edit_li, "image guidance weight (default from config)");
    edit->add_option("--lambda-t", edit_lt, "text guidance weight (default from config)");

    // eval
    auto* eval = app.add_subcommand("eval", "score a checkpoint on held-out pairs");
    ConfigFlags eval_cf;
    add_config_flags(eval, eval_cf);
    int eval_count = 200;
    eval->add_option("--count", eval_count, "held-out pair count (taken from the dataset tail)");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "sweep image-guidance strength");
    ConfigFlags sweep_cf;
    add_config_flags(sweep, sweep_cf);
    std::vector<double> sweep_lambdas{0.5, 1.0, 1.5, 2.0, 2.5};
    int sweep_count = 50;
    sweep->add_option("--lambda-i-list", sweep_lambdas, "lambda_i values to sweep");
    sweep->add_option("--count", sweep_count, "held-out pair count");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "train and score each fusion mode");
    ConfigFlags ablate_cf;
    add_config_flags(ablate, ablate_cf);
    std::vector<std::string> ablate_modes{"zero-linear", "direct-addition", "direct-replacement"};
    int ablate_holdout = 200;
    ablate->add_option("--modes", ablate_modes, "fusion modes to compare");
    ablate->add_option("--holdout", ablate_holdout, "pairs reserved from the end for evaluation");

    // selftest
    auto* self = app.add_subcommand("selftest", "run the built-in invariant checks");
    bool sabotage = false;
    self->add_flag("--sabotage-frozen", sabotage,
                   "corrupt a frozen weight mid-check to prove the detector works");

    // gradcheck
    auto* grad = app.add_subcommand("gradcheck", "finite-difference audit of the training loss");
    int gc_samples = 100;
    double gc_h = 1e-4;
    std::uint64_t gc_seed = 0;
    grad->add_option("--samples", gc_samples, "trainable scalars to probe")->check(CLI::PositiveNumber);
    grad->add_option("--step", gc_h, "finite-difference step size");
    grad->add_option("--seed", gc_seed, "model/probe seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // Collapse CLI11's exit-code zoo onto the documented usage code.
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_seed, gen_count, gen_out);
        if (train->parsed()) return cmd_train(train_cf, log_every, train_holdout, snapshot_every);
        if (edit->parsed()) return cmd_edit(edit_cf, edit_index, edit_li, edit_lt);
        if (eval->parsed()) return cmd_eval(eval_cf, eval_count);
        if (sweep->parsed()) return cmd_sweep(sweep_cf, sweep_lambdas, sweep_count);
        if (ablate->parsed()) return cmd_ablate(ablate_cf, ablate_modes, ablate_holdout);
        if (self->parsed()) return cmd_selftest(sabotage);
        if (grad->parsed()) return cmd_gradcheck(gc_samples, gc_h, gc_seed);
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFormat;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::out_of_range& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::logic_error& e) {
        std::fprintf(stderr, "invariant violation: %s\n", e.what());
        return kExitInvariant;
    } catch (const std::runtime_error& e) {
        // IO failures and aborted training land here.
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.what() && std::string(e.what()).find("non-finite") != std::string::npos
                   ? kExitInvariant
                   : kExitFormat;
    }
    return kExitUsage;
}
