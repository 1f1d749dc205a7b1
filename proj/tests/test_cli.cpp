#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "dedit/checkpoint.hpp"
#include "dedit/config.hpp"
#include "dedit/io_util.hpp"
#include "dedit/pipeline.hpp"
#include "dedit/selftest.hpp"
#include "testutil.hpp"

using namespace dedit;
using testutil::bitwise_equal;

namespace {

#ifndef DEDIT_BIN
#error "DEDIT_BIN must point at the built cli executable"
#endif

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DEDIT_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return (status >> 8) & 0xFF;
}

// Small enough to train in test time yet structurally complete: two blocks,
// full 16x16 dataset images.
RunConfig cli_test_config() {
    RunConfig c;
    c.model.embed_dim = 16;
    c.model.heads = 2;
    c.model.lora_rank = 2;
    c.train.steps = 40;
    c.train.batch_size = 8;
    c.train.lr = 2e-3;
    c.guidance.sampler = SamplerKind::kDeterministic;
    c.guidance.inference_steps = 10;
    return c;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("train pipeline learns, repeats bitwise, and logs every step") {
    const auto pairs = gen_dataset(11, 64);
    RunConfig cfg = cli_test_config();

    std::vector<long> steps_seen;
    const TrainResult a = train_pipeline(cfg, pairs, [&](const TrainLogEntry& e) {
        steps_seen.push_back(e.step);
    });
    CHECK(steps_seen.size() == 40);
    CHECK(steps_seen.front() == 1);
    CHECK(steps_seen.back() == 40);
    CHECK(a.final_loss < a.first_loss);

    const TrainResult b = train_pipeline(cfg, pairs);
    CHECK(serialize_checkpoint(a.model.params, cfg, 0) == serialize_checkpoint(b.model.params, cfg, 0));

    RunConfig reseeded = cfg;
    reseeded.train.seed = 1;
    const TrainResult c = train_pipeline(reseeded, pairs);
    CHECK(serialize_checkpoint(a.model.params, cfg, 0) !=
          serialize_checkpoint(c.model.params, cfg, 0));
}

TEST_CASE("a fresh zero-linear model scores the same loss with and without the bridge") {
    const auto pairs = gen_dataset(13, 8);
    RunConfig cfg = cli_test_config();
    ModelT<float> m = build_model<float>(cfg.model, cfg.train.seed);
    const NoiseSchedule sch = cfg.schedule();

    const EpsFn<float> with_bridge = model_eps_fn(m, false);
    const EpsFn<float> without = [&m](const TrainSample<float>& s) {
        return forward_denoiser(m, s.z_t, s.t, s.tokens, nullptr);
    };
    // Identical rngs give identical draws, so any gap is the bridge's doing.
    Rng r1(21), r2(21);
    const double la = training_loss_with(with_bridge, pairs, TextMode::kDescription, sch,
                                         cfg.train, r1).loss.value();
    const double lb = training_loss_with(without, pairs, TextMode::kDescription, sch,
                                         cfg.train, r2).loss.value();
    CHECK(std::abs(la - lb) < 1e-6);
}

TEST_CASE("edit pipeline is a pure function of the rng seed") {
    const auto pairs = gen_dataset(17, 4);
    RunConfig cfg = cli_test_config();
    ModelT<float> m = build_model<float>(cfg.model, 3);
    const NoiseSchedule sch = cfg.schedule();

    const TensorF a = edit_pipeline(m, pairs[0], TextMode::kDescription, cfg.guidance, sch, Rng(5));
    const TensorF b = edit_pipeline(m, pairs[0], TextMode::kDescription, cfg.guidance, sch, Rng(5));
    const TensorF c = edit_pipeline(m, pairs[0], TextMode::kDescription, cfg.guidance, sch, Rng(6));
    CHECK(bitwise_equal(a, b));
    CHECK_FALSE(bitwise_equal(a, c));
}

TEST_CASE("eval pipeline pairs initial noise across guidance settings") {
    const auto pairs = gen_dataset(19, 3);
    RunConfig cfg = cli_test_config();
    cfg.guidance.inference_steps = 4;
    ModelT<float> m = build_model<float>(cfg.model, 3);
    const NoiseSchedule sch = cfg.schedule();

    const MethodRun r1 = eval_pipeline(m, pairs, TextMode::kDescription, cfg.guidance, sch, 7, "a");
    const MethodRun r2 = eval_pipeline(m, pairs, TextMode::kDescription, cfg.guidance, sch, 7, "b");
    REQUIRE(r1.l1.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(r1.l1[i] == r2.l1[i]);

    // With zero guidance weights the text/image conditions cannot matter, so
    // paired initial noise forces identical outputs across "settings".
    GuidanceConfig g0 = cfg.guidance;
    g0.lambda_i = 0;
    g0.lambda_t = 0;
    const MethodRun u1 = eval_pipeline(m, pairs, TextMode::kDescription, g0, sch, 7, "u1");
    const MethodRun u2 = eval_pipeline(m, pairs, TextMode::kInstruction, g0, sch, 7, "u2");
    for (std::size_t i = 0; i < 3; ++i) CHECK(u1.l1[i] == u2.l1[i]);

    const MethodRun base = identity_baseline(pairs, 7);
    CHECK(success_rate(base) == 0.0);
    for (double v : base.consistency) CHECK(v == 0.0);
}

TEST_CASE("cli: gen-data is deterministic and validates flags") {
    TempDir tmp("dedit_cli_gen");
    const std::string a = tmp.file("a.deds"), b = tmp.file("b.deds");
    CHECK(run_cli("gen-data --seed 5 --count 20 --out " + a) == 0);
    CHECK(run_cli("gen-data --seed 5 --count 20 --out " + b) == 0);
    CHECK(read_file(a) == read_file(b));
    CHECK(read_file(a).size() == 12 + 20 * kDatasetRecordBytes + 4);

    CHECK(run_cli("gen-data --seed 5 --count 0 --out " + a) == 1);
    CHECK(run_cli("gen-data --no-such-flag") == 1);
    CHECK(run_cli("") == 1);
}

TEST_CASE("cli: train, edit, eval work end to end with stable digests") {
    TempDir tmp("dedit_cli_train");
    const std::string ds = tmp.file("ds.deds");
    REQUIRE(run_cli("gen-data --seed 2 --count 60 --out " + ds) == 0);

    RunConfig cfg = cli_test_config();
    cfg.train.steps = 25;
    const std::string cfg_path = tmp.file("run.json");
    {
        const std::string text = run_config_to_json(cfg);
        write_file(cfg_path, std::vector<std::uint8_t>(text.begin(), text.end()));
    }

    // Identical invocations, including the output path, must reproduce the
    // checkpoint byte for byte.
    const std::string ck1 = tmp.file("m1.dedt");
    const std::string train_cmd = "train --config " + cfg_path + " --data " + ds +
                                  " --checkpoint " + ck1 + " --out " + tmp.file("out") +
                                  " --holdout 20";
    REQUIRE(run_cli(train_cmd) == 0);
    const auto first_bytes = read_file(ck1);
    REQUIRE(run_cli(train_cmd) == 0);
    CHECK(read_file(ck1) == first_bytes);

    const Checkpoint ckpt = load_checkpoint(ck1);
    CHECK(ckpt.step == 25);
    // Path overrides must not perturb the experiment digest.
    CHECK(config_digest(ckpt.config) == config_digest(cfg));

    CHECK(run_cli("edit --checkpoint " + ck1 + " --data " + ds + " --index 50 --out " +
                  tmp.file("edit_out")) == 0);
    for (const char* name : {"pair50_original.ppm", "pair50_output.ppm", "pair50_target.ppm"}) {
        const auto bytes = read_file((tmp.path / "edit_out" / name).string());
        CHECK(bytes.size() == 13 + 3 * 16 * 16);  // "P6\n16 16\n255\n" + pixels
    }

    CHECK(run_cli("eval --checkpoint " + ck1 + " --data " + ds + " --count 10 --out " +
                  tmp.file("eval_out")) == 0);
    CHECK(read_file((tmp.path / "eval_out" / "eval_report.json").string()).size() > 0);

    // Out-of-range pair index is a usage error.
    CHECK(run_cli("edit --checkpoint " + ck1 + " --data " + ds + " --index 99 --out " +
                  tmp.file("edit_out")) == 1);
}

TEST_CASE("cli: data and format failures use exit code 2") {
    TempDir tmp("dedit_cli_fmt");
    const std::string ds = tmp.file("ds.deds");
    REQUIRE(run_cli("gen-data --seed 3 --count 5 --out " + ds) == 0);

    CHECK(run_cli("eval --checkpoint " + tmp.file("missing.dedt") + " --data " + ds) == 2);

    // A dataset with a corrupted payload byte fails the checksum.
    auto bytes = read_file(ds);
    bytes[100] ^= 0x40;
    const std::string bad = tmp.file("bad.deds");
    write_file(bad, bytes);
    RunConfig cfg = cli_test_config();
    cfg.train.steps = 1;
    const std::string cfg_path = tmp.file("run.json");
    {
        const std::string text = run_config_to_json(cfg);
        write_file(cfg_path, std::vector<std::uint8_t>(text.begin(), text.end()));
    }
    CHECK(run_cli("train --config " + cfg_path + " --data " + bad + " --checkpoint " +
                  tmp.file("m.dedt") + " --out " + tmp.file("out") + " --holdout 2") == 2);

    // Unknown config keys are usage errors, not format errors.
    const std::string bad_cfg = tmp.file("bad.json");
    write_file(bad_cfg, {'{', '"', 'z', 'z', '"', ':', '1', '}'});
    CHECK(run_cli("train --config " + bad_cfg + " --data " + ds) == 1);
}

TEST_CASE("cli: DEDIT_OUT_DIR overrides the output directory") {
    TempDir tmp("dedit_cli_env");
    const std::string ds = tmp.file("ds.deds");
    REQUIRE(run_cli("gen-data --seed 4 --count 30 --out " + ds) == 0);

    RunConfig cfg = cli_test_config();
    cfg.train.steps = 5;
    const std::string cfg_path = tmp.file("run.json");
    {
        const std::string text = run_config_to_json(cfg);
        write_file(cfg_path, std::vector<std::uint8_t>(text.begin(), text.end()));
    }
    const std::string redirected = tmp.file("redirected");
    const std::string cmd = "DEDIT_OUT_DIR=" + redirected + " " + DEDIT_BIN + " train --config " +
                            cfg_path + " --data " + ds + " --out " + tmp.file("ignored") +
                            " --holdout 5 >/dev/null 2>&1";
    REQUIRE(((std::system(cmd.c_str()) >> 8) & 0xFF) == 0);
    CHECK(std::filesystem::exists(redirected + "/model.dedt"));
    CHECK_FALSE(std::filesystem::exists(tmp.file("ignored") + "/model.dedt"));
}

TEST_CASE("selftest catches a sabotaged frozen weight and only then") {
    const auto clean = run_selftest(false);
    for (const auto& r : clean) {
        INFO(r.name, ": ", r.detail);
        CHECK(r.pass);
    }
    const auto sabotaged = run_selftest(true);
    int failures = 0;
    for (const auto& r : sabotaged)
        if (!r.pass) {
            ++failures;
            CHECK(r.name == "frozen-base");
        }
    CHECK(failures == 1);
}

TEST_CASE("gradcheck stays under the acceptance bar on a spot sample") {
    const FdReport rep = run_gradcheck(15, 1e-4, 3);
    CHECK(rep.samples.size() == 15);
    CHECK(rep.max_rel < 1e-3);
}
