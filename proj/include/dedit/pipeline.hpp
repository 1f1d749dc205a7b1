#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dedit/config.hpp"
#include "dedit/dataset.hpp"
#include "dedit/diffusion.hpp"
#include "dedit/metrics.hpp"
#include "dedit/model.hpp"

// End-to-end drivers shared by the command-line tool and the acceptance
// suite, so both run the exact same training and evaluation code paths.

namespace dedit {

struct TrainLogEntry {
    long step = 0;  // 1-based, the step just completed
    double loss = 0;
    bool pretrain = false;
};

struct TrainResult {
    ModelT<float> model;
    double first_loss = 0;
    double final_loss = 0;
    double pretrain_final_loss = 0;  // 0 when the phase was skipped
};

// Trains a fresh model per the config on the given pairs. All randomness
// stems from cfg.train.seed: one stream draws batch indices, a second feeds
// the per-step noise/dropout draws. A non-finite loss aborts with the step
// number; `log` (when set) observes every step and `on_bridge_step` sees the
// model after each bridge update, e.g. for periodic snapshots.
//
// When cfg.train.pretrain_steps > 0 a base-preparation phase runs first: the
// frozen backbone is temporarily unfrozen and trained on text-conditional
// denoising of the edited images, with the reference input withheld so the
// bridge never fires. It is then refrozen and bridge training proceeds as
// usual on top of the prepared weights.
inline TrainResult train_pipeline(
    const RunConfig& cfg, std::span<const EditPair> data,
    const std::function<void(const TrainLogEntry&)>& log = {},
    const std::function<void(const ModelT<float>&, long)>& on_bridge_step = {}) {
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    cfg.validate();
    const NoiseSchedule sch = cfg.schedule();

    TrainResult res{build_model<float>(cfg.model, cfg.train.seed)};
    const EpsFn<float> eps_fn = model_eps_fn(res.model, /*memoize_ref=*/true);

    Rng root(cfg.train.seed);

    auto draw_batch = [&](Rng& rng) {
        std::vector<EditPair> batch;
        batch.reserve(cfg.train.batch_size);
        for (int i = 0; i < cfg.train.batch_size; ++i)
            batch.push_back(data[rng.uniform_int(data.size())]);
        return batch;
    };

    if (cfg.train.pretrain_steps > 0) {
        ParamSetT<float> backbone;
        res.model.params.for_each([&](const std::string& name, TensorF& t, bool frozen) {
            if (frozen) backbone.add(name, t, false);
        });
        TrainConfig pre = cfg.train;
        pre.lr = cfg.train.pretrain_lr;
        pre.image_drop = 1.0;  // no reference: pure text-to-image
        AdamWT<float> pre_opt(pre);

        // The backbone freezes on the Polyak average of the trajectory, not
        // the last iterate; a from-scratch denoiser samples noticeably
        // better from the average.
        constexpr double kEmaDecay = 0.999;
        std::vector<TensorF*> slots;
        std::vector<std::vector<double>> shadow;
        backbone.for_each([&](const std::string&, TensorF& t, bool) {
            slots.push_back(&t);
            shadow.emplace_back(t.values().begin(), t.values().end());
        });

        Rng batch_rng = root.split("pretrain-batches");
        Rng step_rng = root.split("pretrain-steps");
        for (long step = 1; step <= cfg.train.pretrain_steps; ++step) {
            // Half-cosine decay to a 5% floor; from-scratch denoising wants a
            // hot start and a quiet finish.
            const double frac = double(step - 1) / double(std::max(1l, cfg.train.pretrain_steps - 1l));
            pre_opt.set_lr(cfg.train.pretrain_lr *
                           std::max(0.05, 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846))));
            const std::vector<EditPair> batch = draw_batch(batch_rng);
            const StepResult sr =
                training_step(backbone, pre_opt, eps_fn, batch, cfg.text_mode, sch, pre, step_rng);
            if (!std::isfinite(sr.loss))
                throw std::runtime_error("train: non-finite loss at pretraining step " +
                                         std::to_string(step));
            for (std::size_t i = 0; i < slots.size(); ++i) {
                const float* w = slots[i]->data();
                std::vector<double>& s = shadow[i];
                for (std::size_t j = 0; j < s.size(); ++j)
                    s[j] = kEmaDecay * s[j] + (1.0 - kEmaDecay) * double(w[j]);
            }
            res.pretrain_final_loss = sr.loss;
            if (log) log({step, sr.loss, true});
        }
        for (std::size_t i = 0; i < slots.size(); ++i) {
            float* w = slots[i]->data();
            for (std::size_t j = 0; j < shadow[i].size(); ++j) w[j] = float(shadow[i][j]);
        }
        // Freeze the prepared backbone again; only the view marked it trainable.
        res.model.params.for_each([](const std::string&, TensorF& t, bool frozen) {
            if (frozen) t.set_tracked(false);
        });
    }

    ParamSetT<float> trainables = trainable_params(res.model);
    AdamWT<float> opt(cfg.train);
    Rng batch_rng = root.split("batches");
    Rng step_rng = root.split("steps");

    for (long step = 1; step <= cfg.train.steps; ++step) {
        const std::vector<EditPair> batch = draw_batch(batch_rng);
        const StepResult sr =
            training_step(trainables, opt, eps_fn, batch, cfg.text_mode, sch, cfg.train, step_rng);
        if (!std::isfinite(sr.loss))
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
        if (step == 1) res.first_loss = sr.loss;
        res.final_loss = sr.loss;
        if (log) log({step, sr.loss});
        if (on_bridge_step) on_bridge_step(res.model, step);
    }
    return res;
}

// One guided edit: reference pass on the original image, then the sampler
// from pure noise. Pass the same rng to reproduce an edit bit for bit.
inline TensorF edit_pipeline(const ModelT<float>& m, const EditPair& pair, TextMode mode,
                             const GuidanceConfig& g, const NoiseSchedule& sch, Rng rng) {
    const TokenSeq& tokens = mode == TextMode::kDescription ? pair.description : pair.instruction;
    return sample(m, pair.original_image, tokens, g, sch, rng);
}

// Edits every pair and scores the outputs. Per-example rngs are split from
// `seed`, so two calls with the same seed sample identical initial noise for
// pair i regardless of guidance settings; guidance sweeps stay paired.
inline MethodRun eval_pipeline(const ModelT<float>& m, std::span<const EditPair> pairs,
                               TextMode mode, const GuidanceConfig& g, const NoiseSchedule& sch,
                               std::uint64_t seed, const std::string& name) {
    if (pairs.empty()) throw std::invalid_argument("eval: no pairs");
    MethodRun run;
    run.name = name;
    Rng root = Rng(seed).split("eval");
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const TensorF out = edit_pipeline(m, pairs[i], mode, g, sch, root.split(i));
        accumulate(run, out, pairs[i], seed);
    }
    return run;
}

// Scores the do-nothing editor that returns the original image unchanged;
// the floor every trained method must beat.
inline MethodRun identity_baseline(std::span<const EditPair> pairs, std::uint64_t seed,
                                   const std::string& name = "untouched") {
    if (pairs.empty()) throw std::invalid_argument("eval: no pairs");
    MethodRun run;
    run.name = name;
    for (const auto& p : pairs) accumulate(run, p.original_image, p, seed);
    return run;
}

inline double mean(std::span<const double> v) {
    double acc = 0;
    for (double x : v) acc += x;
    return v.empty() ? 0.0 : acc / double(v.size());
}

inline double success_rate(const MethodRun& run) {
    double acc = 0;
    for (int s : run.success) acc += s;
    return run.success.empty() ? 0.0 : acc / double(run.success.size());
}

}  // namespace dedit
