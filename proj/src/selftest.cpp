#include "dedit/selftest.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "dedit/checkpoint.hpp"
#include "dedit/config.hpp"
#include "dedit/dataset.hpp"
#include "dedit/diffusion.hpp"
#include "dedit/image_io.hpp"
#include "dedit/metrics.hpp"
#include "dedit/model.hpp"

namespace dedit {

namespace {

ModelConfig small_model() {
    ModelConfig c;
    c.image_size = 8;
    c.embed_dim = 16;
    c.heads = 2;
    c.lora_rank = 2;
    return c;
}

double max_abs_diff(const TensorF& a, const TensorF& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(double(a.values()[i]) - double(b.values()[i])));
    return m;
}

// Nudges every trainable parameter off its zero-init point so gradients and
// merge deltas are exercised on nontrivial values.
template <class S>
void open_gates(ModelT<S>& m, std::uint64_t seed, double stddev) {
    Rng rng(seed);
    ParamSetT<S> tp = trainable_params(m);
    tp.for_each([&](const std::string&, TensorT<S>& t, bool) {
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] += S(rng.normal() * stddev);
    });
}

using Check = void (*)(std::ostringstream&);

void check_zero_init_identity(std::ostringstream& why) {
    ModelT<float> m = build_model<float>(small_model(), 3);
    Rng rng(4);
    double worst = 0;
    for (int i = 0; i < 3; ++i) {
        TensorF z = TensorF::randn({3, 8, 8}, rng);
        TensorF z_o = TensorF::randn({3, 8, 8}, rng);
        const EditPair probe = gen_pair(Rng(i));
        const RefCacheT<float> ref = forward_ref(m, z_o);
        const TensorF bridged = forward_denoiser(m, z, 5, probe.description, &ref);
        const TensorF bypassed = forward_denoiser(m, z, 5, probe.description, nullptr);
        worst = std::max(worst, max_abs_diff(bridged, bypassed));
    }
    if (worst >= 1e-6) why << "bridge moves a fresh model by " << worst;
}

void check_cfg_algebra(std::ostringstream& why) {
    ModelT<float> m = build_model<float>(small_model(), 5);
    open_gates(m, 6, 0.05);
    Rng rng(7);
    TensorF z = TensorF::randn({3, 8, 8}, rng);
    TensorF z_o = TensorF::randn({3, 8, 8}, rng);
    const EditPair probe = gen_pair(Rng(1));
    const RefCacheT<float> ref = forward_ref(m, z_o);

    const long before = m.denoiser_evals;
    const TensorF guided = cfg_epsilon(m, z, 9, ref, probe.description, 1.0, 1.0);
    if (m.denoiser_evals - before != 3) {
        why << "guided call used " << (m.denoiser_evals - before) << " evaluations, want 3";
        return;
    }
    const TensorF full = forward_denoiser(m, z, 9, probe.description, &ref);
    const double d_full = max_abs_diff(guided, full);
    const TokenSeq null_toks = null_text();
    const TensorF uncond = forward_denoiser(m, z, 9, null_toks, nullptr);
    const double d_uncond = max_abs_diff(cfg_epsilon(m, z, 9, ref, probe.description, 0.0, 0.0), uncond);
    if (d_full >= 1e-6 || d_uncond >= 1e-6)
        why << "guidance weights do not collapse correctly: " << d_full << ", " << d_uncond;
}

void check_lora_merge(std::ostringstream& why) {
    ModelT<float> m = build_model<float>(small_model(), 11);
    open_gates(m, 12, 0.1);
    ModelT<float> merged = build_model<float>(small_model(), 11);
    open_gates(merged, 12, 0.1);
    merge_lora(merged);

    Rng rng(13);
    double worst = 0;
    for (int i = 0; i < 20; ++i) {
        TensorF z = TensorF::randn({3, 8, 8}, rng);
        TensorF z_o = TensorF::randn({3, 8, 8}, rng);
        const RefCacheT<float> ra = forward_ref(m, z_o);
        const RefCacheT<float> rb = forward_ref(merged, z_o);
        const EditPair probe = gen_pair(Rng(i));
        worst = std::max(worst, max_abs_diff(forward_denoiser(m, z, 3, probe.description, &ra),
                                             forward_denoiser(merged, z, 3, probe.description, &rb)));
    }
    if (worst >= 1e-5) {
        why << "merged evaluation drifts by " << worst;
        return;
    }
    try {
        trainable_params(merged);
        why << "merged model still hands out trainable parameters";
    } catch (const std::logic_error&) {
    }
}

void check_dropout_stats(std::ostringstream& why) {
    TrainConfig tc;
    Rng rng(17);
    const int n = 10000;
    int text = 0, image = 0, both = 0;
    for (int i = 0; i < n; ++i) {
        const ExampleDraw d = draw_example(rng, tc, 200);
        text += d.drop_text;
        image += d.drop_image;
        both += d.drop_text && d.drop_image;
    }
    const double ft = double(text) / n, fi = double(image) / n, fb = double(both) / n;
    const double sigma = std::sqrt(0.0025 * (1 - 0.0025) / n);
    if (ft < 0.04 || ft > 0.06 || fi < 0.04 || fi > 0.06)
        why << "marginal drop rates off: text " << ft << ", image " << fi;
    else if (std::abs(fb - 0.0025) > 3 * sigma)
        why << "joint drop rate " << fb << " outside 3 sigma of 0.0025";
}

void check_noise_isolation(std::ostringstream& why) {
    std::vector<EditPair> pairs;
    for (std::uint64_t i = 0; i < 4; ++i) pairs.push_back(gen_pair(Rng(i + 40)));
    TrainConfig tc;
    tc.batch_size = 4;
    const NoiseSchedule sch = NoiseSchedule::linear();
    Rng rng(19);
    int checked = 0;
    bool clean = true;
    const EpsFn<float> probe = [&](const TrainSample<float>& s) {
        if (s.has_ref) {
            ++checked;
            bool match = false;
            for (const auto& p : pairs)
                if (s.ref.node().get() == p.original_image.node().get()) match = true;
            clean = clean && match;
        }
        return TensorF::zeros(s.z_t.shape());
    };
    for (int step = 0; step < 50; ++step) (void)training_loss_with(probe, pairs, TextMode::kDescription, sch, tc, rng);
    if (!clean)
        why << "a reference input was not the stored clean original";
    else if (checked < 100)
        why << "only " << checked << " reference feeds observed";
}

void check_dataset_roundtrip(std::ostringstream& why) {
    const auto pairs = gen_dataset(23, 8);
    const auto bytes = serialize_dataset(pairs);
    const auto back = deserialize_dataset(bytes);
    if (serialize_dataset(back) != bytes) why << "dataset bytes changed across a roundtrip";
}

void check_checkpoint_roundtrip(std::ostringstream& why) {
    RunConfig rc;
    rc.model = small_model();
    ModelT<float> m = build_model<float>(rc.model, rc.train.seed);
    const auto bytes = serialize_checkpoint(m.params, rc, 77);
    const Checkpoint ckpt = deserialize_checkpoint(bytes);
    ModelT<float> other = build_model<float>(rc.model, 12345);
    restore_params(other.params, ckpt);
    if (serialize_checkpoint(other.params, rc, 77) != bytes)
        why << "checkpoint bytes changed across a roundtrip";
}

void check_config_roundtrip(std::ostringstream& why) {
    const RunConfig def;
    if (run_config_to_json(run_config_from_json(run_config_to_json(def))) != run_config_to_json(def)) {
        why << "config json does not roundtrip";
        return;
    }
    try {
        run_config_from_json("{\"no_such_key\": 1}");
        why << "unknown config key was accepted";
    } catch (const std::invalid_argument&) {
    }
}

void check_ppm_format(std::ostringstream& why) {
    const auto bytes = encode_ppm(TensorF::full({3, 1, 1}, 1.0f));
    const std::string header = "P6\n1 1\n255\n";
    std::vector<std::uint8_t> want(header.begin(), header.end());
    want.insert(want.end(), {0xFF, 0xFF, 0xFF});
    if (bytes != want) why << "1x1 white pixel bytes are wrong";
}

void check_schedule(std::ostringstream& why) {
    const NoiseSchedule s = NoiseSchedule::linear();
    if (s.abar(0) != 1.0) {
        why << "alpha_bar(0) != 1";
        return;
    }
    for (int t = 1; t <= s.T; ++t)
        if (!(s.abar(t) < s.abar(t - 1))) {
            why << "alpha_bar not strictly decreasing at t=" << t;
            return;
        }
}

void check_metric_oracles(std::ostringstream& why) {
    const EditPair p = gen_pair(Rng(29));
    if (ssim(p.target_image, p.target_image) != 1.0) {
        why << "ssim of identical images is not exactly 1";
        return;
    }
    if (std::abs(psnr_from_mse(0.01, 1.0) - 20.0) >= 1e-9) {
        why << "psnr reference point off";
        return;
    }
    Rng rng(30);
    TensorF out = TensorF::randn({3, 16, 16}, rng, 0.5);
    std::size_t inside = 0;
    for (auto v : p.mask) inside += v != 0;
    const double li = masked_l1(out, p.target_image, p.mask, true);
    const double lo = masked_l1(out, p.target_image, p.mask, false);
    const double recombined =
        (li * double(inside) + lo * double(p.mask.size() - inside)) / double(p.mask.size());
    if (std::abs(recombined - l1(out, p.target_image)) >= 1e-9)
        why << "mask/complement recombination off";
}

}  // namespace

std::vector<CheckResult> run_selftest(bool sabotage_frozen) {
    std::vector<CheckResult> out;
    const auto record = [&out](const char* name, Check fn) {
        CheckResult r;
        r.name = name;
        try {
            std::ostringstream why;
            fn(why);
            r.detail = why.str();
            r.pass = r.detail.empty();
        } catch (const std::exception& e) {
            r.pass = false;
            r.detail = std::string("exception: ") + e.what();
        }
        out.push_back(std::move(r));
    };

    record("zero-init-identity", check_zero_init_identity);
    record("cfg-algebra", check_cfg_algebra);
    record("lora-merge", check_lora_merge);
    record("dropout-stats", check_dropout_stats);
    record("noise-isolation", check_noise_isolation);
    record("dataset-roundtrip", check_dataset_roundtrip);
    record("checkpoint-roundtrip", check_checkpoint_roundtrip);
    record("config-roundtrip", check_config_roundtrip);
    record("ppm-format", check_ppm_format);
    record("noise-schedule", check_schedule);
    record("metric-oracles", check_metric_oracles);

    // Frozen-base check runs a short training burst and then compares every
    // frozen tensor byte for byte against its pre-training snapshot.
    {
        CheckResult r;
        r.name = "frozen-base";
        try {
            ModelConfig mc = small_model();
            ModelT<float> m = build_model<float>(mc, 31);
            std::vector<std::pair<std::string, std::vector<float>>> snap;
            m.params.for_each([&](const std::string& name, const TensorF& t, bool frozen) {
                if (frozen) snap.emplace_back(name, std::vector<float>(t.values().begin(), t.values().end()));
            });

            std::vector<EditPair> pairs;
            for (std::uint64_t i = 0; i < 8; ++i) pairs.push_back(gen_pair(Rng(i + 60)));
            // The model reads 8x8 inputs; shrink the pairs by rendering tiny
            // stand-ins instead of reusing the 16x16 dataset images.
            TrainConfig tc;
            tc.batch_size = 4;
            tc.steps = 20;
            tc.lr = 1e-3;
            const NoiseSchedule sch = NoiseSchedule::linear();
            ParamSetT<float> tp = trainable_params(m);
            AdamWT<float> opt(tc);
            const EpsFn<float> eps_fn = model_eps_fn(m, true);
            Rng rng(33);
            Rng data_rng(34);
            for (int step = 0; step < tc.steps; ++step) {
                std::vector<EditPair> batch;
                for (int i = 0; i < tc.batch_size; ++i) {
                    EditPair p;
                    p.original_image = TensorF::randn({3, 8, 8}, data_rng, 0.5);
                    p.target_image = TensorF::randn({3, 8, 8}, data_rng, 0.5);
                    p.description = pairs[i].description;
                    p.instruction = pairs[i].instruction;
                    batch.push_back(std::move(p));
                }
                (void)training_step(tp, opt, eps_fn, batch, TextMode::kDescription, sch, tc, rng);
            }

            if (sabotage_frozen) m.params.at("block0.attn.wq").data()[0] += 0.5f;

            std::string culprit;
            for (const auto& [name, bytes] : snap) {
                const TensorF& t = m.params.at(name);
                if (std::memcmp(t.data(), bytes.data(), bytes.size() * sizeof(float)) != 0) {
                    culprit = name;
                    break;
                }
            }
            r.pass = culprit.empty();
            if (!r.pass) r.detail = "frozen parameter '" + culprit + "' changed during training";
        } catch (const std::exception& e) {
            r.pass = false;
            r.detail = std::string("exception: ") + e.what();
        }
        out.push_back(std::move(r));
    }

    return out;
}

FdReport run_gradcheck(int n_samples, double h, std::uint64_t seed) {
    ModelConfig mc;  // full-width: 2 blocks, d=64
    ModelT<double> m = build_model<double>(mc, seed);
    open_gates(m, seed + 1, 0.05);
    ParamSetT<double> tp = trainable_params(m);
    // No ref memoization here: the float-to-double conversion mints a new
    // tensor per call, so cache keys would never repeat.
    const EpsFn<double> eps_fn = model_eps_fn(m, false);

    std::vector<EditPair> pairs;
    for (std::uint64_t i = 0; i < 4; ++i) pairs.push_back(gen_pair(Rng(i + 90)));
    TrainConfig tc;
    tc.batch_size = 4;
    const NoiseSchedule sch = NoiseSchedule::linear();

    // Fresh rng per evaluation keeps the loss a deterministic function of the
    // parameters, as the finite-difference probe requires.
    const std::function<TensorT<double>()> loss = [&]() {
        Rng rng(seed + 2);
        return training_loss_with(eps_fn, pairs, TextMode::kDescription, sch, tc, rng).loss;
    };
    Rng pick(seed + 3);
    return finite_diff_check<double>(loss, tp, n_samples, h, pick);
}

}  // namespace dedit
