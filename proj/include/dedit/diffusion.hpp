#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "dedit/dataset.hpp"
#include "dedit/model.hpp"

// Forward process, training objective, optimizer, and guided samplers.
// Training noises only the edited target image; the reference enters clean at
// the fixed reference timestep. Sampling combines three denoiser branches:
// unconditional, image-only, and fully conditional.

namespace dedit {

// ---- schedule -------------------------------------------------------------

struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // beta[t] for t in 1..T; beta[0] unused
    std::vector<double> alpha_bar;  // alpha_bar[t] for t in 0..T; alpha_bar[0] = 1

    double abar(int t) const {
        if (t < 0 || t > T)
            throw std::out_of_range("schedule: timestep " + std::to_string(t) + " outside [0, " +
                                    std::to_string(T) + "]");
        return alpha_bar[t];
    }

    static NoiseSchedule from_betas(std::vector<double> betas) {
        if (betas.empty()) throw std::invalid_argument("schedule: need at least one step");
        NoiseSchedule s;
        s.T = static_cast<int>(betas.size());
        s.beta.assign(s.T + 1, 0.0);
        s.alpha_bar.assign(s.T + 1, 1.0);
        for (int t = 1; t <= s.T; ++t) {
            const double b = betas[t - 1];
            if (!(b > 0.0 && b < 1.0))
                throw std::invalid_argument("schedule: beta must lie in (0,1)");
            s.beta[t] = b;
            s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - b);
        }
        return s;
    }

    static NoiseSchedule linear(int T = 200, double beta_start = 1e-4, double beta_end = 0.02) {
        if (T < 1) throw std::invalid_argument("schedule: step count must be positive");
        std::vector<double> betas(T);
        for (int t = 0; t < T; ++t)
            betas[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (T - 1);
        return from_betas(std::move(betas));
    }
};

template <class S>
TensorT<S> add_noise(const TensorT<S>& z0, int t, const TensorT<S>& eps,
                     const NoiseSchedule& sch) {
    if (t < 1 || t > sch.T)
        throw std::out_of_range("add_noise: timestep " + std::to_string(t) + " outside [1, " +
                                std::to_string(sch.T) + "]");
    if (z0.shape() != eps.shape())
        throw std::invalid_argument("add_noise: noise shape differs from input shape");
    const double ab = sch.abar(t);
    return add(scale(z0, static_cast<S>(std::sqrt(ab))),
               scale(eps, static_cast<S>(std::sqrt(1.0 - ab))));
}

// ---- configuration --------------------------------------------------------

enum class SamplerKind { kAncestral = 0, kDeterministic = 1 };

inline const char* sampler_name(SamplerKind k) {
    return k == SamplerKind::kAncestral ? "ancestral" : "deterministic";
}
inline SamplerKind sampler_from_name(const std::string& s) {
    if (s == "ancestral") return SamplerKind::kAncestral;
    if (s == "deterministic") return SamplerKind::kDeterministic;
    throw std::invalid_argument("unknown sampler '" + s + "'");
}

struct GuidanceConfig {
    double lambda_i = 1.5;
    double lambda_t = 7.5;
    SamplerKind sampler = SamplerKind::kAncestral;
    int inference_steps = 25;

    void validate(int T) const {
        if (lambda_i < 0 || lambda_t < 0)
            throw std::invalid_argument("guidance: weights must be nonnegative");
        if (inference_steps < 1 || inference_steps > T)
            throw std::invalid_argument("guidance: inference steps must lie in [1, T]");
    }
};

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 16;
    int steps = 2000;
    double text_drop = 0.05;
    double image_drop = 0.05;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    // Base preparation: before the bridge is trained, the backbone itself is
    // taught text-conditional denoising for this many steps, then refrozen.
    // 0 skips the phase and trains the bridge on the raw initialization.
    int pretrain_steps = 0;
    double pretrain_lr = 1e-3;

    void validate() const {
        if (!(lr > 0)) throw std::invalid_argument("train: learning rate must be positive");
        if (batch_size < 1) throw std::invalid_argument("train: batch size must be positive");
        if (steps < 0) throw std::invalid_argument("train: negative step count");
        if (text_drop < 0 || text_drop > 1 || image_drop < 0 || image_drop > 1)
            throw std::invalid_argument("train: drop probabilities must lie in [0,1]");
        if (pretrain_steps < 0) throw std::invalid_argument("train: negative pretraining step count");
        if (!(pretrain_lr > 0))
            throw std::invalid_argument("train: pretraining learning rate must be positive");
    }
};

enum class TextMode { kDescription = 0, kInstruction = 1 };

inline const char* text_mode_name(TextMode m) {
    return m == TextMode::kDescription ? "description" : "instruction";
}
inline TextMode text_mode_from_name(const std::string& s) {
    if (s == "description") return TextMode::kDescription;
    if (s == "instruction") return TextMode::kInstruction;
    throw std::invalid_argument("unknown text mode '" + s + "'");
}

// ---- training objective ---------------------------------------------------

// Per-example randomness, drawn in a fixed order so runs are reproducible.
struct ExampleDraw {
    int t = 1;
    bool drop_text = false;
    bool drop_image = false;
};

inline ExampleDraw draw_example(Rng& rng, const TrainConfig& tc, int T) {
    ExampleDraw d;
    d.t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(T)));
    d.drop_text = rng.bernoulli(tc.text_drop);
    d.drop_image = rng.bernoulli(tc.image_drop);
    return d;
}

template <class S>
TensorT<S> to_precision(const TensorF& x) {
    if constexpr (std::is_same_v<S, float>) {
        return x;
    } else {
        std::vector<S> v(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) v[i] = static_cast<S>(x.values()[i]);
        return TensorT<S>::from_data(x.shape(), std::move(v));
    }
}

// One prepared training example. `ref` is the clean original image, absent
// when image conditioning is dropped. `eps` is the injected noise, exposed so
// oracle stubs can reproduce it.
template <class S>
struct TrainSample {
    TensorT<S> z_t;
    int t = 1;
    TokenSeq tokens{};
    bool has_ref = false;
    TensorT<S> ref;
    TensorT<S> eps;
};

template <class S>
using EpsFn = std::function<TensorT<S>(const TrainSample<S>&)>;

template <class S>
struct LossBreakdown {
    TensorT<S> loss;
    int text_drops = 0;
    int image_drops = 0;
};

// Mean squared error between injected and predicted noise over a batch.
// Noise is applied only to the target image; the reference stays clean.
template <class S>
LossBreakdown<S> training_loss_with(const EpsFn<S>& eps_fn, std::span<const EditPair> batch,
                                    TextMode tm, const NoiseSchedule& sch, const TrainConfig& tc,
                                    Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("training: empty batch");
    LossBreakdown<S> out;
    TensorT<S> acc = TensorT<S>::scalar(S(0));
    for (const EditPair& pair : batch) {
        const ExampleDraw d = draw_example(rng, tc, sch.T);
        TrainSample<S> s;
        s.t = d.t;
        TensorT<S> z0 = to_precision<S>(pair.target_image);
        s.eps = TensorT<S>::randn(z0.shape(), rng);
        s.z_t = add_noise(z0, d.t, s.eps, sch);
        s.tokens = d.drop_text ? null_text()
                               : (tm == TextMode::kDescription ? pair.description : pair.instruction);
        if (!d.drop_image) {
            s.has_ref = true;
            s.ref = to_precision<S>(pair.original_image);
        }
        out.text_drops += d.drop_text;
        out.image_drops += d.drop_image;
        acc = add(acc, mean_all(square(sub(eps_fn(s), s.eps))));
    }
    out.loss = scale(acc, static_cast<S>(1.0 / batch.size()));
    return out;
}

// Denoiser closure over a model. Reference features are recomputed per call
// unless memoization is enabled; the cache depends only on frozen weights and
// the clean original, so memoized and recomputed features are identical.
template <class S>
EpsFn<S> model_eps_fn(const ModelT<S>& m, bool memoize_ref) {
    auto memo = std::make_shared<std::unordered_map<const void*, RefCacheT<S>>>();
    return [&m, memo, memoize_ref](const TrainSample<S>& s) {
        if (!s.has_ref) return forward_denoiser(m, s.z_t, s.t, s.tokens, nullptr);
        if (memoize_ref) {
            const void* key = s.ref.node().get();
            auto it = memo->find(key);
            if (it == memo->end()) it = memo->emplace(key, forward_ref(m, s.ref)).first;
            return forward_denoiser(m, s.z_t, s.t, s.tokens, &it->second);
        }
        RefCacheT<S> cache = forward_ref(m, s.ref);
        return forward_denoiser(m, s.z_t, s.t, s.tokens, &cache);
    };
}

// ---- optimizer ------------------------------------------------------------

// Decoupled-weight-decay gradient method with bias correction. A non-finite
// gradient rejects the whole step before any parameter moves.
template <class S>
class AdamWT {
public:
    explicit AdamWT(const TrainConfig& tc) : tc_(tc) {}

    long steps_taken() const { return steps_; }

    // For schedules driven by the caller; moment estimates are untouched.
    void set_lr(double lr) { tc_.lr = lr; }

    void step(ParamSetT<S>& params) {
        params.for_each([&](const std::string& name, const TensorT<S>& t, bool frozen) {
            if (frozen) return;
            for (const S g : t.grad())
                if (!std::isfinite(static_cast<double>(g)))
                    throw std::runtime_error("optimizer: non-finite gradient in '" + name +
                                             "', step rejected");
        });
        ++steps_;
        const double bc1 = 1.0 - std::pow(tc_.beta1, steps_);
        const double bc2 = 1.0 - std::pow(tc_.beta2, steps_);
        params.for_each([&](const std::string& name, TensorT<S>& t, bool frozen) {
            if (frozen) return;
            auto& [m, v] = state_[name];
            if (m.empty()) {
                m.assign(t.size(), 0.0);
                v.assign(t.size(), 0.0);
            }
            auto grads = t.grad();
            S* p = t.data();
            for (std::size_t i = 0; i < t.size(); ++i) {
                const double g = i < grads.size() ? static_cast<double>(grads[i]) : 0.0;
                m[i] = tc_.beta1 * m[i] + (1.0 - tc_.beta1) * g;
                v[i] = tc_.beta2 * v[i] + (1.0 - tc_.beta2) * g * g;
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                p[i] -= static_cast<S>(tc_.lr * (mh / (std::sqrt(vh) + tc_.adam_eps) +
                                                 tc_.weight_decay * p[i]));
            }
        });
    }

private:
    TrainConfig tc_;
    long steps_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

using AdamWF = AdamWT<float>;
using AdamWD = AdamWT<double>;

struct StepResult {
    double loss = 0;
    int text_drops = 0;
    int image_drops = 0;
};

template <class S>
StepResult training_step(ParamSetT<S>& trainables, AdamWT<S>& opt, const EpsFn<S>& eps_fn,
                         std::span<const EditPair> batch, TextMode tm, const NoiseSchedule& sch,
                         const TrainConfig& tc, Rng& rng) {
    trainables.zero_grads();
    LossBreakdown<S> lb = training_loss_with(eps_fn, batch, tm, sch, tc, rng);
    const double loss = static_cast<double>(lb.loss.value());
    backward(lb.loss);
    opt.step(trainables);
    return {loss, lb.text_drops, lb.image_drops};
}

// ---- guidance and sampling ------------------------------------------------

// The three-branch composition: unconditional, plus image guidance, plus text
// guidance on top of the image-conditioned branch.
template <class S>
TensorT<S> cfg_combine(const TensorT<S>& eps_uncond, const TensorT<S>& eps_image,
                       const TensorT<S>& eps_full, double lambda_i, double lambda_t) {
    return add(eps_uncond, add(scale(sub(eps_image, eps_uncond), static_cast<S>(lambda_i)),
                               scale(sub(eps_full, eps_image), static_cast<S>(lambda_t))));
}

// Exactly three denoiser evaluations, in the fixed order (unconditional,
// image-only, full). The unconditional branch is handed no reference at all.
template <class S>
TensorT<S> cfg_epsilon(const ModelT<S>& m, const TensorT<S>& z_t, int t,
                       std::type_identity_t<const RefCacheT<S>&> ref,
                       std::span<const std::uint16_t> tokens, double lambda_i, double lambda_t) {
    const TokenSeq null_toks = null_text();
    TensorT<S> eps_uncond = forward_denoiser(m, z_t, t, null_toks, nullptr);
    TensorT<S> eps_image = forward_denoiser(m, z_t, t, null_toks, &ref);
    TensorT<S> eps_full = forward_denoiser(m, z_t, t, tokens, &ref);
    return cfg_combine(eps_uncond, eps_image, eps_full, lambda_i, lambda_t);
}

// Reverse process from pure noise. The reference features are computed once.
// The deterministic variant consumes randomness only for the initial draw;
// the ancestral variant injects schedule-scaled noise every step. The clean
// prediction is clamped to a few signal ranges to keep early, badly guided
// steps from blowing up.
template <class S>
TensorT<S> sample(const ModelT<S>& m, const TensorT<S>& z_o,
                  std::span<const std::uint16_t> tokens, const GuidanceConfig& g,
                  const NoiseSchedule& sch, Rng rng) {
    g.validate(sch.T);
    const RefCacheT<S> ref = forward_ref(m, z_o);
    const int K = g.inference_steps;

    TensorT<S> z = TensorT<S>::randn(z_o.shape(), rng);
    constexpr double kCleanClamp = 2.0;

    for (int k = K; k >= 1; --k) {
        const int t = static_cast<int>((static_cast<long>(k) * sch.T) / K);
        const int t_prev = static_cast<int>((static_cast<long>(k - 1) * sch.T) / K);
        const double ab = sch.abar(t);
        const double ab_prev = sch.abar(t_prev);

        TensorT<S> eps = cfg_epsilon(m, z, t, ref, tokens, g.lambda_i, g.lambda_t);

        std::vector<S> x0(z.size());
        const double inv_sa = 1.0 / std::sqrt(ab);
        const double sq1m = std::sqrt(1.0 - ab);
        for (std::size_t i = 0; i < z.size(); ++i) {
            double v = inv_sa * (static_cast<double>(z.values()[i]) - sq1m * eps.values()[i]);
            v = std::clamp(v, -kCleanClamp, kCleanClamp);
            x0[i] = static_cast<S>(v);
        }

        double sigma = 0.0;
        if (g.sampler == SamplerKind::kAncestral && t_prev > 0)
            sigma = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev));
        const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));

        std::vector<S> next(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
            double v = std::sqrt(ab_prev) * x0[i] + dir * eps.values()[i];
            if (sigma > 0) v += sigma * rng.normal();
            next[i] = static_cast<S>(v);
        }
        z = TensorT<S>::from_data(z_o.shape(), std::move(next));
    }
    return z;
}

}  // namespace dedit
