#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "dedit/param_set.hpp"
#include "dedit/rng.hpp"
#include "dedit/tensor.hpp"

// The denoiser: patchify -> B pre-norm blocks of [self-attention + reference
// bridge, text cross-attention, MLP] -> unpatchify. The same network runs in
// two roles. A reference pass consumes the clean original image at timestep 0
// with NULL text and caches each block's normalized self-attention input. The
// denoising pass may then attach a bridge at every block: cross-attention
// whose query comes from the cached reference features and whose key/value
// come from the current pass, computed with a frozen copy of the block's
// self-attention weights plus trainable low-rank deltas, fused into the
// residual through a zero-initialized linear map. Everything except the
// low-rank factors and the fusion maps is frozen.

namespace dedit {

enum class FusionMode { kZeroLinear = 0, kDirectAddition = 1, kDirectReplacement = 2 };

inline const char* fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::kZeroLinear: return "zero-linear";
        case FusionMode::kDirectAddition: return "direct-addition";
        case FusionMode::kDirectReplacement: return "direct-replacement";
    }
    throw std::invalid_argument("unknown fusion mode");
}

inline FusionMode fusion_mode_from_name(const std::string& s) {
    if (s == "zero-linear") return FusionMode::kZeroLinear;
    if (s == "direct-addition") return FusionMode::kDirectAddition;
    if (s == "direct-replacement") return FusionMode::kDirectReplacement;
    throw std::invalid_argument("unknown fusion mode '" + s + "'");
}

struct ModelConfig {
    int image_size = 16;
    int channels = 3;
    int patch = 2;
    int embed_dim = 64;
    int blocks = 2;
    int heads = 4;
    int vocab_size = 23;
    int max_text_len = 16;
    int lora_rank = 8;
    float lora_alpha = 8.0f;  // defaults to the rank so the delta scale is 1
    FusionMode fusion = FusionMode::kZeroLinear;
    // Default orientation: bridge query from the reference pass, key/value
    // from the denoising pass. Swapping is exposed for study only.
    bool bridge_swap_roles = false;

    int grid() const { return image_size / patch; }
    int tokens() const { return grid() * grid(); }
    int patch_dim() const { return channels * patch * patch; }

    void validate() const {
        if (image_size <= 0 || channels <= 0 || patch <= 0)
            throw std::invalid_argument("config: image extents must be positive");
        if (image_size % patch != 0)
            throw std::invalid_argument("config: patch size must divide image side");
        if (embed_dim <= 0 || embed_dim % 4 != 0)
            throw std::invalid_argument("config: embed dim must be a positive multiple of 4");
        if (heads <= 0 || embed_dim % heads != 0)
            throw std::invalid_argument("config: head count must divide embed dim");
        if (blocks < 1) throw std::invalid_argument("config: need at least one block");
        if (vocab_size < 2) throw std::invalid_argument("config: vocab too small");
        if (max_text_len < 1) throw std::invalid_argument("config: max text length must be positive");
        if (lora_rank < 1) throw std::invalid_argument("config: LoRA rank must be >= 1");
        if (!(lora_alpha > 0)) throw std::invalid_argument("config: LoRA alpha must be positive");
    }
};

// Reference features: one tensor per block, captured at the normalized
// self-attention input of the reference pass. The reference timestep is
// fixed at 0. `reads` counts bridge consumptions, used by tests to verify
// that unconditional branches never touch the cache.
template <class S>
struct RefCacheT {
    std::vector<TensorT<S>> h;
    static constexpr int kRefTimestep = 0;
    mutable long reads = 0;
};

template <class S>
struct ModelT {
    ModelConfig cfg;
    ParamSetT<S> params;
    TensorT<S> pos;       // [tokens, d], fixed sinusoidal grid encoding (not trained)
    TensorT<S> text_pos;  // [max_text_len, d], fixed sinusoidal slot encoding
    std::shared_ptr<const std::vector<std::size_t>> patch_map;    // image -> token layout
    std::shared_ptr<const std::vector<std::size_t>> unpatch_map;  // inverse
    bool merged = false;  // low-rank deltas folded into the bridge base; terminal

    mutable long denoiser_evals = 0;
    mutable long ref_evals = 0;
};

using ModelF = ModelT<float>;
using ModelD = ModelT<double>;
using RefCacheF = RefCacheT<float>;
using RefCacheD = RefCacheT<double>;

// ---- embeddings -----------------------------------------------------------

// Sinusoidal timestep features: first half sin, second half cos over
// geometric frequencies starting at 1.
template <class S>
TensorT<S> timestep_embedding(int t, int dim) {
    if (dim <= 0 || dim % 2 != 0)
        throw std::invalid_argument("timestep_embedding: dim must be positive and even");
    const int half = dim / 2;
    std::vector<S> v(dim);
    for (int k = 0; k < half; ++k) {
        const double freq = std::pow(10000.0, -static_cast<double>(k) / half);
        v[k] = static_cast<S>(std::sin(t * freq));
        v[half + k] = static_cast<S>(std::cos(t * freq));
    }
    return TensorT<S>::from_data({dim}, std::move(v));
}

namespace detail {

// [n, dim] table of sinusoidal encodings of the integers 0..n-1.
template <class S>
std::vector<S> sinusoid_rows(int n, int dim, double scl) {
    std::vector<S> v(static_cast<std::size_t>(n) * dim);
    const int half = dim / 2;
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < half; ++k) {
            const double freq = std::pow(10000.0, -static_cast<double>(k) / half);
            v[i * dim + k] = static_cast<S>(scl * std::sin(i * freq));
            v[i * dim + half + k] = static_cast<S>(scl * std::cos(i * freq));
        }
    return v;
}

// Grid encoding: first half of the features encodes the row index, second
// half the column index.
template <class S>
TensorT<S> grid_pos_table(int grid, int dim, double scl) {
    const int half = dim / 2;
    const auto rows = sinusoid_rows<S>(grid, half, scl);
    std::vector<S> v(static_cast<std::size_t>(grid) * grid * dim);
    for (int r = 0; r < grid; ++r)
        for (int c = 0; c < grid; ++c)
            for (int k = 0; k < half; ++k) {
                v[(r * grid + c) * dim + k] = rows[r * half + k];
                v[(r * grid + c) * dim + half + k] = rows[c * half + k];
            }
    return TensorT<S>::from_data({grid * grid, dim}, std::move(v));
}

}  // namespace detail

// ---- patch tokenization ---------------------------------------------------

// Index map sending image scalars [C,H,W] to token layout [tokens, C*p*p].
inline std::shared_ptr<const std::vector<std::size_t>> make_patch_map(int channels, int side,
                                                                      int patch) {
    if (side % patch != 0) throw std::invalid_argument("patchify: patch size must divide image side");
    const int grid = side / patch;
    auto map = std::make_shared<std::vector<std::size_t>>();
    map->reserve(static_cast<std::size_t>(channels) * side * side);
    for (int pr = 0; pr < grid; ++pr)
        for (int pc = 0; pc < grid; ++pc)
            for (int ch = 0; ch < channels; ++ch)
                for (int dr = 0; dr < patch; ++dr)
                    for (int dc = 0; dc < patch; ++dc) {
                        const int r = pr * patch + dr, c = pc * patch + dc;
                        map->push_back(static_cast<std::size_t>((ch * side + r) * side + c));
                    }
    return map;
}

inline std::shared_ptr<const std::vector<std::size_t>> make_unpatch_map(int channels, int side,
                                                                        int patch) {
    const auto fwd = make_patch_map(channels, side, patch);
    auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
    for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[(*fwd)[i]] = i;
    return inv;
}

template <class S>
TensorT<S> patchify(const TensorT<S>& img, int patch) {
    if (img.rank() != 3) throw std::invalid_argument("patchify: expected [C,H,W]");
    const int ch = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
    if (h != w) throw std::invalid_argument("patchify: image must be square");
    const auto map = make_patch_map(ch, h, patch);
    const int grid = h / patch;
    return take(img, map, {grid * grid, ch * patch * patch});
}

template <class S>
TensorT<S> unpatchify(const TensorT<S>& tok, int channels, int side, int patch) {
    if (tok.rank() != 2) throw std::invalid_argument("unpatchify: expected [tokens, d]");
    const auto map = make_unpatch_map(channels, side, patch);
    return take(tok, map, {channels, side, side});
}

// ---- attention ------------------------------------------------------------

// softmax(Q K^T / sqrt(d_h)) V over the last two axes; leading axes broadcast.
template <class S>
TensorT<S> attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v) {
    if (q.rank() < 2 || k.rank() < 2 || v.rank() < 2)
        throw std::invalid_argument("attention: operands must have rank >= 2");
    const int dh = q.shape().back();
    if (k.shape().back() != dh)
        throw std::invalid_argument("attention: query/key feature extents differ");
    if (v.shape()[v.rank() - 2] != k.shape()[k.rank() - 2])
        throw std::invalid_argument("attention: key/value row counts differ");
    TensorT<S> logits = scale(matmul(q, transpose_last(k)), static_cast<S>(1.0 / std::sqrt(dh)));
    return matmul(softmax(logits, -1), v);
}

// [n, d] inputs split into `heads` slices of d/heads features each.
template <class S>
TensorT<S> multihead_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                               int heads) {
    const int d = q.shape().back();
    if (d % heads != 0) throw std::invalid_argument("attention: head count must divide features");
    const int dh = d / heads;
    auto split = [&](const TensorT<S>& x) {
        const int n = x.shape()[0];
        return permute(reshape(x, {n, heads, dh}), {1, 0, 2});  // [heads, n, dh]
    };
    TensorT<S> out = attention(split(q), split(k), split(v));
    const int nq = q.shape()[0];
    return reshape(permute(out, {1, 0, 2}), {nq, d});
}

// ---- LoRA -----------------------------------------------------------------

// x (W + (alpha/r) A B), evaluated in factored form.
template <class S>
TensorT<S> lora_project(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& a,
                        const TensorT<S>& b, float alpha) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("lora_project: factor ranks do not match");
    if (a.shape()[0] != w.shape()[0] || b.shape()[1] != w.shape()[1])
        throw std::invalid_argument("lora_project: factors do not match base shape");
    const int r = a.shape()[1];
    TensorT<S> delta = matmul(matmul(x, a), b);
    return add(matmul(x, w), scale(delta, static_cast<S>(alpha / r)));
}

// ---- construction ---------------------------------------------------------

namespace detail {

// Gram-Schmidt on gaussian draws: `rows` orthonormal rows of length `dim`.
template <class S>
TensorT<S> orthonormal_rows(int rows, int dim, Rng& rng) {
    if (rows > dim) throw std::invalid_argument("orthonormal_rows: more rows than dimensions");
    std::vector<double> m(static_cast<std::size_t>(rows) * dim);
    for (auto& x : m) x = rng.normal();
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < i; ++j) {
            double dot = 0;
            for (int k = 0; k < dim; ++k) dot += m[i * dim + k] * m[j * dim + k];
            for (int k = 0; k < dim; ++k) m[i * dim + k] -= dot * m[j * dim + k];
        }
        double nrm = 0;
        for (int k = 0; k < dim; ++k) nrm += m[i * dim + k] * m[i * dim + k];
        nrm = std::sqrt(nrm);
        if (nrm < 1e-8) throw std::runtime_error("orthonormal_rows: degenerate draw");
        for (int k = 0; k < dim; ++k) m[i * dim + k] /= nrm;
    }
    std::vector<S> v(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) v[i] = static_cast<S>(m[i]);
    return TensorT<S>::from_data({rows, dim}, std::move(v));
}

template <class S>
TensorT<S> transpose_data(const TensorT<S>& x) {
    const int r = x.shape()[0], c = x.shape()[1];
    std::vector<S> v(x.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) v[j * r + i] = x.values()[i * c + j];
    return TensorT<S>::from_data({c, r}, std::move(v));
}

}  // namespace detail

// Residual-branch output scales at initialization. The frozen base is built
// as a near-identity map: the patch embedding has orthonormal rows and the
// un-embedding is its transpose, so with small residual branches the fresh
// network's prediction stays close to its input instead of random noise.
// This stands in for a pretrained backbone at desk scale.
inline constexpr double kInitSelfAttnScale = 0.15;
inline constexpr double kInitCrossAttnScale = 0.35;
inline constexpr double kInitMlpScale = 0.15;
inline constexpr double kInitTimeScale = 0.25;
inline constexpr double kPosScale = 0.25;
inline constexpr double kLoraInitStd = 0.125;

template <class S>
ModelT<S> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelT<S> m;
    m.cfg = cfg;
    const int d = cfg.embed_dim;
    const int pd = cfg.patch_dim();
    if (pd > d)
        throw std::invalid_argument("config: embed dim must be at least channels*patch^2");

    Rng root = Rng(seed).split("model");
    auto rn = [&](const std::string& name, Shape s, double stddev) {
        Rng r = root.split(name);
        return TensorT<S>::randn(std::move(s), r, stddev);
    };

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    auto& P = m.params;

    TensorT<S> patch_w = detail::orthonormal_rows<S>(pd, d, root);
    P.add("patch.w", patch_w, true);
    P.add("patch.b", TensorT<S>::zeros({d}), true);
    P.add("unpatch.w", detail::transpose_data(patch_w), true);
    P.add("unpatch.b", TensorT<S>::zeros({pd}), true);

    P.add("text.embed", rn("text.embed", {cfg.vocab_size, d}, 1.0), true);

    P.add("time.w0", rn("time.w0", {d, d}, inv_sqrt_d), true);
    P.add("time.b0", TensorT<S>::zeros({d}), true);
    P.add("time.w1", rn("time.w1", {d, d}, inv_sqrt_d * kInitTimeScale), true);
    P.add("time.b1", TensorT<S>::zeros({d}), true);

    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string pre = "block" + std::to_string(b) + ".";
        auto ln = [&](const std::string& which) {
            P.add(pre + which + ".g", TensorT<S>::full({d}, S(1)), true);
            P.add(pre + which + ".b", TensorT<S>::zeros({d}), true);
        };
        ln("ln1");
        ln("ln2");
        ln("ln3");

        P.add(pre + "attn.wq", rn(pre + "attn.wq", {d, d}, inv_sqrt_d), true);
        P.add(pre + "attn.wk", rn(pre + "attn.wk", {d, d}, inv_sqrt_d), true);
        P.add(pre + "attn.wv", rn(pre + "attn.wv", {d, d}, inv_sqrt_d), true);
        P.add(pre + "attn.wo", rn(pre + "attn.wo", {d, d}, inv_sqrt_d * kInitSelfAttnScale), true);

        P.add(pre + "xattn.wq", rn(pre + "xattn.wq", {d, d}, inv_sqrt_d), true);
        P.add(pre + "xattn.wk", rn(pre + "xattn.wk", {d, d}, inv_sqrt_d), true);
        P.add(pre + "xattn.wv", rn(pre + "xattn.wv", {d, d}, inv_sqrt_d), true);
        P.add(pre + "xattn.wo", rn(pre + "xattn.wo", {d, d}, inv_sqrt_d * kInitCrossAttnScale), true);

        P.add(pre + "mlp.w1", rn(pre + "mlp.w1", {d, 2 * d}, inv_sqrt_d), true);
        P.add(pre + "mlp.b1", TensorT<S>::zeros({2 * d}), true);
        P.add(pre + "mlp.w2",
              rn(pre + "mlp.w2", {2 * d, d}, kInitMlpScale / std::sqrt(2.0 * d)), true);
        P.add(pre + "mlp.b2", TensorT<S>::zeros({d}), true);

        // Bridge: frozen bitwise copies of this block's self-attention
        // weights, plus the only trainable parts of the whole model.
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            P.add(pre + "bridge.base." + std::string(w),
                  P.at(pre + "attn." + std::string(w)).clone(), true);
            P.add(pre + "bridge.lora." + std::string(w) + ".a",
                  rn(pre + "bridge.lora." + std::string(w) + ".a", {d, cfg.lora_rank},
                     kLoraInitStd),
                  false);
            P.add(pre + "bridge.lora." + std::string(w) + ".b",
                  TensorT<S>::zeros({cfg.lora_rank, d}), false);
        }
        P.add(pre + "bridge.fusion.w", TensorT<S>::zeros({d, d}), false);
        P.add(pre + "bridge.fusion.b", TensorT<S>::zeros({d}), false);
    }

    m.pos = detail::grid_pos_table<S>(cfg.grid(), d, kPosScale);
    m.text_pos = TensorT<S>::from_data({cfg.max_text_len, d},
                                       detail::sinusoid_rows<S>(cfg.max_text_len, d, kPosScale));
    m.patch_map = make_patch_map(cfg.channels, cfg.image_size, cfg.patch);
    m.unpatch_map = make_unpatch_map(cfg.channels, cfg.image_size, cfg.patch);
    return m;
}

// ---- forward passes -------------------------------------------------------

namespace detail {

template <class S>
TensorT<S> bridge_lora(const ModelT<S>& m, const std::string& pre, const char* w,
                       const TensorT<S>& x) {
    return lora_project(x, m.params.at(pre + "bridge.base." + std::string(w)),
                        m.params.at(pre + "bridge.lora." + std::string(w) + ".a"),
                        m.params.at(pre + "bridge.lora." + std::string(w) + ".b"),
                        m.cfg.lora_alpha);
}

// Shared trunk. `ref` attaches the bridge (null = unconditional branch,
// bridge sublayers bypassed entirely); `capture` records each block's
// normalized self-attention input.
template <class S>
TensorT<S> forward_trunk(const ModelT<S>& m, const TensorT<S>& z, int t,
                         std::span<const std::uint16_t> tokens,
                         std::type_identity_t<const RefCacheT<S>*> ref,
                         std::type_identity_t<RefCacheT<S>*> capture) {
    const ModelConfig& cfg = m.cfg;
    check_shape(z.shape(), "forward");
    if (z.rank() != 3 || z.shape()[0] != cfg.channels || z.shape()[1] != cfg.image_size ||
        z.shape()[2] != cfg.image_size)
        throw std::invalid_argument("forward: input shape does not match the configuration");
    if (static_cast<int>(tokens.size()) != cfg.max_text_len)
        throw std::invalid_argument("forward: expected exactly " +
                                    std::to_string(cfg.max_text_len) + " text tokens");
    std::vector<int> ids(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= cfg.vocab_size)
            throw std::out_of_range("forward: token id " + std::to_string(tokens[i]) +
                                    " outside vocabulary of " + std::to_string(cfg.vocab_size));
        ids[i] = tokens[i];
    }
    if (ref && static_cast<int>(ref->h.size()) != cfg.blocks)
        throw std::invalid_argument("forward: reference cache block count mismatch");

    const auto& P = m.params;
    const int d = cfg.embed_dim;

    TensorT<S> h = add(matmul(take(z, m.patch_map, {cfg.tokens(), cfg.patch_dim()}), P.at("patch.w")),
                       P.at("patch.b"));
    h = add(h, m.pos);
    TensorT<S> te = reshape(timestep_embedding<S>(t, d), {1, d});
    te = add(matmul(silu(add(matmul(te, P.at("time.w0")), P.at("time.b0"))), P.at("time.w1")),
             P.at("time.b1"));
    h = add(h, te);

    TensorT<S> text = add(gather_rows(P.at("text.embed"), ids), m.text_pos);

    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string pre = "block" + std::to_string(b) + ".";
        TensorT<S> n1 = layer_norm(h, P.at(pre + "ln1.g"), P.at(pre + "ln1.b"));
        if (capture) capture->h.push_back(n1);

        TensorT<S> zout = matmul(
            multihead_attention(matmul(n1, P.at(pre + "attn.wq")), matmul(n1, P.at(pre + "attn.wk")),
                                matmul(n1, P.at(pre + "attn.wv")), cfg.heads),
            P.at(pre + "attn.wo"));

        TensorT<S> zin = zout;
        if (ref) {
            ++ref->reads;
            const TensorT<S>& hr = ref->h[b];
            if (hr.shape()[0] != n1.shape()[0])
                throw std::invalid_argument("bridge: reference token count mismatch");
            const TensorT<S>& qsrc = cfg.bridge_swap_roles ? n1 : hr;
            const TensorT<S>& kvsrc = cfg.bridge_swap_roles ? hr : n1;
            TensorT<S> zp = bridge_lora(
                m, pre, "wo",
                multihead_attention(bridge_lora(m, pre, "wq", qsrc), bridge_lora(m, pre, "wk", kvsrc),
                                    bridge_lora(m, pre, "wv", kvsrc), cfg.heads));
            switch (cfg.fusion) {
                case FusionMode::kZeroLinear:
                    zin = add(zout, add(matmul(zp, P.at(pre + "bridge.fusion.w")),
                                        P.at(pre + "bridge.fusion.b")));
                    break;
                case FusionMode::kDirectAddition:
                    zin = add(zout, zp);
                    break;
                case FusionMode::kDirectReplacement:
                    zin = zp;
                    break;
            }
        }
        h = add(h, zin);

        TensorT<S> n2 = layer_norm(h, P.at(pre + "ln2.g"), P.at(pre + "ln2.b"));
        TensorT<S> xa = matmul(
            multihead_attention(matmul(n2, P.at(pre + "xattn.wq")), matmul(text, P.at(pre + "xattn.wk")),
                                matmul(text, P.at(pre + "xattn.wv")), cfg.heads),
            P.at(pre + "xattn.wo"));
        h = add(h, xa);

        TensorT<S> n3 = layer_norm(h, P.at(pre + "ln3.g"), P.at(pre + "ln3.b"));
        TensorT<S> mlp = add(
            matmul(silu(add(matmul(n3, P.at(pre + "mlp.w1")), P.at(pre + "mlp.b1"))),
                   P.at(pre + "mlp.w2")),
            P.at(pre + "mlp.b2"));
        h = add(h, mlp);
    }

    TensorT<S> y = add(matmul(h, P.at("unpatch.w")), P.at("unpatch.b"));
    return take(y, m.unpatch_map, {cfg.channels, cfg.image_size, cfg.image_size});
}

}  // namespace detail

// Reference pass: plain denoiser on the clean original at timestep 0 with
// NULL text, recording each block's normalized self-attention input.
template <class S>
RefCacheT<S> forward_ref(const ModelT<S>& m, const TensorT<S>& z_o) {
    std::vector<std::uint16_t> null_tokens(m.cfg.max_text_len, 0);
    null_tokens[0] = 1;  // [NULL]
    RefCacheT<S> cache;
    detail::forward_trunk(m, z_o, RefCacheT<S>::kRefTimestep, null_tokens, nullptr, &cache);
    ++m.ref_evals;
    return cache;
}

// Noise prediction. `ref == nullptr` is the image-unconditional branch.
template <class S>
TensorT<S> forward_denoiser(const ModelT<S>& m, const TensorT<S>& z_t, int t,
                            std::span<const std::uint16_t> tokens,
                            std::type_identity_t<const RefCacheT<S>*> ref) {
    TensorT<S> out = detail::forward_trunk(m, z_t, t, tokens, ref, nullptr);
    ++m.denoiser_evals;
    return out;
}

// ---- trainable-parameter contract -----------------------------------------

// The low-rank factors and fusion maps, sharing storage with the model.
template <class S>
ParamSetT<S> trainable_params(const ModelT<S>& m) {
    if (m.merged)
        throw std::logic_error("trainable_params: model has merged deltas; merging is terminal");
    ParamSetT<S> out;
    m.params.for_each([&](const std::string& name, const TensorT<S>& t, bool frozen) {
        if (!frozen) out.add(name, t, false);
    });
    return out;
}

// Expected trainable scalar count: per block, eight d x r factors plus a
// d x d + d fusion map.
inline std::size_t expected_trainable_count(int blocks, int d, int r) {
    return static_cast<std::size_t>(blocks) *
           (8u * static_cast<std::size_t>(d) * r + static_cast<std::size_t>(d) * d + d);
}

// Folds every low-rank delta into its bridge base weight and zeroes the
// factors. The model evaluates identically afterwards but can no longer be
// trained: merging is terminal.
template <class S>
void merge_lora(ModelT<S>& m) {
    if (m.merged) throw std::logic_error("merge_lora: already merged");
    const int d = m.cfg.embed_dim;
    const int r = m.cfg.lora_rank;
    const double s = static_cast<double>(m.cfg.lora_alpha) / r;
    for (int b = 0; b < m.cfg.blocks; ++b) {
        const std::string pre = "block" + std::to_string(b) + ".bridge.";
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            TensorT<S>& base = m.params.at(pre + "base." + std::string(w));
            TensorT<S>& a = m.params.at(pre + "lora." + std::string(w) + ".a");
            TensorT<S>& bf = m.params.at(pre + "lora." + std::string(w) + ".b");
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) {
                    double acc = 0;
                    for (int k = 0; k < r; ++k)
                        acc += static_cast<double>(a.values()[i * r + k]) * bf.values()[k * d + j];
                    base.data()[i * d + j] += static_cast<S>(s * acc);
                }
            std::fill(a.data(), a.data() + a.size(), S(0));
            std::fill(bf.data(), bf.data() + bf.size(), S(0));
        }
    }
    m.merged = true;
}

}  // namespace dedit
