#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dedit/gradcheck.hpp"
#include "dedit/model.hpp"
#include "testutil.hpp"

using namespace dedit;
using testutil::bitwise_equal;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 8;
    cfg.patch = 2;
    cfg.embed_dim = 16;
    cfg.blocks = 2;
    cfg.heads = 2;
    cfg.lora_rank = 2;
    cfg.lora_alpha = 2.0f;
    return cfg;
}

template <class S>
std::vector<std::uint16_t> some_tokens(const ModelConfig& cfg, Rng& rng) {
    std::vector<std::uint16_t> t(cfg.max_text_len);
    for (auto& x : t) x = static_cast<std::uint16_t>(rng.uniform_int(cfg.vocab_size));
    return t;
}

}  // namespace

TEST_CASE("timestep embedding boundary and direct values") {
    TensorF e0 = timestep_embedding<float>(0, 4);
    CHECK(e0.values()[0] == 0.0f);
    CHECK(e0.values()[1] == 0.0f);
    CHECK(e0.values()[2] == 1.0f);
    CHECK(e0.values()[3] == 1.0f);

    TensorF e1 = timestep_embedding<float>(1, 2);
    CHECK(e1.values()[0] == doctest::Approx(std::sin(1.0)).epsilon(1e-6));
    CHECK(e1.values()[1] == doctest::Approx(std::cos(1.0)).epsilon(1e-6));

    for (int t : {0, 1, 50, 200}) {
        TensorF e = timestep_embedding<float>(t, 32);
        for (float v : e.values()) {
            CHECK(v >= -1.0f);
            CHECK(v <= 1.0f);
        }
    }
    CHECK_THROWS_AS(timestep_embedding<float>(1, 5), std::invalid_argument);
    CHECK_THROWS_AS(timestep_embedding<float>(1, 0), std::invalid_argument);
}

TEST_CASE("patchify: exact roundtrip, token count, constant-image symmetry") {
    Rng rng(3);
    TensorF img = TensorF::randn({3, 16, 16}, rng);
    TensorF tok = patchify(img, 2);
    CHECK(tok.shape() == Shape{64, 12});
    TensorF back = unpatchify(tok, 3, 16, 2);
    CHECK(bitwise_equal(back, img));

    TensorF flat = TensorF::full({3, 16, 16}, 0.25f);
    TensorF ftok = patchify(flat, 2);
    for (int i = 1; i < 64; ++i)
        for (int j = 0; j < 12; ++j) CHECK(ftok.values()[i * 12 + j] == ftok.values()[j]);

    CHECK_THROWS_AS(patchify(img, 5), std::invalid_argument);
}

TEST_CASE("attention: symmetry, singleton, and a scalar-evaluated logit case") {
    TensorF q1 = TensorF::from_data({1, 2}, {0.0f, 0.0f});
    TensorF k2 = TensorF::from_data({2, 2}, {1.0f, 0.0f, 1.0f, 0.0f});  // equal logits
    TensorF v2 = TensorF::from_data({2, 1}, {2.0f, 4.0f});
    CHECK(attention(q1, k2, v2).value() == doctest::Approx(3.0).epsilon(1e-6));

    Rng rng(5);
    TensorF qr = TensorF::randn({3, 4}, rng);
    TensorF k1 = TensorF::randn({1, 4}, rng);
    TensorF v1 = TensorF::from_data({1, 4}, {1.0f, -2.0f, 3.0f, -4.0f});
    TensorF single = attention(qr, k1, v1);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(single.values()[i * 4 + j] == doctest::Approx(v1.values()[j]).epsilon(1e-6));

    // softmax of logits [10/sqrt(2), 0] weighting V=[1,0]
    TensorF q = TensorF::from_data({1, 2}, {1.0f, 0.0f});
    TensorF k = TensorF::from_data({2, 2}, {10.0f, 0.0f, 0.0f, 0.0f});
    TensorF v = TensorF::from_data({2, 1}, {1.0f, 0.0f});
    const double w = 1.0 / (1.0 + std::exp(-10.0 / std::sqrt(2.0)));
    CHECK(attention(q, k, v).value() == doctest::Approx(w).epsilon(1e-5));
    CHECK(attention(q, k, v).value() == doctest::Approx(0.99915).epsilon(1e-4));

    CHECK_THROWS_AS(attention(q, TensorF::zeros({2, 3}), v), std::invalid_argument);
    CHECK_THROWS_AS(attention(q, k, TensorF::zeros({3, 1})), std::invalid_argument);
}

TEST_CASE("attention rows are convex combinations: V of ones maps to ones") {
    Rng rng(6);
    TensorF q = TensorF::randn({5, 8}, rng, 2.0);
    TensorF k = TensorF::randn({7, 8}, rng, 2.0);
    TensorF ones = TensorF::full({7, 3}, 1.0f);
    TensorF out = attention(q, k, ones);
    for (float x : out.values()) CHECK(x == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("multihead attention agrees with single-head when heads=1") {
    Rng rng(7);
    TensorF q = TensorF::randn({4, 6}, rng);
    TensorF k = TensorF::randn({5, 6}, rng);
    TensorF v = TensorF::randn({5, 6}, rng);
    TensorF a = multihead_attention(q, k, v, 1);
    TensorF b = attention(q, k, v);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-6));
}

TEST_CASE("lora_project: zero factor and zero alpha reduce to the base map") {
    Rng rng(8);
    TensorF x = TensorF::randn({3, 4}, rng);
    TensorF w = TensorF::randn({4, 4}, rng);
    TensorF a = TensorF::randn({4, 2}, rng);
    TensorF bz = TensorF::zeros({2, 4});
    TensorF base = matmul(x, w);

    TensorF with_zero_b = lora_project(x, w, a, bz, 2.0f);
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(with_zero_b.values()[i] == doctest::Approx(base.values()[i]).epsilon(1e-6));

    TensorF b = TensorF::randn({2, 4}, rng);
    TensorF with_zero_alpha = lora_project(x, w, a, b, 0.0f);
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(with_zero_alpha.values()[i] == doctest::Approx(base.values()[i]).epsilon(1e-6));

    CHECK_THROWS_AS(lora_project(x, w, a, TensorF::zeros({3, 4}), 1.0f), std::invalid_argument);
}

TEST_CASE("lora_project: factored path equals explicitly merged weights") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        Rng r = rng.split(trial);
        TensorF x = TensorF::randn({2, 6}, r);
        TensorF w = TensorF::randn({6, 6}, r);
        TensorF a = TensorF::randn({6, 3}, r);
        TensorF b = TensorF::randn({3, 6}, r);
        const float alpha = 6.0f;
        TensorF merged_w = add(w, scale(matmul(a, b), alpha / 3.0f));
        TensorF y1 = lora_project(x, w, a, b, alpha);
        TensorF y2 = matmul(x, merged_w);
        for (std::size_t i = 0; i < y1.size(); ++i)
            CHECK(y1.values()[i] == doctest::Approx(y2.values()[i]).epsilon(1e-5));
    }
}

TEST_CASE("build_model: trainable count matches the closed formula") {
    CHECK(expected_trainable_count(2, 64, 8) == 16512);
    CHECK(expected_trainable_count(1, 32, 4) == 2080);
    CHECK(expected_trainable_count(3, 16, 2) == 1584);

    ModelConfig cfg;  // defaults: B=2, d=64, r=8
    ModelF m = build_model<float>(cfg, 17);
    CHECK(m.params.scalar_count(true) == 16512);

    ModelConfig small = tiny_config();
    small.blocks = 1;
    small.embed_dim = 32;
    small.heads = 4;
    small.lora_rank = 4;
    small.lora_alpha = 4.0f;
    ModelF ms = build_model<float>(small, 17);
    CHECK(ms.params.scalar_count(true) == 2080);

    ModelConfig third = tiny_config();
    third.blocks = 3;
    third.embed_dim = 16;
    third.lora_rank = 2;
    ModelF mt = build_model<float>(third, 17);
    CHECK(mt.params.scalar_count(true) == 1584);
}

TEST_CASE("build_model: bridge base is a bitwise copy; deltas and fusion start at zero") {
    ModelF m = build_model<float>(ModelConfig{}, 23);
    for (int b = 0; b < 2; ++b) {
        const std::string pre = "block" + std::to_string(b) + ".";
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            CHECK(bitwise_equal(m.params.at(pre + "bridge.base." + std::string(w)),
                                m.params.at(pre + "attn." + std::string(w))));
            CHECK(m.params.frozen(pre + "bridge.base." + std::string(w)));
            CHECK_FALSE(m.params.frozen(pre + "bridge.lora." + std::string(w) + ".a"));
            for (float x : m.params.at(pre + "bridge.lora." + std::string(w) + ".b").values())
                CHECK(x == 0.0f);
        }
        for (float x : m.params.at(pre + "bridge.fusion.w").values()) CHECK(x == 0.0f);
        for (float x : m.params.at(pre + "bridge.fusion.b").values()) CHECK(x == 0.0f);
    }
    CHECK(m.params.frozen("patch.w"));
    CHECK(m.params.frozen("text.embed"));
}

TEST_CASE("build_model: un-embedding inverts the patch embedding") {
    ModelF m = build_model<float>(ModelConfig{}, 31);
    Rng rng(1);
    TensorF x = TensorF::randn({5, 12}, rng);
    TensorF roundtrip = matmul(matmul(x, m.params.at("patch.w")), m.params.at("unpatch.w"));
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(roundtrip.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-4));
}

TEST_CASE("config validation rejects inconsistent settings") {
    ModelConfig cfg;
    cfg.heads = 5;
    CHECK_THROWS_AS(build_model<float>(cfg, 1), std::invalid_argument);
    cfg = ModelConfig{};
    cfg.patch = 3;
    CHECK_THROWS_AS(build_model<float>(cfg, 1), std::invalid_argument);
    cfg = ModelConfig{};
    cfg.lora_rank = 0;
    CHECK_THROWS_AS(build_model<float>(cfg, 1), std::invalid_argument);
    cfg = ModelConfig{};
    cfg.lora_alpha = 0.0f;
    CHECK_THROWS_AS(build_model<float>(cfg, 1), std::invalid_argument);
    cfg = ModelConfig{};
    cfg.embed_dim = 10;  // not a multiple of 4
    CHECK_THROWS_AS(build_model<float>(cfg, 1), std::invalid_argument);
}

TEST_CASE("zero-init identity: bridged output equals bypassed output") {
    ModelConfig cfg = tiny_config();
    ModelF m = build_model<float>(cfg, 41);
    Rng rng(42);
    for (int trial = 0; trial < 10; ++trial) {
        Rng r = rng.split(trial);
        TensorF z = TensorF::randn({3, 8, 8}, r);
        TensorF z_o = TensorF::randn({3, 8, 8}, r);
        auto toks = some_tokens<float>(cfg, r);
        RefCacheF cache = forward_ref(m, z_o);
        TensorF with_ref = forward_denoiser(m, z, 7, toks, &cache);
        TensorF without = forward_denoiser(m, z, 7, toks, nullptr);
        REQUIRE(with_ref.shape() == without.shape());
        for (std::size_t i = 0; i < with_ref.size(); ++i)
            CHECK(std::abs(with_ref.values()[i] - without.values()[i]) < 1e-6f);
    }
}

TEST_CASE("direct-addition at initialization already changes the output") {
    ModelConfig cfg = tiny_config();
    cfg.fusion = FusionMode::kDirectAddition;
    ModelF m = build_model<float>(cfg, 43);
    Rng rng(44);
    TensorF z = TensorF::randn({3, 8, 8}, rng);
    TensorF z_o = TensorF::randn({3, 8, 8}, rng);
    auto toks = some_tokens<float>(cfg, rng);
    RefCacheF cache = forward_ref(m, z_o);
    TensorF with_ref = forward_denoiser(m, z, 3, toks, &cache);
    TensorF without = forward_denoiser(m, z, 3, toks, nullptr);
    double diff = 0;
    for (std::size_t i = 0; i < with_ref.size(); ++i)
        diff = std::max(diff, std::abs(static_cast<double>(with_ref.values()[i]) - without.values()[i]));
    CHECK(diff > 1e-4);
}

TEST_CASE("direct-replacement degenerates to self-attention when ref equals the input pass") {
    // Same image, timestep 0, NULL text: the denoising pass reproduces the
    // reference trunk, so bridge attention with freshly copied weights equals
    // the block's own self-attention and replacement changes nothing.
    ModelConfig cfg = tiny_config();
    cfg.fusion = FusionMode::kDirectReplacement;
    ModelF m = build_model<float>(cfg, 47);
    Rng rng(48);
    TensorF z_o = TensorF::randn({3, 8, 8}, rng);
    std::vector<std::uint16_t> null_toks(cfg.max_text_len, 0);
    null_toks[0] = 1;
    RefCacheF cache = forward_ref(m, z_o);
    TensorF replaced = forward_denoiser(m, z_o, 0, null_toks, &cache);
    TensorF bypassed = forward_denoiser(m, z_o, 0, null_toks, nullptr);
    for (std::size_t i = 0; i < replaced.size(); ++i)
        CHECK(std::abs(replaced.values()[i] - bypassed.values()[i]) < 1e-5f);
}

TEST_CASE("forward_ref: deterministic, block count, finite on zero input") {
    ModelConfig cfg = tiny_config();
    ModelF m = build_model<float>(cfg, 53);
    Rng rng(54);
    TensorF z_o = TensorF::randn({3, 8, 8}, rng);
    RefCacheF a = forward_ref(m, z_o);
    RefCacheF b = forward_ref(m, z_o);
    REQUIRE(a.h.size() == 2);
    REQUIRE(b.h.size() == 2);
    for (int i = 0; i < 2; ++i) CHECK(bitwise_equal(a.h[i], b.h[i]));

    RefCacheF zc = forward_ref(m, TensorF::zeros({3, 8, 8}));
    RefCacheF zc2 = forward_ref(m, TensorF::zeros({3, 8, 8}));
    for (int i = 0; i < 2; ++i) {
        for (float x : zc.h[i].values()) CHECK(std::isfinite(x));
        CHECK(bitwise_equal(zc.h[i], zc2.h[i]));
    }
}

TEST_CASE("forward_denoiser: shape contract and vocabulary enforcement") {
    ModelConfig cfg = tiny_config();
    ModelF m = build_model<float>(cfg, 59);
    Rng rng(60);
    TensorF z = TensorF::randn({3, 8, 8}, rng);
    auto toks = some_tokens<float>(cfg, rng);
    TensorF out = forward_denoiser(m, z, 5, toks, nullptr);
    CHECK(out.shape() == z.shape());
    for (float x : out.values()) CHECK(std::isfinite(x));

    auto bad = toks;
    bad[3] = static_cast<std::uint16_t>(cfg.vocab_size);
    CHECK_THROWS_AS(forward_denoiser(m, z, 5, bad, nullptr), std::out_of_range);

    CHECK_THROWS_AS(forward_denoiser(m, TensorF::zeros({3, 4, 4}), 5, toks, nullptr),
                    std::invalid_argument);
}

TEST_CASE("perturbing a fusion weight changes only the bridged branch") {
    ModelConfig cfg = tiny_config();
    ModelF m = build_model<float>(cfg, 61);
    Rng rng(62);
    TensorF z = TensorF::randn({3, 8, 8}, rng);
    TensorF z_o = TensorF::randn({3, 8, 8}, rng);
    auto toks = some_tokens<float>(cfg, rng);
    RefCacheF cache = forward_ref(m, z_o);

    TensorF with_before = forward_denoiser(m, z, 4, toks, &cache);
    TensorF without_before = forward_denoiser(m, z, 4, toks, nullptr);

    m.params.at("block0.bridge.fusion.w").data()[5] = 0.5f;

    TensorF with_after = forward_denoiser(m, z, 4, toks, &cache);
    TensorF without_after = forward_denoiser(m, z, 4, toks, nullptr);

    CHECK(bitwise_equal(without_before, without_after));
    double diff = 0;
    for (std::size_t i = 0; i < with_after.size(); ++i)
        diff = std::max(diff,
                        std::abs(static_cast<double>(with_after.values()[i]) - with_before.values()[i]));
    CHECK(diff > 0);
}

TEST_CASE("swapped bridge orientation diverges once the bridge is live") {
    ModelConfig cfg = tiny_config();
    ModelF m = build_model<float>(cfg, 63);
    ModelConfig swapped_cfg = cfg;
    swapped_cfg.bridge_swap_roles = true;
    ModelF ms = build_model<float>(swapped_cfg, 63);
    // open the gate identically in both models
    for (ModelF* mm : {&m, &ms}) {
        mm->params.at("block0.bridge.fusion.w").data()[0] = 0.3f;
        mm->params.at("block1.bridge.fusion.w").data()[0] = 0.3f;
    }
    Rng rng(64);
    TensorF z = TensorF::randn({3, 8, 8}, rng);
    TensorF z_o = TensorF::randn({3, 8, 8}, rng);
    auto toks = some_tokens<float>(cfg, rng);
    RefCacheF c1 = forward_ref(m, z_o);
    RefCacheF c2 = forward_ref(ms, z_o);
    TensorF a = forward_denoiser(m, z, 4, toks, &c1);
    TensorF b = forward_denoiser(ms, z, 4, toks, &c2);
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        diff = std::max(diff, std::abs(static_cast<double>(a.values()[i]) - b.values()[i]));
    CHECK(diff > 1e-6);
}

TEST_CASE("ref cache read counter tracks bridge consumption") {
    ModelConfig cfg = tiny_config();
    ModelF m = build_model<float>(cfg, 65);
    Rng rng(66);
    TensorF z = TensorF::randn({3, 8, 8}, rng);
    auto toks = some_tokens<float>(cfg, rng);
    RefCacheF cache = forward_ref(m, TensorF::randn({3, 8, 8}, rng));
    CHECK(cache.reads == 0);
    forward_denoiser(m, z, 2, toks, &cache);
    CHECK(cache.reads == cfg.blocks);
    forward_denoiser(m, z, 2, toks, nullptr);
    CHECK(cache.reads == cfg.blocks);  // unconditional branch cannot touch it
    forward_denoiser(m, z, 2, toks, &cache);
    CHECK(cache.reads == 2 * cfg.blocks);
}

TEST_CASE("denoiser evaluation counter") {
    ModelConfig cfg = tiny_config();
    ModelF m = build_model<float>(cfg, 67);
    Rng rng(68);
    TensorF z = TensorF::randn({3, 8, 8}, rng);
    auto toks = some_tokens<float>(cfg, rng);
    CHECK(m.denoiser_evals == 0);
    forward_denoiser(m, z, 1, toks, nullptr);
    forward_denoiser(m, z, 2, toks, nullptr);
    CHECK(m.denoiser_evals == 2);
    forward_ref(m, z);
    CHECK(m.denoiser_evals == 2);
    CHECK(m.ref_evals == 1);
}

TEST_CASE("trainable_params: only bridge deltas and fusion maps, shared storage") {
    ModelF m = build_model<float>(ModelConfig{}, 71);
    ParamSetF tp = trainable_params(m);
    CHECK(tp.scalar_count() == 16512);
    tp.for_each([&](const std::string& name, const TensorF&, bool frozen) {
        CHECK_FALSE(frozen);
        CHECK(name.find("bridge.") != std::string::npos);
    });
    // writing through the returned handle must affect the model
    tp.at("block0.bridge.fusion.b").data()[0] = 1.25f;
    CHECK(m.params.at("block0.bridge.fusion.b").values()[0] == 1.25f);
}

TEST_CASE("gradients reach the fusion map at initialization") {
    ModelConfig cfg = tiny_config();
    ModelF m = build_model<float>(cfg, 73);
    Rng rng(74);
    TensorF z = TensorF::randn({3, 8, 8}, rng);
    auto toks = some_tokens<float>(cfg, rng);
    RefCacheF cache = forward_ref(m, TensorF::randn({3, 8, 8}, rng));
    ParamSetF tp = trainable_params(m);
    tp.zero_grads();
    TensorF loss = mean_all(square(forward_denoiser(m, z, 6, toks, &cache)));
    backward(loss);
    double fusion_grad = 0;
    for (float g : m.params.at("block0.bridge.fusion.w").grad()) fusion_grad += std::abs(g);
    CHECK(fusion_grad > 0);
    // with the gate open, the low-rank B factors receive gradient too
    m.params.at("block0.bridge.fusion.w").data()[0] = 0.2f;
    m.params.at("block1.bridge.fusion.w").data()[17] = 0.2f;
    tp.zero_grads();
    TensorF loss2 = mean_all(square(forward_denoiser(m, z, 6, toks, &cache)));
    backward(loss2);
    double b_grad = 0;
    for (float g : m.params.at("block0.bridge.lora.wv.b").grad()) b_grad += std::abs(g);
    CHECK(b_grad > 0);
}

TEST_CASE("merge_lora: same outputs, then training is refused") {
    ModelConfig cfg = tiny_config();
    ModelF m = build_model<float>(cfg, 79);
    Rng rng(80);
    // make the deltas nonzero so the merge actually moves weights
    for (int b = 0; b < cfg.blocks; ++b)
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            auto& t = m.params.at("block" + std::to_string(b) + ".bridge.lora." + w + std::string(".b"));
            Rng r = rng.split(std::string(w) + std::to_string(b));
            for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(r.normal() * 0.1);
        }
    m.params.at("block0.bridge.fusion.w").data()[3] = 0.4f;

    TensorF z = TensorF::randn({3, 8, 8}, rng);
    TensorF z_o = TensorF::randn({3, 8, 8}, rng);
    auto toks = some_tokens<float>(cfg, rng);
    RefCacheF cache = forward_ref(m, z_o);
    TensorF before = forward_denoiser(m, z, 9, toks, &cache);

    merge_lora(m);
    RefCacheF cache2 = forward_ref(m, z_o);
    TensorF after = forward_denoiser(m, z, 9, toks, &cache2);
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(after.values()[i] == doctest::Approx(before.values()[i]).epsilon(1e-5));

    CHECK_THROWS_AS(trainable_params(m), std::logic_error);
    CHECK_THROWS_AS(merge_lora(m), std::logic_error);
}

TEST_CASE("64-bit gradient check through the full bridged forward") {
    ModelConfig cfg = tiny_config();
    ModelD m = build_model<double>(cfg, 83);
    // open gates so every trainable parameter participates
    Rng gate(84);
    for (auto* name : {"block0.bridge.fusion.w", "block1.bridge.fusion.w"}) {
        auto& t = m.params.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = gate.normal() * 0.15;
    }
    for (int b = 0; b < cfg.blocks; ++b)
        for (const char* w : {"wq", "wk", "wv", "wo"}) {
            auto& t = m.params.at("block" + std::to_string(b) + ".bridge.lora." + w + std::string(".b"));
            for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = gate.normal() * 0.1;
        }

    Rng rng(85);
    TensorD z = TensorD::randn({3, 8, 8}, rng);
    TensorD z_o = TensorD::randn({3, 8, 8}, rng);
    TensorD target = TensorD::randn({3, 8, 8}, rng);
    auto toks = some_tokens<double>(cfg, rng);
    RefCacheD cache = forward_ref(m, z_o);

    ParamSetD tp = trainable_params(m);
    auto f = [&]() {
        TensorD out = forward_denoiser(m, z, 11, toks, &cache);
        return mean_all(square(sub(out, target)));
    };
    Rng sample_rng(86);
    FdReport rep = finite_diff_check<double>(f, tp, 60, 1e-5, sample_rng);
    CHECK(rep.max_rel < 1e-3);
}
