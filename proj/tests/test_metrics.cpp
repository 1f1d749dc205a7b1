#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "dedit/dataset.hpp"
#include "dedit/metrics.hpp"
#include "dedit/rng.hpp"
#include "json.hpp"
#include "testutil.hpp"

using namespace dedit;

namespace {

TensorF negate(const TensorF& a) {
    std::vector<float> v(a.values().begin(), a.values().end());
    for (auto& x : v) x = -x;
    return TensorF::from_data(a.shape(), std::move(v));
}

TensorF scale(const TensorF& a, float s) {
    std::vector<float> v(a.values().begin(), a.values().end());
    for (auto& x : v) x *= s;
    return TensorF::from_data(a.shape(), std::move(v));
}

TensorF shift(const TensorF& a, float s) {
    std::vector<float> v(a.values().begin(), a.values().end());
    for (auto& x : v) x += s;
    return TensorF::from_data(a.shape(), std::move(v));
}

TensorF midpoint(const TensorF& a, const TensorF& b) {
    std::vector<float> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5f * (a.values()[i] + b.values()[i]);
    return TensorF::from_data(a.shape(), std::move(v));
}

}  // namespace

TEST_CASE("l1 and l2 match hand-computed values") {
    TensorF a = TensorF::from_data({2, 2}, {0, 1, 2, 3});
    TensorF b = TensorF::from_data({2, 2}, {1, 1, 1, 5});
    CHECK(l1(a, b) == doctest::Approx(1.0).epsilon(1e-12));   // (1+0+1+2)/4
    CHECK(l2(a, b) == doctest::Approx(1.5).epsilon(1e-12));   // (1+0+1+4)/4
    CHECK(l1(a, a) == 0.0);
    CHECK(l2(a, a) == 0.0);
    CHECK(l1(a, b) == l1(b, a));
    CHECK_THROWS_AS(l1(a, TensorF::zeros({3})), std::invalid_argument);
    CHECK_THROWS_AS(l2(a, TensorF::zeros({2, 3})), std::invalid_argument);
}

TEST_CASE("psnr reference points and cap") {
    // 10 log10(1 / 0.01) and 10 log10(4 / 0.04) are both exactly 20 dB.
    CHECK(std::abs(psnr_from_mse(0.01, 1.0) - 20.0) < 1e-9);
    CHECK(std::abs(psnr_from_mse(0.04, 2.0) - 20.0) < 1e-9);

    // Quadrupling the error costs 10 log10(4) ~ 6.0206 dB at any range.
    const double drop = psnr_from_mse(0.01, 1.0) - psnr_from_mse(0.04, 1.0);
    CHECK(std::abs(drop - 10.0 * std::log10(4.0)) < 1e-12);

    CHECK(psnr_from_mse(0.0, 1.0) == 99.0);
    CHECK(psnr_from_mse(1e-30, 2.0) == 99.0);
    TensorF a = TensorF::full({2, 2}, 0.25f);
    CHECK(psnr(a, a) == 99.0);

    CHECK_THROWS_AS(psnr_from_mse(-0.1, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(psnr_from_mse(0.01, 0.0), std::invalid_argument);
}

TEST_CASE("ssim of an image with itself is exactly 1") {
    Rng rng(11);
    TensorF a = TensorF::randn({3, 16, 16}, rng, 0.5);
    CHECK(ssim(a, a) == 1.0);

    EditPair p = gen_pair(Rng(3));
    CHECK(ssim(p.target_image, p.target_image) == 1.0);
}

TEST_CASE("ssim of flat 0 vs flat 1 at unit range reduces to the luminance floor") {
    TensorF z = TensorF::zeros({3, 16, 16});
    TensorF o = TensorF::full({3, 16, 16}, 1.0f);
    // Zero variance makes the contrast factor exactly 1; the luminance factor
    // is c1 / (1 + c1) with c1 = (0.01 * 1)^2, about 1e-4.
    const double c1 = 1e-4;
    CHECK(ssim(z, o, 1.0) == doctest::Approx(c1 / (1.0 + c1)).epsilon(1e-12));
    CHECK(ssim(z, o, 1.0) < 2e-4);
}

TEST_CASE("ssim is symmetric, bounded, and degrades with noise") {
    Rng rng(21);
    TensorF a = TensorF::randn({3, 16, 16}, rng, 0.5);
    TensorF small = shift(a, 0.0f);
    {
        auto v = std::vector<float>(a.values().begin(), a.values().end());
        Rng nrng(22);
        for (auto& x : v) x += float(nrng.normal() * 0.05);
        small = TensorF::from_data({3, 16, 16}, std::move(v));
    }
    TensorF large = small;
    {
        auto v = std::vector<float>(a.values().begin(), a.values().end());
        Rng nrng(23);
        for (auto& x : v) x += float(nrng.normal() * 0.5);
        large = TensorF::from_data({3, 16, 16}, std::move(v));
    }
    CHECK(ssim(a, small) == ssim(small, a));
    CHECK(ssim(a, small) < 1.0);
    CHECK(ssim(a, small) > ssim(a, large));
    CHECK(ssim(a, large) > -1.0);
    CHECK(ssim(a, large) <= 1.0);
}

TEST_CASE("ssim rejects bad windows, shapes, and ranges") {
    TensorF a = TensorF::zeros({3, 16, 16});
    CHECK_THROWS_AS(ssim(a, a, 2.0, 5), std::invalid_argument);
    CHECK_THROWS_AS(ssim(a, a, 2.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(ssim(a, a, 0.0), std::invalid_argument);
    TensorF flat = TensorF::zeros({16, 16});
    CHECK_THROWS_AS(ssim(flat, flat), std::invalid_argument);
    CHECK_THROWS_AS(ssim(a, TensorF::zeros({3, 8, 8})), std::invalid_argument);
    // 4-pixel windows tile 16x16 fine.
    CHECK(ssim(a, a, 2.0, 4) == 1.0);
}

TEST_CASE("ssim window terms: contrast-structure part ignores a shared shift") {
    Rng rng(31);
    TensorF a = TensorF::randn({3, 16, 16}, rng, 0.4);
    TensorF b = TensorF::randn({3, 16, 16}, rng, 0.4);
    const auto base = ssim_window_terms(a, b);
    CHECK(base.size() == 3 * 4);  // 3 channels, 2x2 windows of size 8

    const auto moved = ssim_window_terms(shift(a, 0.75f), shift(b, 0.75f));
    REQUIRE(moved.size() == base.size());
    // Tolerance reflects float image storage: the shift itself rounds.
    double lum_delta = 0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        CHECK(std::abs(moved[i].cs - base[i].cs) < 1e-6);
        lum_delta += std::abs(moved[i].luminance - base[i].luminance);
    }
    CHECK(lum_delta > 1e-3);  // the luminance factor does move
}

TEST_CASE("masked l1 over mask and complement recombines to the global mean") {
    int two_sided = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        EditPair p = gen_pair(Rng(seed));
        Rng rng(seed + 1000);
        TensorF out = TensorF::randn({3, 16, 16}, rng, 0.7);

        std::size_t inside = 0;
        for (auto m : p.mask) inside += m != 0;
        REQUIRE(inside > 0);
        // A repaint of an object-free scene masks the whole canvas; no
        // complement exists to recombine with.
        if (inside == p.mask.size()) continue;
        ++two_sided;

        const double li = masked_l1(out, p.target_image, p.mask, true);
        const double lo = masked_l1(out, p.target_image, p.mask, false);
        const double global = l1(out, p.target_image);
        const double recombined =
            (li * double(inside) + lo * double(p.mask.size() - inside)) / double(p.mask.size());
        CHECK(std::abs(recombined - global) < 1e-9);
    }
    CHECK(two_sided >= 40);
}

TEST_CASE("full-canvas mask: consistency is vacuous, adherence is the global error") {
    Scene before;
    before.background = 0;
    Scene after;
    after.background = 2;
    EditPair p;
    p.original = before;
    p.target = after;
    p.original_image = render(before);
    p.target_image = render(after);
    p.mask.fill(1);
    p.kind = EditKind::kBackground;

    Rng rng(404);
    TensorF out = TensorF::randn({3, 16, 16}, rng, 0.5);
    const RegionScores s = region_metrics(out, p);
    CHECK(s.consistency == 0.0);
    CHECK(std::abs(s.adherence - l1(out, p.target_image)) < 1e-12);
}

TEST_CASE("region metrics vanish on the matching side of the edit") {
    EditPair p = gen_pair(Rng(77));

    const RegionScores at_target = region_metrics(p.target_image, p);
    CHECK(at_target.adherence == 0.0);
    // Outside the mask the two renders agree, so consistency is zero too.
    CHECK(at_target.consistency == 0.0);

    const RegionScores at_original = region_metrics(p.original_image, p);
    CHECK(at_original.consistency == 0.0);
    CHECK(at_original.adherence > 0.0);
}

TEST_CASE("region metrics reject an empty edit mask") {
    EditPair p = gen_pair(Rng(5));
    EditPair empty = p;
    empty.mask.fill(0);
    CHECK_THROWS_AS(region_metrics(p.original_image, empty), std::invalid_argument);
    // The low-level helper stays strict about empty selections either way.
    CHECK_THROWS_AS(masked_l1(p.original_image, p.target_image, empty.mask, true),
                    std::invalid_argument);
    std::array<std::uint8_t, kImageSize * kImageSize> ones;
    ones.fill(1);
    CHECK_THROWS_AS(masked_l1(p.original_image, p.target_image, ones, false),
                    std::invalid_argument);
}

TEST_CASE("projection similarity behaves like a cosine") {
    EditPair p = gen_pair(Rng(9));
    const TensorF& a = p.original_image;
    const TensorF& b = p.target_image;

    CHECK(std::abs(proxy_embed_sim(a, a, 42) - 1.0) < 1e-12);
    CHECK(std::abs(proxy_embed_sim(a, negate(a), 42) + 1.0) < 1e-12);
    CHECK(std::abs(proxy_embed_sim(a, scale(b, 3.0f), 42) - proxy_embed_sim(a, b, 42)) < 1e-12);
    CHECK(proxy_embed_sim(a, TensorF::zeros({3, 16, 16}), 42) == 0.0);

    // Deterministic per seed, and genuinely seed-dependent.
    const double s1 = proxy_embed_sim(a, b, 42);
    CHECK(proxy_embed_sim(a, b, 42) == s1);
    CHECK(proxy_embed_sim(a, b, 43) != s1);
    CHECK(s1 > -1.0 - 1e-12);
    CHECK(s1 < 1.0 + 1e-12);

    CHECK_THROWS_AS(proxy_embed_sim(a, TensorF::zeros({3, 8, 8}), 42), std::invalid_argument);
}

TEST_CASE("edit success compares distance to target against distance to original") {
    EditPair p = gen_pair(Rng(13));
    CHECK(edit_success(p.target_image, p));
    CHECK_FALSE(edit_success(p.original_image, p));
    // Palette values are exact floats, so the midpoint ties and the strict
    // comparison resolves it to failure.
    CHECK_FALSE(edit_success(midpoint(p.original_image, p.target_image), p));
}

TEST_CASE("report flags the winning method per column and round-trips through json") {
    std::vector<EditPair> pairs;
    for (std::uint64_t s = 0; s < 5; ++s) pairs.push_back(gen_pair(Rng(s + 200)));

    MethodRun perfect;
    perfect.name = "perfect";
    MethodRun untouched;
    untouched.name = "untouched";
    for (const auto& p : pairs) {
        accumulate(perfect, p.target_image, p, 7);
        accumulate(untouched, p.original_image, p, 7);
    }

    ReportMeta meta;
    meta.seed = 99;
    meta.config_digest = "cafe1234";
    const MetricReport rep = build_report({perfect, untouched}, meta);

    CHECK(rep.text.find("perfect") != std::string::npos);
    CHECK(rep.text.find("untouched") != std::string::npos);
    CHECK(rep.text.find("cafe1234") != std::string::npos);
    CHECK(rep.text.find('*') != std::string::npos);

    const auto j = nlohmann::json::parse(rep.json);
    CHECK(j.at("seed") == 99);
    CHECK(j.at("config_digest") == "cafe1234");
    REQUIRE(j.at("methods").size() == 2);
    const auto& jm = j.at("methods").at(0);
    CHECK(jm.at("name") == "perfect");
    CHECK(jm.at("examples") == 5);

    // Raw arrays are complete and their mean matches the published mean.
    const auto vals = jm.at("values").at("l1").get<std::vector<double>>();
    REQUIRE(vals.size() == 5);
    double mean = 0;
    for (double v : vals) mean += v;
    mean /= 5.0;
    CHECK(std::abs(mean - jm.at("mean").at("l1").get<double>()) < 1e-9);

    // The exact-target method wins every column in this setup.
    for (const char* col : {"l1", "l2", "psnr", "ssim", "adherence", "success"}) {
        CHECK(jm.at("best").at(col) == true);
        CHECK(j.at("methods").at(1).at("best").at(col) == false);
    }
    CHECK(jm.at("mean").at("success") == 1.0);
    CHECK(j.at("methods").at(1).at("mean").at("success") == 0.0);
    // The untouched method leaves the unedited region alone, so it takes (or
    // ties) consistency; exact ties must flag both rows.
    CHECK(j.at("methods").at(1).at("best").at("consistency") == true);

    const MetricReport again = build_report({perfect, untouched}, meta);
    CHECK(again.text == rep.text);
    CHECK(again.json == rep.json);
}

TEST_CASE("report flags every method on an exact tie") {
    EditPair p = gen_pair(Rng(303));
    MethodRun a, b;
    a.name = "a";
    b.name = "b";
    accumulate(a, p.target_image, p, 7);
    accumulate(b, p.target_image, p, 7);
    const MetricReport rep = build_report({a, b}, {});
    const auto j = nlohmann::json::parse(rep.json);
    for (const auto& jm : j.at("methods"))
        for (const auto& [col, flag] : jm.at("best").items()) {
            (void)col;
            CHECK(flag == true);
        }
}

TEST_CASE("report rejects malformed method runs") {
    CHECK_THROWS_AS(build_report({}, {}), std::invalid_argument);
    MethodRun empty;
    empty.name = "empty";
    CHECK_THROWS_AS(build_report({empty}, {}), std::invalid_argument);

    EditPair p = gen_pair(Rng(1));
    MethodRun ragged;
    ragged.name = "ragged";
    accumulate(ragged, p.target_image, p, 7);
    ragged.psnr.push_back(1.0);
    CHECK_THROWS_AS(build_report({ragged}, {}), std::invalid_argument);
}
