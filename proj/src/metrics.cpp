#include "dedit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "dedit/rng.hpp"
#include "json.hpp"

namespace dedit {

namespace {

void check_same_shape(const TensorF& a, const TensorF& b, const char* who) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    if (a.size() == 0) throw std::invalid_argument(std::string(who) + ": empty tensor");
}

// Expects [channels, 16, 16] so the flat mask indexes rows*16+cols.
void check_image(const TensorF& a, const char* who) {
    if (a.rank() != 3 || a.shape()[1] != kImageSize || a.shape()[2] != kImageSize)
        throw std::invalid_argument(std::string(who) + ": expected [c," +
                                    std::to_string(kImageSize) + "," + std::to_string(kImageSize) +
                                    "] image, got " + shape_str(a.shape()));
}

}  // namespace

double l1(const TensorF& a, const TensorF& b) {
    check_same_shape(a, b, "l1");
    const auto va = a.values(), vb = b.values();
    double acc = 0;
    for (std::size_t i = 0; i < va.size(); ++i) acc += std::abs(double(va[i]) - double(vb[i]));
    return acc / double(va.size());
}

double l2(const TensorF& a, const TensorF& b) {
    check_same_shape(a, b, "l2");
    const auto va = a.values(), vb = b.values();
    double acc = 0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        const double d = double(va[i]) - double(vb[i]);
        acc += d * d;
    }
    return acc / double(va.size());
}

double psnr_from_mse(double mse, double range) {
    if (range <= 0) throw std::invalid_argument("psnr: range must be positive");
    if (mse < 0) throw std::invalid_argument("psnr: negative mse");
    constexpr double kCap = 99.0;
    if (mse == 0) return kCap;
    return std::min(kCap, 10.0 * std::log10(range * range / mse));
}

double psnr(const TensorF& a, const TensorF& b, double range) {
    return psnr_from_mse(l2(a, b), range);
}

std::vector<SsimTerm> ssim_window_terms(const TensorF& a, const TensorF& b, double range,
                                        int window) {
    check_same_shape(a, b, "ssim");
    if (a.rank() != 3) throw std::invalid_argument("ssim: expected [c,h,w], got " + shape_str(a.shape()));
    const int ch = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
    if (window <= 0 || h % window != 0 || w % window != 0)
        throw std::invalid_argument("ssim: window " + std::to_string(window) +
                                    " must evenly tile " + shape_str(a.shape()));
    if (range <= 0) throw std::invalid_argument("ssim: range must be positive");

    const double c1 = (0.01 * range) * (0.01 * range);
    const double c2 = (0.03 * range) * (0.03 * range);
    const auto va = a.values(), vb = b.values();
    const double n = double(window) * double(window);

    std::vector<SsimTerm> terms;
    terms.reserve(std::size_t(ch) * std::size_t(h / window) * std::size_t(w / window));
    for (int c = 0; c < ch; ++c)
        for (int wy = 0; wy < h; wy += window)
            for (int wx = 0; wx < w; wx += window) {
                double sa = 0, sb = 0;
                for (int y = 0; y < window; ++y)
                    for (int x = 0; x < window; ++x) {
                        const std::size_t i = (std::size_t(c) * h + (wy + y)) * w + (wx + x);
                        sa += va[i];
                        sb += vb[i];
                    }
                const double ma = sa / n, mb = sb / n;
                double vva = 0, vvb = 0, cov = 0;
                for (int y = 0; y < window; ++y)
                    for (int x = 0; x < window; ++x) {
                        const std::size_t i = (std::size_t(c) * h + (wy + y)) * w + (wx + x);
                        const double da = va[i] - ma, db = vb[i] - mb;
                        vva += da * da;
                        vvb += db * db;
                        cov += da * db;
                    }
                vva /= n;
                vvb /= n;
                cov /= n;
                SsimTerm t;
                t.luminance = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                t.cs = (2.0 * cov + c2) / (vva + vvb + c2);
                terms.push_back(t);
            }
    return terms;
}

double ssim(const TensorF& a, const TensorF& b, double range, int window) {
    const auto terms = ssim_window_terms(a, b, range, window);
    double acc = 0;
    for (const auto& t : terms) acc += t.luminance * t.cs;
    return acc / double(terms.size());
}

double masked_l1(const TensorF& a, const TensorF& b,
                 const std::array<std::uint8_t, kImageSize * kImageSize>& mask, bool inside) {
    check_same_shape(a, b, "masked_l1");
    check_image(a, "masked_l1");
    const int ch = a.shape()[0];
    const auto va = a.values(), vb = b.values();
    double acc = 0;
    std::size_t count = 0;
    for (std::size_t p = 0; p < mask.size(); ++p) {
        if ((mask[p] != 0) != inside) continue;
        ++count;
        for (int c = 0; c < ch; ++c) {
            const std::size_t i = std::size_t(c) * mask.size() + p;
            acc += std::abs(double(va[i]) - double(vb[i]));
        }
    }
    if (count == 0)
        throw std::invalid_argument(inside ? "masked_l1: empty mask" : "masked_l1: mask covers everything");
    return acc / (double(count) * double(ch));
}

RegionScores region_metrics(const TensorF& output, const EditPair& pair) {
    RegionScores s;
    // A background repaint of an empty scene changes every pixel; with no
    // untouched region left, consistency is vacuously perfect.
    const bool mask_is_full =
        std::all_of(pair.mask.begin(), pair.mask.end(), [](std::uint8_t m) { return m != 0; });
    s.consistency =
        mask_is_full ? 0.0 : masked_l1(output, pair.original_image, pair.mask, /*inside=*/false);
    s.adherence = masked_l1(output, pair.target_image, pair.mask, /*inside=*/true);
    return s;
}

double proxy_embed_sim(const TensorF& a, const TensorF& b, std::uint64_t seed) {
    check_same_shape(a, b, "proxy_embed_sim");
    constexpr int kDim = 64;
    const auto va = a.values(), vb = b.values();
    Rng rng = Rng(seed).split("proxy_embed");
    double dot = 0, na = 0, nb = 0;
    for (int d = 0; d < kDim; ++d) {
        double ua = 0, ub = 0;
        for (std::size_t i = 0; i < va.size(); ++i) {
            const double p = rng.normal();
            ua += p * va[i];
            ub += p * vb[i];
        }
        dot += ua * ub;
        na += ua * ua;
        nb += ub * ub;
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

bool edit_success(const TensorF& output, const EditPair& pair) {
    return l1(output, pair.target_image) < l1(output, pair.original_image);
}

MethodRun& accumulate(MethodRun& run, const TensorF& output, const EditPair& pair,
                      std::uint64_t proxy_seed) {
    run.l1.push_back(l1(output, pair.target_image));
    run.l2.push_back(l2(output, pair.target_image));
    run.psnr.push_back(psnr(output, pair.target_image));
    run.ssim.push_back(ssim(output, pair.target_image));
    const RegionScores rs = region_metrics(output, pair);
    run.consistency.push_back(rs.consistency);
    run.adherence.push_back(rs.adherence);
    run.proxy_sim.push_back(proxy_embed_sim(output, pair.target_image, proxy_seed));
    run.success.push_back(edit_success(output, pair) ? 1 : 0);
    return run;
}

namespace {

struct Column {
    const char* name;
    bool higher_better;
    std::vector<double> (*pick)(const MethodRun&);
};

std::vector<double> as_doubles(const std::vector<int>& v) {
    return std::vector<double>(v.begin(), v.end());
}

const Column kColumns[] = {
    {"l1", false, [](const MethodRun& r) { return r.l1; }},
    {"l2", false, [](const MethodRun& r) { return r.l2; }},
    {"psnr", true, [](const MethodRun& r) { return r.psnr; }},
    {"ssim", true, [](const MethodRun& r) { return r.ssim; }},
    {"consistency", false, [](const MethodRun& r) { return r.consistency; }},
    {"adherence", false, [](const MethodRun& r) { return r.adherence; }},
    {"proxy_sim", true, [](const MethodRun& r) { return r.proxy_sim; }},
    {"success", true, [](const MethodRun& r) { return as_doubles(r.success); }},
};

double mean_of(const std::vector<double>& v) {
    double acc = 0;
    for (double x : v) acc += x;
    return acc / double(v.size());
}

}  // namespace

MetricReport build_report(const std::vector<MethodRun>& runs, const ReportMeta& meta) {
    if (runs.empty()) throw std::invalid_argument("build_report: no methods");
    for (const auto& r : runs) {
        if (r.l1.empty()) throw std::invalid_argument("build_report: method '" + r.name + "' has no examples");
        const std::size_t n = r.l1.size();
        for (const auto& col : kColumns)
            if (col.pick(r).size() != n)
                throw std::invalid_argument("build_report: ragged metric arrays in '" + r.name + "'");
    }

    constexpr int kNumCols = int(std::size(kColumns));
    const std::size_t nm = runs.size();

    // Column means, then direction-aware best markers; exact ties flag every
    // method that attains the best value.
    std::vector<std::vector<double>> means(nm, std::vector<double>(kNumCols));
    for (std::size_t m = 0; m < nm; ++m)
        for (int c = 0; c < kNumCols; ++c) means[m][c] = mean_of(kColumns[c].pick(runs[m]));
    std::vector<std::vector<bool>> best(nm, std::vector<bool>(kNumCols, false));
    for (int c = 0; c < kNumCols; ++c) {
        double b = means[0][c];
        for (std::size_t m = 1; m < nm; ++m)
            b = kColumns[c].higher_better ? std::max(b, means[m][c]) : std::min(b, means[m][c]);
        for (std::size_t m = 0; m < nm; ++m) best[m][c] = means[m][c] == b;
    }

    std::size_t name_w = 6;
    for (const auto& r : runs) name_w = std::max(name_w, r.name.size());

    std::string text = "edit evaluation: n=" + std::to_string(runs[0].l1.size()) +
                       " seed=" + std::to_string(meta.seed);
    if (!meta.config_digest.empty()) text += " config=" + meta.config_digest;
    text += "\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%-*s", int(name_w), "method");
    text += buf;
    for (const auto& col : kColumns) {
        std::snprintf(buf, sizeof buf, " %12s", col.name);
        text += buf;
    }
    text += "\n";
    for (std::size_t m = 0; m < nm; ++m) {
        std::snprintf(buf, sizeof buf, "%-*s", int(name_w), runs[m].name.c_str());
        text += buf;
        for (int c = 0; c < kNumCols; ++c) {
            std::snprintf(buf, sizeof buf, " %11.4f%c", means[m][c], best[m][c] ? '*' : ' ');
            text += buf;
        }
        text += "\n";
    }
    text += "(* best per column; higher is better for psnr, ssim, proxy_sim, success)\n";

    nlohmann::ordered_json j;
    j["seed"] = meta.seed;
    j["config_digest"] = meta.config_digest;
    j["columns"] = nlohmann::ordered_json::array();
    for (const auto& col : kColumns)
        j["columns"].push_back({{"name", col.name}, {"higher_better", col.higher_better}});
    j["methods"] = nlohmann::ordered_json::array();
    for (std::size_t m = 0; m < nm; ++m) {
        nlohmann::ordered_json jm;
        jm["name"] = runs[m].name;
        jm["examples"] = runs[m].l1.size();
        for (int c = 0; c < kNumCols; ++c) {
            jm["mean"][kColumns[c].name] = means[m][c];
            jm["best"][kColumns[c].name] = bool(best[m][c]);
            jm["values"][kColumns[c].name] = kColumns[c].pick(runs[m]);
        }
        j["methods"].push_back(std::move(jm));
    }

    MetricReport rep;
    rep.text = std::move(text);
    rep.json = j.dump(2) + "\n";
    return rep;
}

}  // namespace dedit
