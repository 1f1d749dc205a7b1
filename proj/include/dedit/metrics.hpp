#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dedit/dataset.hpp"
#include "dedit/tensor.hpp"

// Evaluation battery: pixel distances, PSNR, windowed SSIM, region-aware
// consistency/adherence against the ground-truth edit mask, a fixed
// random-projection similarity proxy, and a per-method report builder.
// Images are [-1,1] valued, so the default dynamic range is 2.

namespace dedit {

double l1(const TensorF& a, const TensorF& b);
double l2(const TensorF& a, const TensorF& b);

// 10 log10(range^2 / mse), capped at 99 dB so identical inputs stay finite.
double psnr_from_mse(double mse, double range);
double psnr(const TensorF& a, const TensorF& b, double range = 2.0);

// Luminance and contrast-structure factors of one window; ssim averages
// their product over non-overlapping windows and channels.
struct SsimTerm {
    double luminance = 0;
    double cs = 0;
};
std::vector<SsimTerm> ssim_window_terms(const TensorF& a, const TensorF& b, double range = 2.0,
                                        int window = 8);
double ssim(const TensorF& a, const TensorF& b, double range = 2.0, int window = 8);

// Mean absolute difference restricted to mask pixels (inside=true) or their
// complement, over all channels.
double masked_l1(const TensorF& a, const TensorF& b,
                 const std::array<std::uint8_t, kImageSize * kImageSize>& mask, bool inside);

struct RegionScores {
    double consistency = 0;  // output vs original, outside the edit mask
    double adherence = 0;    // output vs target, inside the edit mask
};
RegionScores region_metrics(const TensorF& output, const EditPair& pair);

// Cosine similarity of fixed 64-d random projections, seeded once.
double proxy_embed_sim(const TensorF& a, const TensorF& b, std::uint64_t seed);

// True when the output lies closer (L1) to the target render than to the
// original render.
bool edit_success(const TensorF& output, const EditPair& pair);

// Per-method raw metric arrays, one entry per evaluated example.
struct MethodRun {
    std::string name;
    std::vector<double> l1, l2, psnr, ssim, consistency, adherence, proxy_sim;
    std::vector<int> success;
};

struct ReportMeta {
    std::uint64_t seed = 0;
    std::string config_digest;
};

struct MetricReport {
    std::string text;  // aligned table, best value per column flagged
    std::string json;  // metadata plus per-method raw arrays
};
MetricReport build_report(const std::vector<MethodRun>& runs, const ReportMeta& meta);

// Convenience: evaluate one output image against its pair.
MethodRun& accumulate(MethodRun& run, const TensorF& output, const EditPair& pair,
                      std::uint64_t proxy_seed);

}  // namespace dedit
