#pragma once

#include <cstdint>
#include <string>

#include "dedit/diffusion.hpp"
#include "dedit/model.hpp"

// One flat JSON document drives every command. Unknown keys are errors so a
// typo in an ablation config fails loudly instead of silently running the
// defaults. The digest identifies the experiment (paths excluded, so moving
// files around does not change it) and is stamped into checkpoints, reports,
// and log lines.

namespace dedit {

struct RunConfig {
    ModelConfig model;

    // Noise schedule; betas ramp linearly across `timesteps`.
    int timesteps = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    TrainConfig train;        // train.seed doubles as the run seed
    GuidanceConfig guidance;  // sampling-time defaults, overridable per command
    TextMode text_mode = TextMode::kDescription;

    std::string dataset_path;
    std::string checkpoint_path;
    std::string out_dir = "out";

    NoiseSchedule schedule() const { return NoiseSchedule::linear(timesteps, beta_start, beta_end); }
    void validate() const;
};

// All keys with their defaults, in canonical order. Parsing accepts any
// subset of these keys and nothing else.
std::string run_config_to_json(const RunConfig& cfg, int indent = 2);
RunConfig run_config_from_json(const std::string& text);
RunConfig load_run_config(const std::string& path);

// FNV-1a of the canonical JSON with path fields blanked; 16 hex digits.
std::string config_digest(const RunConfig& cfg);

}  // namespace dedit
