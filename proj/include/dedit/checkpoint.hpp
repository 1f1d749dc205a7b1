#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dedit/config.hpp"
#include "dedit/model.hpp"
#include "dedit/param_set.hpp"

// Checkpoint container: "DEDT" magic, u32 version, u64 header length, a JSON
// header (tensor table, the full run config, and the training-step counter),
// then all tensor payloads as little-endian float32. Offsets in the tensor
// table are payload-relative and must tile the payload exactly, which makes
// torn or doctored files detectable before any tensor is touched.

namespace dedit {

struct CheckpointTensor {
    std::string name;
    Shape shape;
    bool frozen = false;
    TensorF tensor;
};

struct Checkpoint {
    RunConfig config;
    long step = 0;
    std::vector<CheckpointTensor> tensors;  // in serialized order
};

std::vector<std::uint8_t> serialize_checkpoint(const ParamSetT<float>& params,
                                               const RunConfig& config, long step);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const ParamSetT<float>& params,
                     const RunConfig& config, long step);
Checkpoint load_checkpoint(const std::string& path);

// Copies checkpoint values into an existing parameter set. Every checkpoint
// tensor must exist in the destination with a matching shape, and vice versa.
void restore_params(ParamSetT<float>& dst, const Checkpoint& ckpt);

// Rebuilds the model described by the checkpoint's config and overwrites all
// of its parameters with the stored values.
ModelT<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace dedit
