#include "dedit/config.hpp"

#include <cstdio>
#include <stdexcept>

#include "dedit/io_util.hpp"
#include "json.hpp"

namespace dedit {

namespace {

using Json = nlohmann::ordered_json;

Json to_json_object(const RunConfig& c) {
    Json j;
    // model
    j["image_size"] = c.model.image_size;
    j["channels"] = c.model.channels;
    j["patch"] = c.model.patch;
    j["embed_dim"] = c.model.embed_dim;
    j["blocks"] = c.model.blocks;
    j["heads"] = c.model.heads;
    j["vocab_size"] = c.model.vocab_size;
    j["max_text_len"] = c.model.max_text_len;
    j["lora_rank"] = c.model.lora_rank;
    j["lora_alpha"] = c.model.lora_alpha;
    j["fusion"] = fusion_mode_name(c.model.fusion);
    j["bridge_swap_roles"] = c.model.bridge_swap_roles;
    // schedule
    j["timesteps"] = c.timesteps;
    j["beta_start"] = c.beta_start;
    j["beta_end"] = c.beta_end;
    // training
    j["lr"] = c.train.lr;
    j["batch_size"] = c.train.batch_size;
    j["steps"] = c.train.steps;
    j["text_drop"] = c.train.text_drop;
    j["image_drop"] = c.train.image_drop;
    j["seed"] = c.train.seed;
    j["beta1"] = c.train.beta1;
    j["beta2"] = c.train.beta2;
    j["adam_eps"] = c.train.adam_eps;
    j["weight_decay"] = c.train.weight_decay;
    j["pretrain_steps"] = c.train.pretrain_steps;
    j["pretrain_lr"] = c.train.pretrain_lr;
    // guidance
    j["lambda_i"] = c.guidance.lambda_i;
    j["lambda_t"] = c.guidance.lambda_t;
    j["sampler"] = sampler_name(c.guidance.sampler);
    j["inference_steps"] = c.guidance.inference_steps;
    // run
    j["text_mode"] = text_mode_name(c.text_mode);
    j["dataset"] = c.dataset_path;
    j["checkpoint"] = c.checkpoint_path;
    j["out_dir"] = c.out_dir;
    return j;
}

// Each known key writes through to one field; anything else is a config
// error naming the offending key.
void apply_key(RunConfig& c, const std::string& key, const Json& v) {
    try {
        if (key == "image_size") c.model.image_size = v.get<int>();
        else if (key == "channels") c.model.channels = v.get<int>();
        else if (key == "patch") c.model.patch = v.get<int>();
        else if (key == "embed_dim") c.model.embed_dim = v.get<int>();
        else if (key == "blocks") c.model.blocks = v.get<int>();
        else if (key == "heads") c.model.heads = v.get<int>();
        else if (key == "vocab_size") c.model.vocab_size = v.get<int>();
        else if (key == "max_text_len") c.model.max_text_len = v.get<int>();
        else if (key == "lora_rank") c.model.lora_rank = v.get<int>();
        else if (key == "lora_alpha") c.model.lora_alpha = v.get<float>();
        else if (key == "fusion") c.model.fusion = fusion_mode_from_name(v.get<std::string>());
        else if (key == "bridge_swap_roles") c.model.bridge_swap_roles = v.get<bool>();
        else if (key == "timesteps") c.timesteps = v.get<int>();
        else if (key == "beta_start") c.beta_start = v.get<double>();
        else if (key == "beta_end") c.beta_end = v.get<double>();
        else if (key == "lr") c.train.lr = v.get<double>();
        else if (key == "batch_size") c.train.batch_size = v.get<int>();
        else if (key == "steps") c.train.steps = v.get<int>();
        else if (key == "text_drop") c.train.text_drop = v.get<double>();
        else if (key == "image_drop") c.train.image_drop = v.get<double>();
        else if (key == "seed") c.train.seed = v.get<std::uint64_t>();
        else if (key == "beta1") c.train.beta1 = v.get<double>();
        else if (key == "beta2") c.train.beta2 = v.get<double>();
        else if (key == "adam_eps") c.train.adam_eps = v.get<double>();
        else if (key == "weight_decay") c.train.weight_decay = v.get<double>();
        else if (key == "pretrain_steps") c.train.pretrain_steps = v.get<int>();
        else if (key == "pretrain_lr") c.train.pretrain_lr = v.get<double>();
        else if (key == "lambda_i") c.guidance.lambda_i = v.get<double>();
        else if (key == "lambda_t") c.guidance.lambda_t = v.get<double>();
        else if (key == "sampler") c.guidance.sampler = sampler_from_name(v.get<std::string>());
        else if (key == "inference_steps") c.guidance.inference_steps = v.get<int>();
        else if (key == "text_mode") c.text_mode = text_mode_from_name(v.get<std::string>());
        else if (key == "dataset") c.dataset_path = v.get<std::string>();
        else if (key == "checkpoint") c.checkpoint_path = v.get<std::string>();
        else if (key == "out_dir") c.out_dir = v.get<std::string>();
        else throw std::invalid_argument("config: unknown key '" + key + "'");
    } catch (const Json::type_error&) {
        throw std::invalid_argument("config: wrong value type for key '" + key + "'");
    }
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    if (timesteps < 1) throw std::invalid_argument("config: timesteps must be positive");
    if (!(beta_start > 0 && beta_start < 1) || !(beta_end > 0 && beta_end < 1))
        throw std::invalid_argument("config: betas must lie in (0,1)");
    train.validate();
    guidance.validate(timesteps);
}

std::string run_config_to_json(const RunConfig& cfg, int indent) {
    return to_json_object(cfg).dump(indent) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw std::invalid_argument(std::string("config: not valid json: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
    RunConfig c;
    for (const auto& [key, value] : j.items()) apply_key(c, key, value);
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    const auto bytes = read_file(path);
    return run_config_from_json(std::string(bytes.begin(), bytes.end()));
}

std::string config_digest(const RunConfig& cfg) {
    RunConfig stripped = cfg;
    stripped.dataset_path.clear();
    stripped.checkpoint_path.clear();
    stripped.out_dir.clear();
    const std::string canonical = run_config_to_json(stripped, -1);
    const std::uint64_t h = fnv1a64_bytes(canonical.data(), canonical.size());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace dedit
