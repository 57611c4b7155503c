#ifndef DITSE_CONFIG_HPP
#define DITSE_CONFIG_HPP

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "ditse/enhance.hpp"
#include "ditse/training.hpp"

namespace ditse::nn {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string sampler_kind_to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::ddim: return "ddim";
        case SamplerKind::dpmpp_multistep: return "dpmpp-multistep";
        default: return "dpmpp-multistep-sde";
    }
}

inline std::string conditioner_mode_to_string(ConditionerMode m) {
    return m == ConditionerMode::masking ? "masking" : "mapping";
}

inline ConditionerMode conditioner_mode_from_string(const std::string& s) {
    if (s == "masking") return ConditionerMode::masking;
    if (s == "mapping") return ConditionerMode::mapping;
    throw ConfigError("unknown conditioner mode: " + s);
}

// one file that configures the whole pipeline; starts from a named profile
// and lets individual keys override it
struct RunConfig {
    std::string profile = "toy16k";
    uint64_t seed = 0;
    std::string data_root;
    VaeConfig vae;
    DiTConfig dit;
    ConditionerConfig cond;
    RvqConfig rvq;
    TrainConfig train;
    SamplerConfig sampler;
    EnhanceConfig enhance;
};

inline void apply_profile(RunConfig& c, const std::string& name) {
    c.profile = name;
    if (name == "toy16k") {
        c.vae = vae_toy16k();
        c.dit = dit_toy();
        c.cond = cond_toy();
        c.rvq = RvqConfig{};
    } else if (name == "paper48k") {
        c.vae = vae_paper48k();
        c.dit = dit_paper();
        c.cond = cond_paper();
        c.rvq = RvqConfig{};
        c.rvq.sample_rate = 48000;
        c.rvq.strides = {6, 10, 20};
        c.rvq.channels = {24, 32, 48, 48};
    } else {
        throw ConfigError("unknown profile: " + name);
    }
}

namespace cfg_detail {

using nlohmann::json;

inline void want_int(const json& v, const std::string& where, int& out) {
    if (!v.is_number_integer()) throw ConfigError("key " + where + ": expected integer");
    out = v.get<int>();
}
inline void want_long(const json& v, const std::string& where, long& out) {
    if (!v.is_number_integer()) throw ConfigError("key " + where + ": expected integer");
    out = v.get<long>();
}
inline void want_u64(const json& v, const std::string& where, uint64_t& out) {
    if (!v.is_number_integer()) throw ConfigError("key " + where + ": expected integer");
    out = v.get<uint64_t>();
}
inline void want_double(const json& v, const std::string& where, double& out) {
    if (!v.is_number()) throw ConfigError("key " + where + ": expected number");
    out = v.get<double>();
}
inline void want_bool(const json& v, const std::string& where, bool& out) {
    if (!v.is_boolean()) throw ConfigError("key " + where + ": expected boolean");
    out = v.get<bool>();
}
inline void want_ints(const json& v, const std::string& where, std::vector<int>& out) {
    if (!v.is_array()) throw ConfigError("key " + where + ": expected array of integers");
    out = v.get<std::vector<int>>();
}

inline void apply_vae(const json& j, VaeConfig& c) {
    for (auto& [k, v] : j.items()) {
        if (k == "sample_rate") want_int(v, "vae.sample_rate", c.sample_rate);
        else if (k == "frame_rate") want_double(v, "vae.frame_rate", c.frame_rate);
        else if (k == "strides") want_ints(v, "vae.strides", c.strides);
        else if (k == "channels") want_ints(v, "vae.channels", c.channels);
        else if (k == "latent_dim") want_int(v, "vae.latent_dim", c.latent_dim);
        else if (k == "kl_weight") want_double(v, "vae.kl_weight", c.kl_weight);
        else if (k == "wav_weight") want_double(v, "vae.wav_weight", c.wav_weight);
        else throw ConfigError("unknown config key: vae." + k);
    }
}

inline void apply_dit(const json& j, DiTConfig& c) {
    for (auto& [k, v] : j.items()) {
        if (k == "n_layers") want_int(v, "dit.n_layers", c.n_layers);
        else if (k == "n_heads") want_int(v, "dit.n_heads", c.n_heads);
        else if (k == "channels") want_int(v, "dit.channels", c.channels);
        else if (k == "latent_dim") want_int(v, "dit.latent_dim", c.latent_dim);
        else if (k == "cond_feature_dim") want_int(v, "dit.cond_feature_dim", c.cond_feature_dim);
        else if (k == "dropout") want_double(v, "dit.dropout", c.dropout);
        else if (k == "concat_timestep") want_bool(v, "dit.concat_timestep", c.concat_timestep);
        else throw ConfigError("unknown config key: dit." + k);
    }
}

inline void apply_cond(const json& j, ConditionerConfig& c) {
    for (auto& [k, v] : j.items()) {
        if (k == "n_layers") want_int(v, "conditioner.n_layers", c.n_layers);
        else if (k == "model_dim") want_int(v, "conditioner.model_dim", c.model_dim);
        else if (k == "ff_dim") want_int(v, "conditioner.ff_dim", c.ff_dim);
        else if (k == "conv_kernel") want_int(v, "conditioner.conv_kernel", c.conv_kernel);
        else if (k == "latent_dim") want_int(v, "conditioner.latent_dim", c.latent_dim);
        else if (k == "n_heads") want_int(v, "conditioner.n_heads", c.n_heads);
        else if (k == "mode") {
            if (!v.is_string()) throw ConfigError("key conditioner.mode: expected string");
            c.mode = conditioner_mode_from_string(v.get<std::string>());
        } else throw ConfigError("unknown config key: conditioner." + k);
    }
}

inline void apply_rvq(const json& j, RvqConfig& c) {
    for (auto& [k, v] : j.items()) {
        if (k == "sample_rate") want_int(v, "rvq.sample_rate", c.sample_rate);
        else if (k == "strides") want_ints(v, "rvq.strides", c.strides);
        else if (k == "channels") want_ints(v, "rvq.channels", c.channels);
        else if (k == "code_dim") want_int(v, "rvq.code_dim", c.code_dim);
        else if (k == "n_quantizers") want_int(v, "rvq.n_quantizers", c.n_quantizers);
        else if (k == "codebook_size") want_int(v, "rvq.codebook_size", c.codebook_size);
        else if (k == "commit_weight") want_double(v, "rvq.commit_weight", c.commit_weight);
        else if (k == "wav_weight") want_double(v, "rvq.wav_weight", c.wav_weight);
        else throw ConfigError("unknown config key: rvq." + k);
    }
}

inline void apply_train(const json& j, TrainConfig& c) {
    for (auto& [k, v] : j.items()) {
        if (k == "batch_size") want_int(v, "train.batch_size", c.batch_size);
        else if (k == "segment_seconds") want_double(v, "train.segment_seconds", c.segment_seconds);
        else if (k == "total_steps") want_long(v, "train.total_steps", c.total_steps);
        else if (k == "warmup_fraction") want_double(v, "train.warmup_fraction", c.warmup_fraction);
        else if (k == "peak_lr") want_double(v, "train.peak_lr", c.peak_lr);
        else if (k == "final_lr") want_double(v, "train.final_lr", c.final_lr);
        else if (k == "weight_decay") want_double(v, "train.weight_decay", c.weight_decay);
        else if (k == "cfg_dropout_p") want_double(v, "train.cfg_dropout_p", c.cfg_dropout_p);
        else if (k == "independent_cfg_drop") want_bool(v, "train.independent_cfg_drop", c.independent_cfg_drop);
        else if (k == "prefix_p") want_double(v, "train.prefix_p", c.prefix_p);
        else if (k == "prefix_max_fraction") want_double(v, "train.prefix_max_fraction", c.prefix_max_fraction);
        else if (k == "lambda_cond") want_double(v, "train.lambda_cond", c.lambda_cond);
        else if (k == "seed") want_u64(v, "train.seed", c.seed);
        else throw ConfigError("unknown config key: train." + k);
    }
}

inline void apply_sampler(const json& j, SamplerConfig& c) {
    for (auto& [k, v] : j.items()) {
        if (k == "kind") {
            if (!v.is_string()) throw ConfigError("key sampler.kind: expected string");
            c.kind = sampler_kind_from_string(v.get<std::string>());
        } else if (k == "steps") want_int(v, "sampler.steps", c.steps);
        else if (k == "guidance_weight") want_double(v, "sampler.guidance_weight", c.guidance_weight);
        else if (k == "seed") want_u64(v, "sampler.seed", c.seed);
        else throw ConfigError("unknown config key: sampler." + k);
    }
}

inline void apply_enhance(const json& j, EnhanceConfig& c) {
    for (auto& [k, v] : j.items()) {
        if (k == "window_seconds") want_double(v, "enhance.window_seconds", c.window_seconds);
        else if (k == "overlap_seconds") want_double(v, "enhance.overlap_seconds", c.overlap_seconds);
        else if (k == "posthoc") want_bool(v, "enhance.posthoc", c.posthoc);
        else if (k == "output_rate") want_int(v, "enhance.output_rate", c.output_rate);
        else if (k == "prefix_max_fraction") want_double(v, "enhance.prefix_max_fraction", c.prefix_max_fraction);
        else if (k == "sampler") apply_sampler(v, c.sampler);
        else throw ConfigError("unknown config key: enhance." + k);
    }
}

}  // namespace cfg_detail

inline void apply_run_config_json(const nlohmann::json& j, RunConfig& c) {
    using namespace cfg_detail;
    if (!j.is_object()) throw ConfigError("config root must be an object");
    if (j.contains("profile")) {
        if (!j["profile"].is_string()) throw ConfigError("key profile: expected string");
        apply_profile(c, j["profile"].get<std::string>());
    }
    for (auto& [k, v] : j.items()) {
        if (k == "profile") continue;  // handled above, before overrides
        else if (k == "seed") want_u64(v, "seed", c.seed);
        else if (k == "data_root") {
            if (!v.is_string()) throw ConfigError("key data_root: expected string");
            c.data_root = v.get<std::string>();
        } else if (k == "vae") apply_vae(v, c.vae);
        else if (k == "dit") apply_dit(v, c.dit);
        else if (k == "conditioner") apply_cond(v, c.cond);
        else if (k == "rvq") apply_rvq(v, c.rvq);
        else if (k == "train") apply_train(v, c.train);
        else if (k == "sampler") apply_sampler(v, c.sampler);
        else if (k == "enhance") apply_enhance(v, c.enhance);
        else throw ConfigError("unknown config key: " + k);
    }
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["profile"] = c.profile;
    j["seed"] = c.seed;
    j["data_root"] = c.data_root;
    j["vae"] = {{"sample_rate", c.vae.sample_rate}, {"frame_rate", c.vae.frame_rate},
                {"strides", c.vae.strides},         {"channels", c.vae.channels},
                {"latent_dim", c.vae.latent_dim},   {"kl_weight", c.vae.kl_weight},
                {"wav_weight", c.vae.wav_weight}};
    j["dit"] = {{"n_layers", c.dit.n_layers},
                {"n_heads", c.dit.n_heads},
                {"channels", c.dit.channels},
                {"latent_dim", c.dit.latent_dim},
                {"cond_feature_dim", c.dit.cond_feature_dim},
                {"dropout", c.dit.dropout},
                {"concat_timestep", c.dit.concat_timestep}};
    j["conditioner"] = {{"n_layers", c.cond.n_layers},     {"model_dim", c.cond.model_dim},
                        {"ff_dim", c.cond.ff_dim},         {"conv_kernel", c.cond.conv_kernel},
                        {"latent_dim", c.cond.latent_dim}, {"n_heads", c.cond.n_heads},
                        {"mode", conditioner_mode_to_string(c.cond.mode)}};
    j["rvq"] = {{"sample_rate", c.rvq.sample_rate},     {"strides", c.rvq.strides},
                {"channels", c.rvq.channels},           {"code_dim", c.rvq.code_dim},
                {"n_quantizers", c.rvq.n_quantizers},   {"codebook_size", c.rvq.codebook_size},
                {"commit_weight", c.rvq.commit_weight}, {"wav_weight", c.rvq.wav_weight}};
    j["train"] = {{"batch_size", c.train.batch_size},
                  {"segment_seconds", c.train.segment_seconds},
                  {"total_steps", c.train.total_steps},
                  {"warmup_fraction", c.train.warmup_fraction},
                  {"peak_lr", c.train.peak_lr},
                  {"final_lr", c.train.final_lr},
                  {"weight_decay", c.train.weight_decay},
                  {"cfg_dropout_p", c.train.cfg_dropout_p},
                  {"independent_cfg_drop", c.train.independent_cfg_drop},
                  {"prefix_p", c.train.prefix_p},
                  {"prefix_max_fraction", c.train.prefix_max_fraction},
                  {"lambda_cond", c.train.lambda_cond},
                  {"seed", c.train.seed}};
    j["sampler"] = {{"kind", sampler_kind_to_string(c.sampler.kind)},
                    {"steps", c.sampler.steps},
                    {"guidance_weight", c.sampler.guidance_weight},
                    {"seed", c.sampler.seed}};
    j["enhance"] = {{"window_seconds", c.enhance.window_seconds},
                    {"overlap_seconds", c.enhance.overlap_seconds},
                    {"posthoc", c.enhance.posthoc},
                    {"output_rate", c.enhance.output_rate},
                    {"prefix_max_fraction", c.enhance.prefix_max_fraction}};
    return j;
}

// FNV-1a over the canonical serialized form, so semantically equal configs
// hash equal regardless of key order or whitespace in the source file
inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string config_hash(const RunConfig& c) {
    std::ostringstream os;
    os << std::hex << fnv1a(run_config_to_json(c).dump());
    return os.str();
}

inline RunConfig parse_run_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig c;
    apply_profile(c, c.profile);
    apply_run_config_json(j, c);
    c.vae.validate();
    c.train.validate();
    c.enhance.validate();
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

}  // namespace ditse::nn

#endif  // DITSE_CONFIG_HPP
