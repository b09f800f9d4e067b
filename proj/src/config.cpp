#include "mia/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mia {

using nlohmann::json;

std::string ActiveDims::to_string() const {
    std::string s;
    if (head) s += "head";
    if (depth) s += s.empty() ? "depth" : ",depth";
    if (token) s += s.empty() ? "token" : ",token";
    return s;
}

ActiveDims ActiveDims::from_string(const std::string& s) {
    ActiveDims d{false, false, false};
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        // trim
        size_t a = item.find_first_not_of(" \t");
        if (a == std::string::npos) continue;
        size_t b = item.find_last_not_of(" \t");
        item = item.substr(a, b - a + 1);
        if (item == "head")
            d.head = true;
        else if (item == "depth")
            d.depth = true;
        else if (item == "token")
            d.token = true;
        else if (!item.empty())
            throw ConfigError("dims: unknown dimension '" + item + "'");
    }
    return d;
}

MIAConfig validate_config(MIAConfig cfg) {
    auto positive = [](long long v, const char* name) {
        if (v <= 0) throw ConfigError(std::string(name) + ": must be positive");
    };
    positive(cfg.num_blocks, "num_blocks");
    positive(cfg.num_heads, "num_heads");
    positive(cfg.head_dim, "head_dim");
    positive(cfg.image_size, "image_size");
    positive(cfg.patch_size, "patch_size");
    positive(cfg.channels, "channels");
    positive(cfg.num_classes, "num_classes");
    if (cfg.mlp_ratio <= 0) throw ConfigError("mlp_ratio: must be positive");
    if (cfg.gumbel_tau_start <= 0) throw ConfigError("gumbel_tau_start: must be positive");
    if (cfg.gumbel_tau_end <= 0) throw ConfigError("gumbel_tau_end: must be positive");
    if (cfg.alpha_magnitude <= 0) throw ConfigError("alpha_magnitude: must be positive");
    if (cfg.beta <= 0) throw ConfigError("beta: must be positive");

    if (cfg.controller_hidden == 0) {
        if (cfg.head_dim % 4 != 0)
            throw ConfigError("head_dim: E not divisible by 4 (required by default E' = E/4)");
        cfg.controller_hidden = cfg.head_dim / 4;
    }
    if (cfg.controller_hidden <= 0) throw ConfigError("controller_hidden: must be positive");
    if (cfg.head_feature_dim == 0) {
        if (cfg.head_dim % 4 != 0)
            throw ConfigError("head_dim: E not divisible by 4 (required by default E'' = E/4)");
        cfg.head_feature_dim = cfg.head_dim / 4;
    }
    if (cfg.head_feature_dim <= 0) throw ConfigError("head_feature_dim: must be positive");

    if (cfg.image_size % cfg.patch_size != 0)
        throw ConfigError("image_size: not divisible by patch_size");
    if (cfg.target_flops_ratio <= 0.0 || cfg.target_flops_ratio > 1.0)
        throw ConfigError("target_flops_ratio: must be in (0, 1]");
    if (cfg.inherit_fraction < 0.0 || cfg.inherit_fraction > 1.0)
        throw ConfigError("inherit_fraction: must be in [0, 1]");

    double mh = cfg.mlp_ratio * cfg.num_heads * cfg.head_dim;
    if (std::floor(mh) != mh)
        throw ConfigError("mlp_ratio: r*H*E must be an integer");
    double mhp = cfg.mlp_ratio * cfg.head_dim;
    if (std::floor(mhp) != mhp)
        throw ConfigError("mlp_ratio: r*E must be an integer (per-head MLP groups)");

    cfg.grid_h = cfg.image_size / cfg.patch_size;
    cfg.grid_w = cfg.image_size / cfg.patch_size;
    cfg.num_tokens = cfg.grid_h * cfg.grid_w;
    cfg.embed_dim = cfg.num_heads * cfg.head_dim;
    cfg.mlp_hidden = static_cast<int>(mh);
    cfg.mlp_hidden_per_head = static_cast<int>(mhp);
    cfg.validated = true;
    return cfg;
}

namespace {

constexpr int kSchemaVersion = 1;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key()))
            throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

MIAConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    check_keys(j, {"schema_version", "model", "masking", "training", "dataset", "seed"}, "config");
    if (!j.contains("schema_version"))
        throw ConfigError("schema_version: missing");
    if (j.at("schema_version").get<int>() != kSchemaVersion)
        throw ConfigError("schema_version: unsupported version");

    MIAConfig c;
    get_if(j, "seed", c.seed);
    if (j.contains("model")) {
        const json& m = j["model"];
        check_keys(m,
                   {"num_blocks", "num_heads", "head_dim", "image_size", "patch_size", "channels",
                    "num_classes", "use_class_token", "mlp_ratio", "controller_hidden",
                    "head_feature_dim"},
                   "model");
        get_if(m, "num_blocks", c.num_blocks);
        get_if(m, "num_heads", c.num_heads);
        get_if(m, "head_dim", c.head_dim);
        get_if(m, "image_size", c.image_size);
        get_if(m, "patch_size", c.patch_size);
        get_if(m, "channels", c.channels);
        get_if(m, "num_classes", c.num_classes);
        get_if(m, "use_class_token", c.use_class_token);
        get_if(m, "mlp_ratio", c.mlp_ratio);
        get_if(m, "controller_hidden", c.controller_hidden);
        get_if(m, "head_feature_dim", c.head_feature_dim);
    }
    if (j.contains("masking")) {
        const json& m = j["masking"];
        check_keys(m,
                   {"gumbel_tau_start", "gumbel_tau_end", "target_flops_ratio", "alpha_magnitude",
                    "beta", "inherit_fraction", "dims"},
                   "masking");
        get_if(m, "gumbel_tau_start", c.gumbel_tau_start);
        get_if(m, "gumbel_tau_end", c.gumbel_tau_end);
        get_if(m, "target_flops_ratio", c.target_flops_ratio);
        get_if(m, "alpha_magnitude", c.alpha_magnitude);
        get_if(m, "beta", c.beta);
        get_if(m, "inherit_fraction", c.inherit_fraction);
        if (m.contains("dims")) c.dims = ActiveDims::from_string(m["dims"].get<std::string>());
    }
    if (j.contains("training")) {
        const json& t = j["training"];
        check_keys(t,
                   {"batch_size", "stage1_lr", "stage1_max_epochs", "stage2_lr_backbone",
                    "stage2_lr_controller", "stage2_epochs", "stage3_lr_backbone",
                    "stage3_lr_controller", "stage3_lr_rl", "stage3_frozen_epochs",
                    "stage3_total_epochs", "dense_lr", "dense_epochs", "weight_decay", "grad_clip",
                    "entropy_coeff"},
                   "training");
        get_if(t, "batch_size", c.train.batch_size);
        get_if(t, "stage1_lr", c.train.stage1_lr);
        get_if(t, "stage1_max_epochs", c.train.stage1_max_epochs);
        get_if(t, "stage2_lr_backbone", c.train.stage2_lr_backbone);
        get_if(t, "stage2_lr_controller", c.train.stage2_lr_controller);
        get_if(t, "stage2_epochs", c.train.stage2_epochs);
        get_if(t, "stage3_lr_backbone", c.train.stage3_lr_backbone);
        get_if(t, "stage3_lr_controller", c.train.stage3_lr_controller);
        get_if(t, "stage3_lr_rl", c.train.stage3_lr_rl);
        get_if(t, "stage3_frozen_epochs", c.train.stage3_frozen_epochs);
        get_if(t, "stage3_total_epochs", c.train.stage3_total_epochs);
        get_if(t, "dense_lr", c.train.dense_lr);
        get_if(t, "dense_epochs", c.train.dense_epochs);
        get_if(t, "weight_decay", c.train.weight_decay);
        get_if(t, "grad_clip", c.train.grad_clip);
        get_if(t, "entropy_coeff", c.train.entropy_coeff);
    }
    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        check_keys(d, {"kind", "path", "classes", "samples", "val_fraction", "seed"}, "dataset");
        get_if(d, "kind", c.dataset.kind);
        get_if(d, "path", c.dataset.path);
        get_if(d, "classes", c.dataset.classes);
        get_if(d, "samples", c.dataset.samples);
        get_if(d, "val_fraction", c.dataset.val_fraction);
        get_if(d, "seed", c.dataset.seed);
    }
    return validate_config(c);
}

std::string config_to_json_text(const MIAConfig& c) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = c.seed;
    j["model"] = {{"num_blocks", c.num_blocks},
                  {"num_heads", c.num_heads},
                  {"head_dim", c.head_dim},
                  {"image_size", c.image_size},
                  {"patch_size", c.patch_size},
                  {"channels", c.channels},
                  {"num_classes", c.num_classes},
                  {"use_class_token", c.use_class_token},
                  {"mlp_ratio", c.mlp_ratio},
                  {"controller_hidden", c.controller_hidden},
                  {"head_feature_dim", c.head_feature_dim}};
    j["masking"] = {{"gumbel_tau_start", c.gumbel_tau_start},
                    {"gumbel_tau_end", c.gumbel_tau_end},
                    {"target_flops_ratio", c.target_flops_ratio},
                    {"alpha_magnitude", c.alpha_magnitude},
                    {"beta", c.beta},
                    {"inherit_fraction", c.inherit_fraction},
                    {"dims", c.dims.to_string()}};
    j["training"] = {{"batch_size", c.train.batch_size},
                     {"stage1_lr", c.train.stage1_lr},
                     {"stage1_max_epochs", c.train.stage1_max_epochs},
                     {"stage2_lr_backbone", c.train.stage2_lr_backbone},
                     {"stage2_lr_controller", c.train.stage2_lr_controller},
                     {"stage2_epochs", c.train.stage2_epochs},
                     {"stage3_lr_backbone", c.train.stage3_lr_backbone},
                     {"stage3_lr_controller", c.train.stage3_lr_controller},
                     {"stage3_lr_rl", c.train.stage3_lr_rl},
                     {"stage3_frozen_epochs", c.train.stage3_frozen_epochs},
                     {"stage3_total_epochs", c.train.stage3_total_epochs},
                     {"dense_lr", c.train.dense_lr},
                     {"dense_epochs", c.train.dense_epochs},
                     {"weight_decay", c.train.weight_decay},
                     {"grad_clip", c.train.grad_clip},
                     {"entropy_coeff", c.train.entropy_coeff}};
    j["dataset"] = {{"kind", c.dataset.kind},
                    {"path", c.dataset.path},
                    {"classes", c.dataset.classes},
                    {"samples", c.dataset.samples},
                    {"val_fraction", c.dataset.val_fraction},
                    {"seed", c.dataset.seed}};
    return j.dump(2) + "\n";
}

MIAConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config file not readable: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return config_from_json_text(ss.str());
}

void save_config_file(const MIAConfig& cfg, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("config file not writable: " + path);
    f << config_to_json_text(cfg);
}

}  // namespace mia
