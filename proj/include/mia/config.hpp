#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace mia {

// Raised by validate_config with the offending field named in what().
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Which mask granularities the controller may actually gate. Disabled
// dimensions run with identically-1 masks and their controller branch is
// neither executed nor costed.
struct ActiveDims {
    bool depth = true;
    bool head = true;
    bool token = true;

    bool all() const { return depth && head && token; }
    bool none() const { return !depth && !head && !token; }
    std::string to_string() const;
    static ActiveDims from_string(const std::string& s);  // "head,depth,token" subset
};

struct TrainRecipe {
    int batch_size = 64;
    double stage1_lr = 1e-4;
    int stage1_max_epochs = 40;
    double stage2_lr_backbone = 1e-5;
    double stage2_lr_controller = 1e-3;
    int stage2_epochs = 60;
    double stage3_lr_backbone = 1e-5;
    double stage3_lr_controller = 1e-4;
    double stage3_lr_rl = 1e-3;
    int stage3_frozen_epochs = 8;
    int stage3_total_epochs = 20;
    double dense_lr = 3e-4;  // plain backbone training (no dynamic dims)
    int dense_epochs = 15;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    double entropy_coeff = 0.01;
};

struct DatasetSpec {
    std::string kind = "synthetic";  // synthetic | packed | directory
    std::string path;
    int classes = 10;
    int samples = 5000;
    double val_fraction = 0.1;
    uint64_t seed = 7;
};

// Full architectural + training description shared by every module.
// Immutable after validate(); derived fields are cached there.
struct MIAConfig {
    // architecture
    int num_blocks = 4;     // L
    int num_heads = 4;      // H
    int head_dim = 16;      // E
    int image_size = 32;
    int patch_size = 8;
    int channels = 3;
    int num_classes = 10;
    bool use_class_token = true;
    double mlp_ratio = 2.0;          // r
    int controller_hidden = 0;       // E' (0 -> default E/4)
    int head_feature_dim = 0;        // E'' (0 -> default E/4)

    // masking / objectives
    double gumbel_tau_start = 5.0;
    double gumbel_tau_end = 0.5;
    double target_flops_ratio = 0.7;
    double alpha_magnitude = 0.1;
    double beta = 0.5;
    double inherit_fraction = 0.75;  // rho
    ActiveDims dims;

    long long seed = 1;

    TrainRecipe train;
    DatasetSpec dataset;

    // derived (filled by validate)
    int grid_h = 0;           // N_h
    int grid_w = 0;           // N_w
    int num_tokens = 0;       // N = N_h * N_w (spatial only)
    int embed_dim = 0;        // H * E
    int mlp_hidden = 0;       // r * H * E
    int mlp_hidden_per_head = 0;  // r * E
    bool validated = false;

    int seq_len() const { return num_tokens + (use_class_token ? 1 : 0); }
};

// Checks every invariant; on success returns the config with derived
// quantities cached. Errors name the offending field.
MIAConfig validate_config(MIAConfig cfg);

// JSON round-trip. Unknown keys anywhere in the document are rejected.
MIAConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const MIAConfig& cfg);
MIAConfig load_config_file(const std::string& path);
void save_config_file(const MIAConfig& cfg, const std::string& path);

}  // namespace mia
