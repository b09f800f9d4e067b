#pragma once

#include <string>
#include <vector>

#include "mia/model.hpp"

namespace mia {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& m) : std::runtime_error(m) {}
};

// Trainer bookkeeping persisted with the weights.
struct CheckpointMeta {
    std::string stage = "init";  // init | dense | stage1 | stage2 | stage3
    int epoch = 0;
    double tau = 0.0;
    int64_t opt_step = 0;
    std::string rng_state;
    std::vector<std::string> completed;  // finished stages, in order
    bool has_optimizer = false;
};

// Layout: <dir>/manifest.json plus one little-endian float32 file per
// parameter tensor under <dir>/tensors/ (optimizer moments alongside when
// saved). Saving rounds the live values to float32 so a save/load
// round-trip reproduces the model bit-exactly.
void save_checkpoint(Model& model, CheckpointMeta meta, const std::string& dir,
                     bool with_optimizer = true);

struct LoadedCheckpoint {
    Model model;
    CheckpointMeta meta;
};
LoadedCheckpoint load_checkpoint(const std::string& dir);

}  // namespace mia
