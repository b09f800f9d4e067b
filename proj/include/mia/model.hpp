#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mia/autodiff.hpp"
#include "mia/config.hpp"
#include "mia/cost_model.hpp"
#include "mia/masks.hpp"
#include "mia/params.hpp"
#include "mia/rng.hpp"

namespace mia {

enum class RunMode { train, eval };

struct Batch {
    int size = 0, channels = 0, height = 0, width = 0;
    std::vector<double> pixels;  // (b, c, h, w), values in [0, 1]
    std::vector<int> labels;

    const double* sample(int i) const {
        return pixels.data() + static_cast<size_t>(i) * channels * height * width;
    }
    int64_t sample_numel() const { return static_cast<int64_t>(channels) * height * width; }
};

// Additive perturbation applied to one controller logit's soft path while
// its hard decision stays pinned at the unperturbed value. Used by the
// finite-difference checks of the straight-through gradients.
struct StProbe {
    int sample = 0;
    int block = 0;
    char dim = 'b';  // 'b' | 'h' | 'n'
    int index = 0;
    double delta = 0.0;
};

struct ForcePolicy {
    enum class Kind { none, all_on, all_skip, explicit_masks };
    Kind kind = Kind::none;
    // [sample][block], hard values only; used with Kind::explicit_masks
    std::vector<std::vector<MaskBundle>> masks;
};

struct ForwardOptions {
    RunMode mode = RunMode::eval;
    double tau = 0.5;
    Rng* rng = nullptr;  // consumed in train mode (noise / action sampling)
    ForcePolicy force;
    const StProbe* probe = nullptr;
    bool record_logits = false;   // expose controller logit vars for probes
    bool want_input_vars = false; // expose image leaves (attack gradients)
    // parameters in these groups enter the tape as constants (zero grads)
    std::array<bool, 5> frozen_groups{};

    bool frozen(ParamGroup g) const { return frozen_groups[static_cast<int>(g)]; }
    void freeze(ParamGroup g) { frozen_groups[static_cast<int>(g)] = true; }
};

// One actor/critic decision group (one block dimension of one block).
struct A2cGroup {
    int block = 0;
    char dim = 'b';
    int count = 0;       // individual binary decisions in the group
    VarId log_prob = kNoVar;
    VarId entropy = kNoVar;
    VarId value = kNoVar;
    double value_val = 0.0;
};

struct SampleTrace {
    int64_t sample_id = 0;
    int label = -1;
    int pred = -1;
    std::vector<MaskBundle> blocks;
    FlopsReport flops;
    bool correct() const { return pred >= 0 && pred == label; }
};

struct ControllerLogitVars {
    VarId block = kNoVar;
    VarId heads = kNoVar;
    VarId tokens = kNoVar;
};

struct ForwardResult {
    VarId logits = kNoVar;  // (batch x num_classes)
    std::vector<SampleTrace> traces;
    std::vector<std::vector<A2cGroup>> a2c;                  // [sample]
    std::vector<std::vector<ControllerLogitVars>> logit_vars;  // [sample][block]
    std::vector<VarId> input_vars;                           // [sample] when requested
    std::vector<VarId> embed_rows;  // [sample] token rows entering block 0
    std::vector<VarId> final_rows;  // [sample] token rows after the last block

    int argmax_row(const Graph& g, int row) const {
        const Tensor& z = g.val(logits);
        int best = 0;
        for (int j = 1; j < z.cols(); ++j)
            if (z.at(row, j) > z.at(row, best)) best = j;
        return best;
    }
};

struct BlockIds {
    int ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    int ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

struct CtrlIds {
    int conv1_w, conv1_b, conv2_w, conv2_b;
    int fc_b_w, fc_b_b;
    int fc_h1_w, fc_h1_b, fc_h2_w, fc_h2_b;
    int mlp1_w, mlp1_b, mlp2_w, mlp2_b, fc_n_w, fc_n_b;
    // stage-3 heads (-1 until installed)
    int actor_b_w = -1, actor_b_b = -1, critic_b_w = -1, critic_b_b = -1;
    int actor_h_w = -1, actor_h_b = -1, critic_h_w = -1, critic_h_b = -1;
    int actor_n_w = -1, actor_n_b = -1, critic_n_w = -1, critic_n_b = -1;
};

// The full dynamic model: backbone blocks plus one controller per block.
class Model {
public:
    MIAConfig cfg;
    ParamStore params;
    int patch_w = -1, patch_b = -1, pos_embed = -1, cls_token = -1;
    int head_w = -1, head_b = -1;
    std::vector<BlockIds> blocks;
    std::vector<CtrlIds> ctrl;
    bool rl_heads = false;

    static Model init(const MIAConfig& cfg, uint64_t seed);

    // Replaces each decision FC with fresh actor+critic pairs.
    void install_rl_heads(Rng& rng);

    ForwardResult forward(Graph& g, const Batch& batch, const ForwardOptions& opt);

    // Pure-forward convenience: eval-mode logits + traces, no gradients.
    std::vector<SampleTrace> evaluate(const Batch& batch, std::vector<int>* preds = nullptr);
};

// Binary concrete relaxation of one bank of keep/skip decisions.
// Train mode adds logistic noise: soft = sigmoid((logit + g)/tau); the hard
// value is the thresholded soft with straight-through gradients. Eval mode
// is noise-free with soft = sigmoid(logit). Ties (soft == 0.5) keep.
struct GumbelResult {
    VarId mask = kNoVar;       // hard forward values, soft gradients
    VarId soft_node = kNoVar;  // the relaxation itself
    std::vector<uint8_t> hard;
    std::vector<double> soft;
};
GumbelResult gumbel_binary(Graph& g, VarId logits, double tau, RunMode mode, Rng* rng,
                           const double* probe_delta_onehot = nullptr);

}  // namespace mia
