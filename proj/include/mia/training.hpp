#pragma once

#include <string>
#include <vector>

#include "mia/checkpoint.hpp"
#include "mia/dataset.hpp"
#include "mia/model.hpp"

namespace mia {

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& m) : std::runtime_error(m) {}
};

// ---- losses & rules ---------------------------------------------------

// Soft controller-pretraining loss for one sample:
//   sum_l [(1 - G_b) + mean_h(1 - G_h) + mean_n(1 - G_n)]
VarId pretrain_loss_soft(Graph& g, const std::vector<MaskBundle>& blocks);

// Same expression on hard masks (stage-1 termination criterion).
double pretrain_loss_hard(const std::vector<MaskBundle>& blocks);

// Signed cost weight: magnitude alpha_magnitude * task/cost, sign of
// (exec_ratio - target_ratio), zero at equality. Losses enter as constants.
double dynamic_alpha(double task_loss, double cost_loss, double exec_ratio, double target_ratio,
                     const MIAConfig& cfg);

struct RewardRecord {
    int y = 0;
    double exec_ratio = 1.0;
    double target_ratio = 1.0;
    double beta = 0.5;
    double reward = 0.0;
};
RewardRecord compute_reward(int y, double exec_ratio, double target_ratio, double beta);

struct A2cLosses {
    VarId policy = kNoVar;
    VarId value = kNoVar;
    VarId entropy_bonus = kNoVar;
};
// Single-step episodes: each decision group shares the sample's terminal
// reward; the critic value baselines the group's advantage.
A2cLosses a2c_losses(Graph& g, const std::vector<A2cGroup>& groups, double reward,
                     double entropy_coeff);

// ---- optimizer ---------------------------------------------------------

struct GroupLrs {
    double lr[5] = {0, 0, 0, 0, 0};  // indexed by ParamGroup
    double weight_decay = 0.0;       // decoupled, applied to ".w" tensors

    void set(ParamGroup g, double v) { lr[static_cast<int>(g)] = v; }
    double get(ParamGroup g) const { return lr[static_cast<int>(g)]; }
};

// Adam with optional decoupled weight decay. Groups with lr 0 are skipped.
class AdamW {
public:
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;

    // returns pre-clip global grad norm over trainable params
    double step(ParamStore& params, const GroupLrs& lrs, double grad_clip);
};

// ---- stage runners ------------------------------------------------------

struct MetricsPaths {
    std::string epoch_csv;    // metrics.csv
    std::string steps_csv;    // steps.csv
    std::string rewards_csv;  // rewards.csv (stage 3)
};
MetricsPaths metrics_paths(const std::string& out_dir);

struct StageReport {
    int epochs_run = 0;
    double final_exec_ratio = 1.0;
    double final_clean_acc = 0.0;
    double final_task_loss = 0.0;
};

// Plain backbone training (every dynamic dimension disabled). Doubles as
// the dense baseline for budget comparisons.
StageReport train_dense(Model& model, CheckpointMeta& meta, const DatasetHandle& data,
                        const std::string& out_dir, int epochs, Rng& rng);

// Stage 1: controller pretraining with the backbone frozen, until the hard
// pretrain loss over a probe set reaches zero.
StageReport run_stage1(Model& model, CheckpointMeta& meta, const DatasetHandle& data,
                       const std::string& out_dir, Rng& rng);

// Stage 2: joint co-training under the dynamically signed cost weight.
StageReport run_stage2(Model& model, CheckpointMeta& meta, const DatasetHandle& data,
                       const std::string& out_dir, int epochs, Rng& rng);

// Builds the stage-3 controller from a stage-2 model: backbone verbatim,
// decision FCs replaced by fresh actor/critic pairs, and a seeded random
// subset of remaining controller tensors totaling (1 - rho) of their
// parameter count reinitialized.
Model inherit_weights(const Model& pretrained, double rho, uint64_t seed);

// Stage 3: hybrid supervised + advantage-actor-critic finetuning; the
// first `frozen_epochs` train only the actor/critic heads.
StageReport run_stage3(Model& model, CheckpointMeta& meta, const DatasetHandle& data,
                       const std::string& out_dir, Rng& rng);

// ---- evaluation ---------------------------------------------------------

struct EvalSummary {
    double accuracy = 0.0;
    double exec_ratio_mean = 1.0;
    double exec_ratio_std = 0.0;
    double exec_ratio_excl_ctrl = 1.0;
    int n = 0;
};
EvalSummary evaluate_model(Model& model, const DatasetHandle& data, const std::vector<int>& idx,
                           int batch_size, std::vector<SampleTrace>* traces_out = nullptr);

}  // namespace mia
