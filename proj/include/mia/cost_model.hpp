#pragma once

#include <string>
#include <vector>

#include "mia/autodiff.hpp"
#include "mia/config.hpp"
#include "mia/masks.hpp"

namespace mia {

// FLOPs convention: 2 per multiply-accumulate; only matrix-multiply work is
// counted (projections, attention score/value products, MLPs, convolutions
// via their im2col gemm, the classifier). Softmax, normalization, pooling
// and plain additions are excluded, both here and in the instrumented
// counter, so analytic and measured counts agree exactly.

struct BlockFlops {
    double msa = 0.0;
    double mlp = 0.0;
};

struct BlockFlopsEntry {
    int block = 0;
    double msa = 0.0;
    double mlp = 0.0;
    double controller = 0.0;
    bool skipped = false;
};

struct FlopsReport {
    double executed = 0.0;
    double total = 0.0;
    double ratio = 1.0;
    double embed = 0.0;
    double classifier = 0.0;
    std::vector<BlockFlopsEntry> per_block;
    // controller overhead split out so savings can be reported both with
    // and without it
    double controller_executed = 0.0;
    double controller_total = 0.0;
    double ratio_excl_controller() const {
        double den = total - controller_total;
        return den > 0.0 ? (executed - controller_executed) / den : 1.0;
    }
};

// Controller trunk spatial sizes shared between the forward pass and the
// cost formulas (keeps them consistent by construction).
struct CtrlSpatial {
    int conv1_h = 0, conv1_w = 0;  // conv1 output (== token grid)
    int conv2_h = 0, conv2_w = 0;  // conv2 output (== after first pool)
};
CtrlSpatial controller_spatial(const MIAConfig& cfg);

// h_active in [0, H]; n_active counts spatial tokens only (the class token
// is added internally when enabled).
BlockFlops block_flops(int h_active, int n_active, const MIAConfig& cfg);

double controller_flops(const MIAConfig& cfg, bool skipped_block);
double controller_flops(const MIAConfig& cfg, bool skipped_block, const ActiveDims& dims);

double patch_embed_flops(const MIAConfig& cfg);
double classifier_flops(const MIAConfig& cfg);

// Full-model totals with every mask on.
double total_model_flops(const MIAConfig& cfg, const ActiveDims& dims);

// Executed-vs-total report for one sample's per-block decisions.
FlopsReport model_flops(const std::vector<MaskBundle>& blocks, const MIAConfig& cfg,
                        const ActiveDims& dims);

// Straight-through differentiable FLOPs ratio for one sample: hard mask
// sums with soft gradients, normalized by the all-on total. Equals the
// model_flops ratio exactly when evaluated on hard masks.
VarId differentiable_cost(Graph& g, const std::vector<MaskBundle>& blocks, const MIAConfig& cfg,
                          const ActiveDims& dims);

// CSV export: sample_id,block,msa,mlp,controller,skipped rows plus summary rows.
std::string flops_report_csv_header();
void append_flops_report_csv(std::string& out, int64_t sample_id, const FlopsReport& rep);

}  // namespace mia
