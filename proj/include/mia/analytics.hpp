#pragma once

#include <string>
#include <vector>

#include "mia/dataset.hpp"
#include "mia/model.hpp"

namespace mia {

struct AnalyticsError : std::runtime_error {
    explicit AnalyticsError(const std::string& m) : std::runtime_error(m) {}
};

// Per-block skipping frequencies over a trace set. Head/token ratios are
// means over the blocks that actually executed (skipped blocks are excluded
// from those denominators).
struct SkipRatioRow {
    int block = 0;
    double block_skip = 0.0;
    double head_skip = 0.0;
    double token_skip = 0.0;
    int executed_count = 0;  // denominator of the head/token ratios
    int total_count = 0;
};
std::vector<SkipRatioRow> skip_ratio_stats(const std::vector<SampleTrace>& traces,
                                           const MIAConfig& cfg);
std::string skip_ratio_csv(const std::vector<SkipRatioRow>& rows);

// One square per block; the filled rectangle's height tracks kept heads and
// width kept tokens; fully skipped blocks are dashed and unfilled. Output
// bytes are a pure function of (trace, cfg).
std::string policy_grid_svg(const SampleTrace& trace, const MIAConfig& cfg);
void export_policy_grid(const SampleTrace& trace, const MIAConfig& cfg, const std::string& path);

// Trace table: one row per (sample, block), plus a run-length-encoded
// sidecar with the full head/token bitmasks.
std::string trace_csv(const std::vector<SampleTrace>& traces);
std::string trace_rle_sidecar(const std::vector<SampleTrace>& traces);

struct AblationRow {
    ActiveDims dims;
    double accuracy = 0.0;
    double exec_ratio = 1.0;
    bool failed = false;
    std::string error;
};

struct AblationOptions {
    int stage2_epochs = 2;
    int eval_cap = 512;
    bool write_cell_artifacts = true;
};

// Table-shaped dimension ablation: trains/evaluates each of the 8 subsets
// of {head, depth, token} with the other controllers forced all-on. The
// dense backbone and the stage-1 controller checkpoint are shared across
// cells; failures are recorded per cell and the remaining cells continue.
std::vector<AblationRow> ablation_harness(const MIAConfig& cfg, const DatasetHandle& data,
                                          const std::string& out_dir, const AblationOptions& opt);

std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace mia
