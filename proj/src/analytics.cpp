#include "mia/analytics.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mia/checkpoint.hpp"
#include "mia/training.hpp"

namespace fs = std::filesystem;

namespace mia {

std::vector<SkipRatioRow> skip_ratio_stats(const std::vector<SampleTrace>& traces,
                                           const MIAConfig& cfg) {
    if (traces.empty()) throw AnalyticsError("skip_ratio_stats: no traces");
    std::vector<SkipRatioRow> rows(cfg.num_blocks);
    for (int l = 0; l < cfg.num_blocks; ++l) rows[l].block = l;
    for (const auto& t : traces) {
        if (static_cast<int>(t.blocks.size()) != cfg.num_blocks)
            throw AnalyticsError("skip_ratio_stats: trace does not cover all blocks");
        for (int l = 0; l < cfg.num_blocks; ++l) {
            const MaskBundle& b = t.blocks[l];
            SkipRatioRow& r = rows[l];
            ++r.total_count;
            if (b.skipped) {
                r.block_skip += 1.0;
                continue;
            }
            ++r.executed_count;
            r.head_skip +=
                1.0 - static_cast<double>(b.heads_kept()) / static_cast<double>(cfg.num_heads);
            r.token_skip +=
                1.0 - static_cast<double>(b.tokens_kept()) / static_cast<double>(cfg.num_tokens);
        }
    }
    for (auto& r : rows) {
        r.block_skip /= r.total_count;
        if (r.executed_count > 0) {
            r.head_skip /= r.executed_count;
            r.token_skip /= r.executed_count;
        }
    }
    return rows;
}

std::string skip_ratio_csv(const std::vector<SkipRatioRow>& rows) {
    std::string out = "block,block_skip,head_skip,token_skip,executed_count,total_count\n";
    char buf[192];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%d,%d\n", r.block, r.block_skip,
                      r.head_skip, r.token_skip, r.executed_count, r.total_count);
        out += buf;
    }
    return out;
}

std::string policy_grid_svg(const SampleTrace& trace, const MIAConfig& cfg) {
    const int cell = 80, gap = 12, pad = 10;
    int L = cfg.num_blocks;
    int width = pad * 2 + L * cell + (L - 1) * gap;
    int height = pad * 2 + cell;
    std::string s;
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" "
                  "viewBox=\"0 0 %d %d\">\n",
                  width, height, width, height);
    s += buf;
    for (int l = 0; l < L; ++l) {
        const MaskBundle& b = trace.blocks[l];
        int x = pad + l * (cell + gap);
        int y = pad;
        if (b.skipped) {
            std::snprintf(buf, sizeof(buf),
                          "  <rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" "
                          "stroke=\"#444444\" stroke-width=\"2\" stroke-dasharray=\"6,4\"/>\n",
                          x, y, cell, cell);
            s += buf;
            continue;
        }
        std::snprintf(buf, sizeof(buf),
                      "  <rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"none\" "
                      "stroke=\"#444444\" stroke-width=\"2\"/>\n",
                      x, y, cell, cell);
        s += buf;
        double w = cell * static_cast<double>(b.tokens_kept()) / cfg.num_tokens;
        double h = cell * static_cast<double>(b.heads_kept()) / cfg.num_heads;
        // anchored bottom-left so shrinking reads as "less executed"
        std::snprintf(buf, sizeof(buf),
                      "  <rect x=\"%d\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" "
                      "fill=\"#4477cc\" fill-opacity=\"0.85\"/>\n",
                      x, y + (cell - h), w, h);
        s += buf;
    }
    s += "</svg>\n";
    return s;
}

void export_policy_grid(const SampleTrace& trace, const MIAConfig& cfg, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw AnalyticsError("policy grid path not writable: " + path);
    f << policy_grid_svg(trace, cfg);
}

std::string trace_csv(const std::vector<SampleTrace>& traces) {
    std::string out = "sample_id,block,d_block,heads_kept,tokens_kept,skipped,correct\n";
    char buf[160];
    for (const auto& t : traces)
        for (size_t l = 0; l < t.blocks.size(); ++l) {
            const MaskBundle& b = t.blocks[l];
            std::snprintf(buf, sizeof(buf), "%lld,%zu,%d,%d,%d,%d,%d\n",
                          static_cast<long long>(t.sample_id), l, b.d_block, b.heads_kept(),
                          b.tokens_kept(), b.skipped ? 1 : 0, t.correct() ? 1 : 0);
            out += buf;
        }
    return out;
}

namespace {
std::string rle_encode(const std::vector<uint8_t>& bits) {
    std::string out;
    size_t i = 0;
    while (i < bits.size()) {
        size_t j = i;
        while (j < bits.size() && bits[j] == bits[i]) ++j;
        if (!out.empty()) out += ' ';
        out += std::to_string(static_cast<int>(bits[i])) + "x" + std::to_string(j - i);
        i = j;
    }
    return out;
}
}  // namespace

std::string trace_rle_sidecar(const std::vector<SampleTrace>& traces) {
    std::string out = "sample_id,block,dim,rle\n";
    for (const auto& t : traces)
        for (size_t l = 0; l < t.blocks.size(); ++l) {
            const MaskBundle& b = t.blocks[l];
            out += std::to_string(t.sample_id) + "," + std::to_string(l) + ",head," +
                   rle_encode(b.d_heads) + "\n";
            out += std::to_string(t.sample_id) + "," + std::to_string(l) + ",token," +
                   rle_encode(b.d_tokens) + "\n";
        }
    return out;
}

std::vector<AblationRow> ablation_harness(const MIAConfig& cfg_in, const DatasetHandle& data,
                                          const std::string& out_dir, const AblationOptions& opt) {
    fs::create_directories(out_dir);
    // shared prerequisites: dense backbone, then the stage-1 controller
    MIAConfig base = cfg_in;
    base.dims = ActiveDims{true, true, true};
    Model shared = Model::init(base, base.seed);
    CheckpointMeta meta;
    Rng rng(mix_seed(base.seed, 0xab1a7e00ULL));
    std::string shared_dir = (fs::path(out_dir) / "shared").string();
    train_dense(shared, meta, data, shared_dir, base.train.dense_epochs, rng);
    meta.completed.push_back("dense");
    meta.stage = "dense";
    run_stage1(shared, meta, data, shared_dir, rng);
    meta.stage = "stage1";
    save_checkpoint(shared, meta, (fs::path(shared_dir) / "ckpt_stage1").string());

    const bool flags[8][3] = {{false, false, false}, {true, false, false}, {false, true, false},
                              {false, false, true},  {true, true, false},  {true, false, true},
                              {false, true, true},   {true, true, true}};
    std::vector<AblationRow> rows;
    for (int c = 0; c < 8; ++c) {
        AblationRow row;
        row.dims.head = flags[c][0];
        row.dims.depth = flags[c][1];
        row.dims.token = flags[c][2];
        try {
            auto loaded = load_checkpoint((fs::path(shared_dir) / "ckpt_stage1").string());
            Model cell = std::move(loaded.model);
            CheckpointMeta cmeta = loaded.meta;
            cell.cfg.dims = row.dims;
            std::string cell_dir =
                (fs::path(out_dir) / ("cell_" + std::to_string(c))).string();
            Rng crng(mix_seed(base.seed, 0xce110000ULL + c));
            run_stage2(cell, cmeta, data, cell_dir, opt.stage2_epochs, crng);
            std::vector<int> idx(data.val_idx.begin(),
                                 data.val_idx.begin() +
                                     std::min<size_t>(data.val_idx.size(), opt.eval_cap));
            std::vector<SampleTrace> traces;
            auto ev = evaluate_model(cell, data, idx, cell.cfg.train.batch_size, &traces);
            row.accuracy = ev.accuracy;
            row.exec_ratio = ev.exec_ratio_mean;
            if (opt.write_cell_artifacts) {
                std::ofstream tf(fs::path(cell_dir) / "traces.csv");
                tf << trace_csv(traces);
                cmeta.stage = "stage2";
                save_checkpoint(cell, cmeta, (fs::path(cell_dir) / "ckpt").string());
            }
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        rows.push_back(row);
    }
    std::ofstream rf(fs::path(out_dir) / "ablation.csv");
    rf << ablation_csv(rows);
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "head,depth,token,accuracy,exec_ratio,error\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.10g,%.10g,%s\n", r.dims.head ? 1 : 0,
                      r.dims.depth ? 1 : 0, r.dims.token ? 1 : 0, r.accuracy, r.exec_ratio,
                      r.failed ? r.error.c_str() : "");
        out += buf;
    }
    return out;
}

}  // namespace mia
