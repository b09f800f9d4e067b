#include "mia/cost_model.hpp"

#include <cstdio>
#include <stdexcept>

namespace mia {

CtrlSpatial controller_spatial(const MIAConfig& cfg) {
    CtrlSpatial s;
    s.conv1_h = cfg.grid_h;
    s.conv1_w = cfg.grid_w;
    s.conv2_h = cfg.grid_h > 1 ? cfg.grid_h / 2 : 1;
    s.conv2_w = cfg.grid_w > 1 ? cfg.grid_w / 2 : 1;
    return s;
}

BlockFlops block_flops(int h_active, int n_active, const MIAConfig& cfg) {
    if (h_active < 0 || h_active > cfg.num_heads)
        throw std::out_of_range("block_flops: h_active out of range");
    if (n_active < 0 || n_active > cfg.num_tokens)
        throw std::out_of_range("block_flops: n_active out of range");
    double h = h_active;
    double n = n_active + (cfg.use_class_token ? 1 : 0);
    double e = cfg.head_dim;
    double he = h * e;
    BlockFlops f;
    // qkv projections (3) + output projection (1): 2*n*(hE)^2 each;
    // attention scores + weighted sum: 2 * 2*h*n^2*E
    f.msa = 8.0 * n * he * he + 4.0 * h * n * n * e;
    // two MLP gemms n x (hE) x (r*hE)
    f.mlp = 4.0 * n * he * (cfg.mlp_ratio * he);
    return f;
}

namespace {

struct CtrlBranchFlops {
    double trunk = 0.0;   // conv1 + conv2 (runs when depth or head gating is on)
    double gate_b = 0.0;  // FC_b
    double head = 0.0;    // FC_h1 + FC_h2
    double token = 0.0;   // MLP_n + FC_n
};

CtrlBranchFlops controller_branch_flops(const MIAConfig& cfg) {
    CtrlSpatial s = controller_spatial(cfg);
    double c = cfg.embed_dim;
    double cp = static_cast<double>(cfg.num_heads) * cfg.controller_hidden;  // H*E'
    double n = cfg.num_tokens;
    CtrlBranchFlops f;
    f.trunk = 2.0 * (s.conv1_h * s.conv1_w) * (9.0 * c) * cp +
              2.0 * (s.conv2_h * s.conv2_w) * (9.0 * cp) * cp;
    f.gate_b = 2.0 * cp;
    f.head = 2.0 * cp * (cfg.num_heads * cfg.head_feature_dim) +
             2.0 * cfg.num_heads * cfg.head_feature_dim;
    f.token = 2.0 * n * c * cp + 2.0 * n * cp * cp + 2.0 * n * cp;
    return f;
}

}  // namespace

double controller_flops(const MIAConfig& cfg, bool skipped_block, const ActiveDims& dims) {
    CtrlBranchFlops f = controller_branch_flops(cfg);
    double flops = 0.0;
    if (dims.depth || dims.head) flops += f.trunk;
    if (dims.depth) flops += f.gate_b;
    if (!skipped_block) {
        if (dims.head) flops += f.head;
        if (dims.token) flops += f.token;
    }
    return flops;
}

double controller_flops(const MIAConfig& cfg, bool skipped_block) {
    return controller_flops(cfg, skipped_block, ActiveDims{});
}

double patch_embed_flops(const MIAConfig& cfg) {
    double p2c = static_cast<double>(cfg.patch_size) * cfg.patch_size * cfg.channels;
    return 2.0 * cfg.num_tokens * p2c * cfg.embed_dim;
}

double classifier_flops(const MIAConfig& cfg) {
    return 2.0 * cfg.embed_dim * cfg.num_classes;
}

double total_model_flops(const MIAConfig& cfg, const ActiveDims& dims) {
    BlockFlops bf = block_flops(cfg.num_heads, cfg.num_tokens, cfg);
    double per_block = controller_flops(cfg, false, dims) + bf.msa + bf.mlp;
    return patch_embed_flops(cfg) + classifier_flops(cfg) + cfg.num_blocks * per_block;
}

FlopsReport model_flops(const std::vector<MaskBundle>& blocks, const MIAConfig& cfg,
                        const ActiveDims& dims) {
    if (static_cast<int>(blocks.size()) != cfg.num_blocks)
        throw std::invalid_argument("model_flops: trace does not cover all blocks");
    FlopsReport rep;
    rep.embed = patch_embed_flops(cfg);
    rep.classifier = classifier_flops(cfg);
    rep.executed = rep.embed + rep.classifier;
    BlockFlops dense = block_flops(cfg.num_heads, cfg.num_tokens, cfg);
    double ctrl_dense = controller_flops(cfg, false, dims);
    rep.total = rep.embed + rep.classifier + cfg.num_blocks * (ctrl_dense + dense.msa + dense.mlp);
    rep.controller_total = cfg.num_blocks * ctrl_dense;
    for (int l = 0; l < cfg.num_blocks; ++l) {
        const MaskBundle& b = blocks[l];
        BlockFlopsEntry e;
        e.block = l;
        e.skipped = b.skipped;
        e.controller = controller_flops(cfg, b.skipped, dims);
        if (!b.skipped) {
            BlockFlops bf = block_flops(b.heads_kept(), b.tokens_kept(), cfg);
            e.msa = bf.msa;
            e.mlp = bf.mlp;
        }
        rep.executed += e.msa + e.mlp + e.controller;
        rep.controller_executed += e.controller;
        rep.per_block.push_back(e);
    }
    rep.ratio = rep.executed / rep.total;
    return rep;
}

VarId differentiable_cost(Graph& g, const std::vector<MaskBundle>& blocks, const MIAConfig& cfg,
                          const ActiveDims& dims) {
    if (static_cast<int>(blocks.size()) != cfg.num_blocks)
        throw std::invalid_argument("differentiable_cost: trace does not cover all blocks");
    double e = cfg.head_dim;
    double cls = cfg.use_class_token ? 1.0 : 0.0;
    CtrlBranchFlops cb = controller_branch_flops(cfg);
    double ctrl_base = 0.0;
    if (dims.depth || dims.head) ctrl_base += cb.trunk;
    if (dims.depth) ctrl_base += cb.gate_b;
    double ctrl_branch = (dims.head ? cb.head : 0.0) + (dims.token ? cb.token : 0.0);

    double consts = patch_embed_flops(cfg) + classifier_flops(cfg) + cfg.num_blocks * ctrl_base;
    VarId exec = g.constant(Tensor::scalar(consts));

    for (int l = 0; l < cfg.num_blocks; ++l) {
        const MaskBundle& b = blocks[l];
        VarId mb = b.m_block != kNoVar ? b.m_block : g.constant(Tensor::scalar(b.d_block));
        VarId hsum;
        if (b.m_heads != kNoVar && !b.skipped)
            hsum = g.sum(b.m_heads);
        else
            hsum = g.constant(Tensor::scalar(b.skipped ? cfg.num_heads : b.heads_kept()));
        VarId nsum;
        if (b.m_tokens != kNoVar && !b.skipped)
            nsum = g.sum(b.m_tokens);
        else
            nsum = g.constant(Tensor::scalar(b.skipped ? cfg.num_tokens : b.tokens_kept()));
        VarId n_eff = g.add_scalar(nsum, cls);
        VarId he = g.scale(hsum, e);
        VarId he2 = g.mul(he, he);
        // 8*n*(hE)^2 + 4*E*h*n^2
        VarId msa = g.add(g.scale(g.mul(n_eff, he2), 8.0),
                          g.scale(g.mul(hsum, g.mul(n_eff, n_eff)), 4.0 * e));
        // 4*r*n*(hE)^2
        VarId mlp = g.scale(g.mul(n_eff, he2), 4.0 * cfg.mlp_ratio);
        VarId block_term = g.add(msa, mlp);
        if (ctrl_branch != 0.0) block_term = g.add_scalar(block_term, ctrl_branch);
        exec = g.add(exec, g.mul(mb, block_term));
    }
    return g.div_by(exec, total_model_flops(cfg, dims));
}

std::string flops_report_csv_header() {
    return "sample_id,block,msa,mlp,controller,skipped\n";
}

void append_flops_report_csv(std::string& out, int64_t sample_id, const FlopsReport& rep) {
    char buf[256];
    for (const auto& e : rep.per_block) {
        std::snprintf(buf, sizeof(buf), "%lld,%d,%.0f,%.0f,%.0f,%d\n",
                      static_cast<long long>(sample_id), e.block, e.msa, e.mlp, e.controller,
                      e.skipped ? 1 : 0);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%lld,embed,%.0f,,,\n", static_cast<long long>(sample_id),
                  rep.embed);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%lld,classifier,%.0f,,,\n", static_cast<long long>(sample_id),
                  rep.classifier);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%lld,summary,%.0f,%.0f,%.9f,\n",
                  static_cast<long long>(sample_id), rep.executed, rep.total, rep.ratio);
    out += buf;
}

}  // namespace mia
