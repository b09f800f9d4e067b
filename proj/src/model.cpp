#include "mia/model.hpp"

#include <cmath>
#include <stdexcept>

namespace mia {

GumbelResult gumbel_binary(Graph& g, VarId logits, double tau, RunMode mode, Rng* rng,
                           const double* probe_delta_onehot) {
    if (tau <= 0.0) throw std::invalid_argument("gumbel_binary: tau must be positive");
    const Tensor& zv = g.val(logits);
    int k = static_cast<int>(zv.numel());
    GumbelResult r;
    r.hard.resize(k);
    r.soft.resize(k);

    Tensor noise({k});
    if (mode == RunMode::train) {
        if (!rng) throw std::invalid_argument("gumbel_binary: train mode requires an rng");
        for (int i = 0; i < k; ++i) noise.v[i] = rng->logistic();
    }
    for (int i = 0; i < k; ++i) {
        double u = zv.v[i] + noise.v[i];
        if (mode == RunMode::train) u /= tau;
        double s = 1.0 / (1.0 + std::exp(-u));
        r.soft[i] = s;
        r.hard[i] = s >= 0.5 ? 1 : 0;
    }

    VarId z = logits;
    if (probe_delta_onehot) {
        Tensor d({k});
        for (int i = 0; i < k; ++i) d.v[i] = probe_delta_onehot[i];
        z = g.add(z, g.constant(std::move(d)));
    }
    VarId u = mode == RunMode::train ? g.scale(g.add(z, g.constant(noise)), 1.0 / tau) : z;
    VarId soft_node = g.sigmoid(u);
    r.soft_node = soft_node;
    if (!probe_delta_onehot) {
        r.mask = g.st_round(soft_node);
    } else {
        // keep the hard decision pinned; only the soft path moves
        Tensor off({k});
        for (int i = 0; i < k; ++i) off.v[i] = static_cast<double>(r.hard[i]) - r.soft[i];
        r.mask = g.add(soft_node, g.constant(std::move(off)));
    }
    return r;
}

namespace {

Tensor image_tensor(const Batch& batch, int s) {
    Tensor t({batch.channels, batch.height, batch.width});
    const double* p = batch.sample(s);
    std::copy(p, p + batch.sample_numel(), t.v.begin());
    return t;
}

std::vector<int> iota_vec(int n, int offset = 0) {
    std::vector<int> v(n);
    for (int i = 0; i < n; ++i) v[i] = offset + i;
    return v;
}

// Bernoulli policy terms for one decision bank: sum of per-decision
// log-probs and entropies as tape nodes.
struct PolicyNodes {
    VarId log_prob, entropy;
};
PolicyNodes bernoulli_policy_nodes(Graph& g, VarId logits, const std::vector<uint8_t>& actions) {
    int k = static_cast<int>(actions.size());
    Tensor a({k}), one_minus_a({k});
    for (int i = 0; i < k; ++i) {
        a.v[i] = actions[i];
        one_minus_a.v[i] = 1.0 - actions[i];
    }
    VarId ca = g.constant(std::move(a));
    VarId cna = g.constant(std::move(one_minus_a));
    VarId sp_pos = g.softplus(logits);                  // -log(1-p)
    VarId sp_neg = g.softplus(g.scale(logits, -1.0));   // -log p
    PolicyNodes out;
    out.log_prob = g.scale(g.sum(g.add(g.mul(ca, sp_neg), g.mul(cna, sp_pos))), -1.0);
    VarId p = g.sigmoid(logits);
    VarId q = g.add_scalar(g.scale(p, -1.0), 1.0);  // 1-p
    out.entropy = g.sum(g.add(g.mul(p, sp_neg), g.mul(q, sp_pos)));
    return out;
}

}  // namespace

Model Model::init(const MIAConfig& cfg_in, uint64_t seed) {
    if (!cfg_in.validated) throw std::invalid_argument("Model::init: config not validated");
    Model m;
    m.cfg = cfg_in;
    Rng rng(mix_seed(seed, 0xa11c0defULL));
    const MIAConfig& c = m.cfg;
    int C = c.embed_dim, Ch = c.mlp_hidden;
    int Cp = c.num_heads * c.controller_hidden;  // H*E'
    int Fh = c.num_heads * c.head_feature_dim;   // H*E''
    auto nrm = [&](std::vector<int> shape) { return normal_init(std::move(shape), 0.02, rng); };
    auto zeros = [](std::vector<int> shape) { return Tensor(std::move(shape)); };
    auto ones = [](std::vector<int> shape) { return Tensor::full(std::move(shape), 1.0); };
    auto& P = m.params;
    const auto BB = ParamGroup::backbone;
    const auto CT = ParamGroup::ctrl_trunk;
    const auto CG = ParamGroup::ctrl_gate;

    m.patch_w = P.add("embed.patch.w", BB, nrm({C, c.channels * c.patch_size * c.patch_size}));
    m.patch_b = P.add("embed.patch.b", BB, zeros({1, C}));
    m.pos_embed = P.add("embed.pos", BB, nrm({c.seq_len(), C}));
    if (c.use_class_token) m.cls_token = P.add("embed.cls", BB, nrm({1, C}));

    for (int l = 0; l < c.num_blocks; ++l) {
        std::string p = "backbone.b" + std::to_string(l) + ".";
        BlockIds b;
        b.ln1_g = P.add(p + "ln1.g", BB, ones({1, C}));
        b.ln1_b = P.add(p + "ln1.b", BB, zeros({1, C}));
        b.qkv_w = P.add(p + "qkv.w", BB, nrm({C, 3 * C}));
        b.qkv_b = P.add(p + "qkv.b", BB, zeros({1, 3 * C}));
        b.proj_w = P.add(p + "proj.w", BB, nrm({C, C}));
        b.proj_b = P.add(p + "proj.b", BB, zeros({1, C}));
        b.ln2_g = P.add(p + "ln2.g", BB, ones({1, C}));
        b.ln2_b = P.add(p + "ln2.b", BB, zeros({1, C}));
        b.fc1_w = P.add(p + "fc1.w", BB, nrm({C, Ch}));
        b.fc1_b = P.add(p + "fc1.b", BB, zeros({1, Ch}));
        b.fc2_w = P.add(p + "fc2.w", BB, nrm({Ch, C}));
        b.fc2_b = P.add(p + "fc2.b", BB, zeros({1, C}));
        m.blocks.push_back(b);
    }
    m.head_w = P.add("head.w", BB, nrm({C, c.num_classes}));
    m.head_b = P.add("head.b", BB, zeros({1, c.num_classes}));

    for (int l = 0; l < c.num_blocks; ++l) {
        std::string p = "ctrl.b" + std::to_string(l) + ".";
        CtrlIds t;
        t.conv1_w = P.add(p + "conv1.w", CT, nrm({Cp, C * 9}));
        t.conv1_b = P.add(p + "conv1.b", CT, zeros({1, Cp}));
        t.conv2_w = P.add(p + "conv2.w", CT, nrm({Cp, Cp * 9}));
        t.conv2_b = P.add(p + "conv2.b", CT, zeros({1, Cp}));
        t.fc_b_w = P.add(p + "fc_b.w", CG, nrm({Cp, 1}));
        t.fc_b_b = P.add(p + "fc_b.b", CG, zeros({1, 1}));
        t.fc_h1_w = P.add(p + "fc_h1.w", CT, nrm({Cp, Fh}));
        t.fc_h1_b = P.add(p + "fc_h1.b", CT, zeros({1, Fh}));
        t.fc_h2_w = P.add(p + "fc_h2.w", CG, nrm({c.head_feature_dim, 1}));
        t.fc_h2_b = P.add(p + "fc_h2.b", CG, zeros({1, 1}));
        t.mlp1_w = P.add(p + "mlp_n1.w", CT, nrm({C, Cp}));
        t.mlp1_b = P.add(p + "mlp_n1.b", CT, zeros({1, Cp}));
        t.mlp2_w = P.add(p + "mlp_n2.w", CT, nrm({Cp, Cp}));
        t.mlp2_b = P.add(p + "mlp_n2.b", CT, zeros({1, Cp}));
        t.fc_n_w = P.add(p + "fc_n.w", CG, nrm({Cp, 1}));
        t.fc_n_b = P.add(p + "fc_n.b", CG, zeros({1, 1}));
        m.ctrl.push_back(t);
    }
    return m;
}

void Model::install_rl_heads(Rng& rng) {
    if (rl_heads) return;
    int Cp = cfg.num_heads * cfg.controller_hidden;
    auto nrm = [&](std::vector<int> shape) { return normal_init(std::move(shape), 0.02, rng); };
    auto zeros = [](std::vector<int> shape) { return Tensor(std::move(shape)); };
    for (int l = 0; l < cfg.num_blocks; ++l) {
        std::string p = "ctrl.b" + std::to_string(l) + ".";
        CtrlIds& t = ctrl[l];
        t.actor_b_w = params.add(p + "actor_b.w", ParamGroup::actor, nrm({Cp, 1}));
        t.actor_b_b = params.add(p + "actor_b.b", ParamGroup::actor, zeros({1, 1}));
        t.critic_b_w = params.add(p + "critic_b.w", ParamGroup::critic, nrm({Cp, 1}));
        t.critic_b_b = params.add(p + "critic_b.b", ParamGroup::critic, zeros({1, 1}));
        t.actor_h_w = params.add(p + "actor_h.w", ParamGroup::actor, nrm({cfg.head_feature_dim, 1}));
        t.actor_h_b = params.add(p + "actor_h.b", ParamGroup::actor, zeros({1, 1}));
        t.critic_h_w = params.add(p + "critic_h.w", ParamGroup::critic, nrm({cfg.head_feature_dim, 1}));
        t.critic_h_b = params.add(p + "critic_h.b", ParamGroup::critic, zeros({1, 1}));
        t.actor_n_w = params.add(p + "actor_n.w", ParamGroup::actor, nrm({Cp, 1}));
        t.actor_n_b = params.add(p + "actor_n.b", ParamGroup::actor, zeros({1, 1}));
        t.critic_n_w = params.add(p + "critic_n.w", ParamGroup::critic, nrm({Cp, 1}));
        t.critic_n_b = params.add(p + "critic_n.b", ParamGroup::critic, zeros({1, 1}));
    }
    rl_heads = true;
}

namespace {

struct FwdCtx {
    Model* model;
    Graph* g;
    const ForwardOptions* opt;
    std::vector<Rng> sample_rngs;
    std::vector<VarId> param_nodes;  // one tape node per parameter per step

    VarId pvar(int id) {
        if (param_nodes.empty()) param_nodes.assign(model->params.items.size(), kNoVar);
        if (param_nodes[id] != kNoVar) return param_nodes[id];
        ParamTensor& p = model->params.at(id);
        VarId v = opt->frozen(p.group) ? g->constant(p.value) : g->param(p.value, &p.grad);
        param_nodes[id] = v;
        return v;
    }
};

struct CtrlStepOut {
    MaskBundle bundle;
    std::vector<A2cGroup> groups;
    ControllerLogitVars logits;
};

// Decide one block's masks. Executes only the branches the decision path
// requires: trunk when depth/head gating is on, the head/token branches
// only when the block is kept.
CtrlStepOut controller_step(FwdCtx& cx, int l, VarId x, int sample_idx,
                            const MaskBundle* forced) {
    Graph& g = *cx.g;
    Model& M = *cx.model;
    const MIAConfig& c = M.cfg;
    const ForwardOptions& opt = *cx.opt;
    const ActiveDims& dims = c.dims;
    const CtrlIds& t = M.ctrl[l];
    const bool train = opt.mode == RunMode::train;
    const bool rl = M.rl_heads && !forced;
    Rng* rng = cx.sample_rngs.empty() ? nullptr : &cx.sample_rngs[sample_idx];

    CtrlStepOut out;
    MaskBundle& b = out.bundle;
    b.d_heads.assign(c.num_heads, 1);
    b.g_heads.assign(c.num_heads, 1.0);
    b.d_tokens.assign(c.num_tokens, 1);
    b.g_tokens.assign(c.num_tokens, 1.0);
    b.m_block = g.constant(Tensor::scalar(1.0));
    b.m_heads = g.constant(Tensor::full({c.num_heads}, 1.0));
    b.m_tokens = g.constant(Tensor::full({c.num_tokens}, 1.0));
    b.s_block = b.m_block;
    b.s_heads = b.m_heads;
    b.s_tokens = b.m_tokens;
    if (dims.none()) return out;

    auto probe_vec = [&](char dim, int k) -> std::vector<double> {
        if (!opt.probe || opt.probe->sample != sample_idx || opt.probe->block != l ||
            opt.probe->dim != dim)
            return {};
        std::vector<double> d(k, 0.0);
        d[opt.probe->index] = opt.probe->delta;
        return d;
    };

    // trunk: two 3x3 convs with 2x2 average pooling, then global pooling
    VarId f_b = kNoVar;
    if (dims.depth || dims.head) {
        VarId spatial = g.gather_rows(x, iota_vec(c.num_tokens));
        VarId chw = g.rows_to_chw(spatial, c.grid_h, c.grid_w);
        VarId c1 = g.avgpool2(g.gelu(
            g.conv2d(chw, cx.pvar(t.conv1_w), cx.pvar(t.conv1_b), 3, 3, 1, 1)));
        VarId c2 = g.avgpool2(g.gelu(
            g.conv2d(c1, cx.pvar(t.conv2_w), cx.pvar(t.conv2_b), 3, 3, 1, 1)));
        f_b = g.global_avgpool(c2);  // (1 x H*E')
    }

    // block decision
    if (dims.depth) {
        VarId zb;
        if (rl)
            zb = g.reshape(g.linear(f_b, cx.pvar(t.actor_b_w), cx.pvar(t.actor_b_b)), {1});
        else
            zb = g.reshape(g.linear(f_b, cx.pvar(t.fc_b_w), cx.pvar(t.fc_b_b)), {1});
        out.logits.block = zb;
        if (forced) {
            b.d_block = forced->d_block;
            b.g_block = forced->d_block;
            b.m_block = g.constant(Tensor::scalar(b.d_block));
            b.s_block = b.m_block;
        } else if (rl) {
            double p = 1.0 / (1.0 + std::exp(-g.val(zb).v[0]));
            b.g_block = p;
            b.s_block = g.constant(Tensor::scalar(p));
            if (train) {
                b.d_block = rng->uniform() < p ? 1 : 0;
                b.m_block = g.constant(Tensor::scalar(b.d_block));
                A2cGroup grp;
                grp.block = l;
                grp.dim = 'b';
                grp.count = 1;
                auto pn = bernoulli_policy_nodes(g, zb, {static_cast<uint8_t>(b.d_block)});
                grp.log_prob = pn.log_prob;
                grp.entropy = pn.entropy;
                grp.value = g.reshape(
                    g.linear(f_b, cx.pvar(t.critic_b_w), cx.pvar(t.critic_b_b)), {1});
                grp.value_val = g.val(grp.value).v[0];
                out.groups.push_back(grp);
            } else {
                b.d_block = p >= 0.5 ? 1 : 0;
                b.m_block = g.st_round(g.sigmoid(zb));
            }
        } else {
            auto pv = probe_vec('b', 1);
            GumbelResult gr = gumbel_binary(g, zb, opt.tau, opt.mode, rng,
                                            pv.empty() ? nullptr : pv.data());
            b.d_block = gr.hard[0];
            b.g_block = gr.soft[0];
            b.m_block = gr.mask;
            b.s_block = gr.soft_node;
        }
        b.skipped = b.d_block == 0;
    }
    if (b.skipped) return out;  // head/token branches not evaluated

    // head decisions
    if (dims.head) {
        VarId fh = g.gelu(g.reshape(
            g.linear(f_b, cx.pvar(t.fc_h1_w), cx.pvar(t.fc_h1_b)),
            {c.num_heads, c.head_feature_dim}));
        VarId zh;
        if (rl)
            zh = g.reshape(g.linear(fh, cx.pvar(t.actor_h_w), cx.pvar(t.actor_h_b)),
                           {c.num_heads});
        else
            zh = g.reshape(g.linear(fh, cx.pvar(t.fc_h2_w), cx.pvar(t.fc_h2_b)), {c.num_heads});
        out.logits.heads = zh;
        if (forced) {
            b.d_heads = forced->d_heads;
            Tensor hm({c.num_heads});
            for (int i = 0; i < c.num_heads; ++i) {
                hm.v[i] = b.d_heads[i];
                b.g_heads[i] = b.d_heads[i];
            }
            b.m_heads = g.constant(std::move(hm));
            b.s_heads = b.m_heads;
        } else if (rl) {
            const Tensor& zv = g.val(zh);
            Tensor hm({c.num_heads});
            for (int i = 0; i < c.num_heads; ++i) {
                double p = 1.0 / (1.0 + std::exp(-zv.v[i]));
                b.g_heads[i] = p;
                b.d_heads[i] = train ? (rng->uniform() < p ? 1 : 0) : (p >= 0.5 ? 1 : 0);
                hm.v[i] = b.d_heads[i];
            }
            {
                Tensor sh({c.num_heads});
                for (int i = 0; i < c.num_heads; ++i) sh.v[i] = b.g_heads[i];
                b.s_heads = g.constant(std::move(sh));
            }
            if (train) {
                b.m_heads = g.constant(std::move(hm));
                A2cGroup grp;
                grp.block = l;
                grp.dim = 'h';
                grp.count = c.num_heads;
                auto pn = bernoulli_policy_nodes(g, zh, b.d_heads);
                grp.log_prob = pn.log_prob;
                grp.entropy = pn.entropy;
                grp.value = g.mean(
                    g.linear(fh, cx.pvar(t.critic_h_w), cx.pvar(t.critic_h_b)));
                grp.value_val = g.val(grp.value).v[0];
                out.groups.push_back(grp);
            } else {
                b.m_heads = g.st_round(g.sigmoid(zh));
            }
        } else {
            auto pv = probe_vec('h', c.num_heads);
            GumbelResult gr = gumbel_binary(g, zh, opt.tau, opt.mode, rng,
                                            pv.empty() ? nullptr : pv.data());
            b.d_heads = gr.hard;
            b.g_heads = gr.soft;
            b.m_heads = gr.mask;
            b.s_heads = gr.soft_node;
        }
    }

    // token decisions (class token exempt; spatial tokens only)
    if (dims.token) {
        VarId xt = g.gather_rows(x, iota_vec(c.num_tokens));
        VarId fn = g.linear(g.gelu(g.linear(xt, cx.pvar(t.mlp1_w), cx.pvar(t.mlp1_b))),
                            cx.pvar(t.mlp2_w), cx.pvar(t.mlp2_b));
        VarId zn;
        if (rl)
            zn = g.reshape(g.linear(fn, cx.pvar(t.actor_n_w), cx.pvar(t.actor_n_b)),
                           {c.num_tokens});
        else
            zn = g.reshape(g.linear(fn, cx.pvar(t.fc_n_w), cx.pvar(t.fc_n_b)), {c.num_tokens});
        out.logits.tokens = zn;
        if (forced) {
            b.d_tokens = forced->d_tokens;
            Tensor tm({c.num_tokens});
            for (int i = 0; i < c.num_tokens; ++i) {
                tm.v[i] = b.d_tokens[i];
                b.g_tokens[i] = b.d_tokens[i];
            }
            b.m_tokens = g.constant(std::move(tm));
            b.s_tokens = b.m_tokens;
        } else if (rl) {
            const Tensor& zv = g.val(zn);
            Tensor tm({c.num_tokens});
            for (int i = 0; i < c.num_tokens; ++i) {
                double p = 1.0 / (1.0 + std::exp(-zv.v[i]));
                b.g_tokens[i] = p;
                b.d_tokens[i] = train ? (rng->uniform() < p ? 1 : 0) : (p >= 0.5 ? 1 : 0);
                tm.v[i] = b.d_tokens[i];
            }
            {
                Tensor sn({c.num_tokens});
                for (int i = 0; i < c.num_tokens; ++i) sn.v[i] = b.g_tokens[i];
                b.s_tokens = g.constant(std::move(sn));
            }
            if (train) {
                b.m_tokens = g.constant(std::move(tm));
                A2cGroup grp;
                grp.block = l;
                grp.dim = 'n';
                grp.count = c.num_tokens;
                auto pn = bernoulli_policy_nodes(g, zn, b.d_tokens);
                grp.log_prob = pn.log_prob;
                grp.entropy = pn.entropy;
                grp.value = g.mean(
                    g.linear(fn, cx.pvar(t.critic_n_w), cx.pvar(t.critic_n_b)));
                grp.value_val = g.val(grp.value).v[0];
                out.groups.push_back(grp);
            } else {
                b.m_tokens = g.st_round(g.sigmoid(zn));
            }
        } else {
            auto pv = probe_vec('n', c.num_tokens);
            GumbelResult gr = gumbel_binary(g, zn, opt.tau, opt.mode, rng,
                                            pv.empty() ? nullptr : pv.data());
            b.d_tokens = gr.hard;
            b.g_tokens = gr.soft;
            b.m_tokens = gr.mask;
            b.s_tokens = gr.soft_node;
        }
    }
    return out;
}

// One transformer block under structural masking: inactive tokens and head
// channel groups are excluded from every read and write; the residual
// carries them through unchanged.
VarId masked_block_forward(FwdCtx& cx, int l, VarId x, const MaskBundle& b) {
    Graph& g = *cx.g;
    Model& M = *cx.model;
    const MIAConfig& c = M.cfg;
    const BlockIds& ids = M.blocks[l];
    const int E = c.head_dim;
    const int C = c.embed_dim;
    const int rE = c.mlp_hidden_per_head;

    if (b.skipped) return x;

    std::vector<int> active_heads;
    for (int h = 0; h < c.num_heads; ++h)
        if (b.d_heads[h]) active_heads.push_back(h);
    std::vector<int> rowsA;
    std::vector<int> token_of_row;
    for (int i = 0; i < c.num_tokens; ++i)
        if (b.d_tokens[i]) {
            rowsA.push_back(i);
            token_of_row.push_back(i);
        }
    if (c.use_class_token) {
        rowsA.push_back(c.num_tokens);
        token_of_row.push_back(-1);
    }
    if (active_heads.empty() || rowsA.empty()) return x;

    const int nh = static_cast<int>(active_heads.size());
    const int hE = nh * E;
    std::vector<int> activeC, activeHid, head_of_col(C, -1);
    for (int h : active_heads) {
        for (int j = 0; j < E; ++j) {
            activeC.push_back(h * E + j);
            head_of_col[h * E + j] = h;
        }
        for (int j = 0; j < rE; ++j) activeHid.push_back(h * rE + j);
    }
    std::vector<int> qkv_cols;
    for (int part = 0; part < 3; ++part)
        for (int col : activeC) qkv_cols.push_back(part * C + col);

    // gathering every row/col in order is the identity; skip the copies
    auto sub_w = [&](int pid, const std::vector<int>& rows, const std::vector<int>& cols) {
        VarId w = cx.pvar(pid);
        const Tensor& wv = g.val(w);
        if (static_cast<int>(rows.size()) < wv.rows()) w = g.gather_rows(w, rows);
        if (static_cast<int>(cols.size()) < g.val(w).cols()) w = g.gather_cols(w, cols);
        return w;
    };
    auto sub_b = [&](int pid, const std::vector<int>& cols) {
        VarId bv = cx.pvar(pid);
        if (static_cast<int>(cols.size()) < g.val(bv).cols()) bv = g.gather_cols(bv, cols);
        return bv;
    };

    const int T = c.seq_len();
    auto take_rows = [&](VarId v) {
        return static_cast<int>(rowsA.size()) < T ? g.gather_rows(v, rowsA) : v;
    };
    auto take_cols = [&](VarId v) {
        return static_cast<int>(activeC.size()) < C ? g.gather_cols(v, activeC) : v;
    };

    // attention sublayer
    VarId xg = take_rows(x);
    VarId xm = g.apply_masks(xg, b.m_block, b.m_heads, b.m_tokens, head_of_col, token_of_row);
    VarId ln1 = g.layernorm(xm, cx.pvar(ids.ln1_g), cx.pvar(ids.ln1_b));
    VarId xa = take_cols(ln1);
    VarId qkv = g.linear(xa, sub_w(ids.qkv_w, activeC, qkv_cols), sub_b(ids.qkv_b, qkv_cols));
    std::vector<VarId> heads_out;
    for (int i = 0; i < nh; ++i) {
        VarId q = g.slice_cols(qkv, i * E, E);
        VarId k = g.slice_cols(qkv, hE + i * E, E);
        VarId v = g.slice_cols(qkv, 2 * hE + i * E, E);
        VarId s = g.scale(g.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(E)));
        heads_out.push_back(g.matmul(g.softmax_rows(s), v));
    }
    VarId att = nh == 1 ? heads_out[0] : g.concat_cols(heads_out);
    VarId y = g.linear(att, sub_w(ids.proj_w, activeC, activeC), sub_b(ids.proj_b, activeC));
    VarId x1 = g.residual_scatter(x, y, rowsA, activeC);

    // MLP sublayer (per-head hidden groups of width r*E)
    VarId x1g = take_rows(x1);
    VarId x1m = g.apply_masks(x1g, b.m_block, b.m_heads, b.m_tokens, head_of_col, token_of_row);
    VarId ln2 = g.layernorm(x1m, cx.pvar(ids.ln2_g), cx.pvar(ids.ln2_b));
    VarId xa2 = take_cols(ln2);
    VarId h1 = g.gelu(
        g.linear(xa2, sub_w(ids.fc1_w, activeC, activeHid), sub_b(ids.fc1_b, activeHid)));
    VarId h2 = g.linear(h1, sub_w(ids.fc2_w, activeHid, activeC), sub_b(ids.fc2_b, activeC));
    return g.residual_scatter(x1, h2, rowsA, activeC);
}

}  // namespace

ForwardResult Model::forward(Graph& g, const Batch& batch, const ForwardOptions& opt) {
    const MIAConfig& c = cfg;
    if (batch.channels != c.channels || batch.height != c.image_size ||
        batch.width != c.image_size)
        throw std::invalid_argument("forward: image shape does not match config");
    if (opt.mode == RunMode::train && !opt.rng)
        throw std::invalid_argument("forward: train mode requires an rng");
    if (opt.force.kind == ForcePolicy::Kind::explicit_masks &&
        static_cast<int>(opt.force.masks.size()) != batch.size)
        throw std::invalid_argument("forward: forced policy does not cover the batch");

    FwdCtx cx{this, &g, &opt, {}};
    if (opt.mode == RunMode::train || rl_heads) {
        if (opt.rng)
            for (int s = 0; s < batch.size; ++s) cx.sample_rngs.push_back(opt.rng->split(s));
    }

    ForwardResult res;
    res.traces.resize(batch.size);
    res.a2c.resize(batch.size);
    if (opt.record_logits) res.logit_vars.resize(batch.size);

    std::vector<VarId> feats;
    for (int s = 0; s < batch.size; ++s) {
        VarId img;
        if (opt.want_input_vars) {
            img = g.param(image_tensor(batch, s), nullptr);
            res.input_vars.push_back(img);
        } else {
            img = g.constant(image_tensor(batch, s));
        }
        VarId emb = g.conv2d(img, cx.pvar(patch_w), cx.pvar(patch_b), c.patch_size, c.patch_size,
                             c.patch_size, 0);
        VarId rows = g.chw_to_rows(emb);  // (N x C)
        if (c.use_class_token) rows = g.concat_rows({rows, cx.pvar(cls_token)});
        VarId x = g.add(rows, cx.pvar(pos_embed));
        res.embed_rows.push_back(x);

        // per-block forced masks for this sample, if any
        const std::vector<MaskBundle>* forced_list = nullptr;
        if (opt.force.kind == ForcePolicy::Kind::explicit_masks)
            forced_list = &opt.force.masks[s];

        SampleTrace& tr = res.traces[s];
        tr.sample_id = s;
        tr.label = s < static_cast<int>(batch.labels.size()) ? batch.labels[s] : -1;
        for (int l = 0; l < c.num_blocks; ++l) {
            const MaskBundle* forced = nullptr;
            MaskBundle forced_storage;
            if (opt.force.kind == ForcePolicy::Kind::all_on ||
                opt.force.kind == ForcePolicy::Kind::all_skip) {
                forced_storage.d_block =
                    opt.force.kind == ForcePolicy::Kind::all_on || !c.dims.depth ? 1 : 0;
                forced_storage.d_heads.assign(c.num_heads, 1);
                forced_storage.d_tokens.assign(c.num_tokens, 1);
                forced = &forced_storage;
            } else if (forced_list) {
                forced = &(*forced_list)[l];
            }
            CtrlStepOut cs = controller_step(cx, l, x, s, forced);
            if (opt.record_logits) res.logit_vars[s].push_back(cs.logits);
            for (auto& grp : cs.groups) res.a2c[s].push_back(grp);
            x = masked_block_forward(cx, l, x, cs.bundle);
            tr.blocks.push_back(std::move(cs.bundle));
        }
        tr.flops = model_flops(tr.blocks, c, c.dims);
        res.final_rows.push_back(x);

        VarId feat;
        if (c.use_class_token)
            feat = g.gather_rows(x, {c.num_tokens});
        else
            feat = g.mean_rows(x);
        feats.push_back(feat);
    }
    VarId fmat = batch.size == 1 ? feats[0] : g.concat_rows(feats);
    res.logits = g.linear(fmat, cx.pvar(head_w), cx.pvar(head_b));
    for (int s = 0; s < batch.size; ++s) res.traces[s].pred = res.argmax_row(g, s);
    return res;
}

std::vector<SampleTrace> Model::evaluate(const Batch& batch, std::vector<int>* preds) {
    Graph g(/*grad_enabled=*/false);
    ForwardOptions opt;
    opt.mode = RunMode::eval;
    ForwardResult r = forward(g, batch, opt);
    if (preds) {
        preds->clear();
        for (int s = 0; s < batch.size; ++s) preds->push_back(r.traces[s].pred);
    }
    return std::move(r.traces);
}

}  // namespace mia
