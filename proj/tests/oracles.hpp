// Independent straight-loop reference implementations used as oracles.
// These deliberately share no code with the graph-based forward path.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mia/model.hpp"

namespace oracle {

using mia::Batch;
using mia::MIAConfig;
using mia::Model;
using mia::Tensor;

inline const Tensor& W(const Model& m, const std::string& name) {
    int id = m.params.find(name);
    REQUIRE(id >= 0);
    return m.params.at(id).value;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

using Mat = std::vector<std::vector<double>>;

// patch embedding by direct per-patch dot products -> rows (N x C), then
// class token and positional embedding
inline Mat embed_oracle(const Model& m, const Batch& batch, int s) {
    const MIAConfig& c = m.cfg;
    const Tensor& pw = W(m, "embed.patch.w");
    const Tensor& pb = W(m, "embed.patch.b");
    int P = c.patch_size, C = c.embed_dim;
    const double* img = batch.sample(s);
    Mat rows(c.seq_len(), std::vector<double>(C, 0.0));
    for (int gy = 0; gy < c.grid_h; ++gy)
        for (int gx = 0; gx < c.grid_w; ++gx) {
            int tok = gy * c.grid_w + gx;
            for (int co = 0; co < C; ++co) {
                double acc = pb.v[co];
                for (int ch = 0; ch < c.channels; ++ch)
                    for (int py = 0; py < P; ++py)
                        for (int px = 0; px < P; ++px) {
                            double pix = img[(static_cast<size_t>(ch) * c.image_size +
                                              (gy * P + py)) * c.image_size + (gx * P + px)];
                            acc += pix * pw.at(co, (ch * P + py) * P + px);
                        }
                rows[tok][co] = acc;
            }
        }
    const Tensor& pos = W(m, "embed.pos");
    if (c.use_class_token) {
        const Tensor& cls = W(m, "embed.cls");
        for (int j = 0; j < C; ++j) rows[c.num_tokens][j] = cls.v[j];
    }
    for (int i = 0; i < c.seq_len(); ++i)
        for (int j = 0; j < C; ++j) rows[i][j] += pos.at(i, j);
    return rows;
}

inline std::vector<double> layernorm_row(const std::vector<double>& x, const Tensor& g,
                                         const Tensor& b) {
    int n = static_cast<int>(x.size());
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= n;
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= n;
    double is = 1.0 / std::sqrt(var + 1e-6);
    std::vector<double> out(n);
    for (int j = 0; j < n; ++j) out[j] = (x[j] - mu) * is * g.v[j] + b.v[j];
    return out;
}

// One block under structural masking: attention over active tokens with
// active heads only, per-head-group MLP over active groups, residual for
// everything else. All-ones masks give the plain dense block.
inline void block_oracle(const Model& m, int l, Mat& x, const std::vector<uint8_t>& d_heads,
                         const std::vector<uint8_t>& d_tokens) {
    const MIAConfig& c = m.cfg;
    std::string p = "backbone.b" + std::to_string(l) + ".";
    const Tensor& qkv_w = W(m, p + "qkv.w");
    const Tensor& qkv_b = W(m, p + "qkv.b");
    const Tensor& proj_w = W(m, p + "proj.w");
    const Tensor& proj_b = W(m, p + "proj.b");
    const Tensor& fc1_w = W(m, p + "fc1.w");
    const Tensor& fc1_b = W(m, p + "fc1.b");
    const Tensor& fc2_w = W(m, p + "fc2.w");
    const Tensor& fc2_b = W(m, p + "fc2.b");
    int E = c.head_dim, C = c.embed_dim, rE = c.mlp_hidden_per_head;

    std::vector<int> heads, rows, cols, hid;
    for (int h = 0; h < c.num_heads; ++h)
        if (d_heads[h]) {
            heads.push_back(h);
            for (int j = 0; j < E; ++j) cols.push_back(h * E + j);
            for (int j = 0; j < rE; ++j) hid.push_back(h * rE + j);
        }
    for (int i = 0; i < c.num_tokens; ++i)
        if (d_tokens[i]) rows.push_back(i);
    if (c.use_class_token) rows.push_back(c.num_tokens);
    if (heads.empty() || rows.empty()) return;
    int a = static_cast<int>(rows.size());

    // attention
    Mat ln(a);
    for (int i = 0; i < a; ++i) ln[i] = layernorm_row(x[rows[i]], W(m, p + "ln1.g"), W(m, p + "ln1.b"));
    Mat q(a, std::vector<double>(C, 0.0)), k = q, v = q;  // indexed by original col
    for (int i = 0; i < a; ++i)
        for (int oc : cols) {
            double aq = qkv_b.v[oc], ak = qkv_b.v[C + oc], av = qkv_b.v[2 * C + oc];
            for (int ic : cols) {
                aq += ln[i][ic] * qkv_w.at(ic, oc);
                ak += ln[i][ic] * qkv_w.at(ic, C + oc);
                av += ln[i][ic] * qkv_w.at(ic, 2 * C + oc);
            }
            q[i][oc] = aq;
            k[i][oc] = ak;
            v[i][oc] = av;
        }
    Mat att(a, std::vector<double>(C, 0.0));
    for (int h : heads) {
        for (int i = 0; i < a; ++i) {
            std::vector<double> sc(a);
            double mx = -1e300;
            for (int j = 0; j < a; ++j) {
                double s = 0.0;
                for (int e = 0; e < E; ++e) s += q[i][h * E + e] * k[j][h * E + e];
                sc[j] = s / std::sqrt(static_cast<double>(E));
                mx = std::max(mx, sc[j]);
            }
            double z = 0.0;
            for (int j = 0; j < a; ++j) {
                sc[j] = std::exp(sc[j] - mx);
                z += sc[j];
            }
            for (int j = 0; j < a; ++j)
                for (int e = 0; e < E; ++e) att[i][h * E + e] += sc[j] / z * v[j][h * E + e];
        }
    }
    for (int i = 0; i < a; ++i) {
        std::vector<double> upd(C, 0.0);
        for (int oc : cols) {
            double acc = proj_b.v[oc];
            for (int ic : cols) acc += att[i][ic] * proj_w.at(ic, oc);
            upd[oc] = acc;
        }
        for (int oc : cols) x[rows[i]][oc] += upd[oc];
    }

    // MLP
    for (int i = 0; i < a; ++i) {
        std::vector<double> ln2 = layernorm_row(x[rows[i]], W(m, p + "ln2.g"), W(m, p + "ln2.b"));
        std::vector<double> h1(c.mlp_hidden, 0.0);
        for (int oh : hid) {
            double acc = fc1_b.v[oh];
            for (int ic : cols) acc += ln2[ic] * fc1_w.at(ic, oh);
            h1[oh] = gelu(acc);
        }
        for (int oc : cols) {
            double acc = fc2_b.v[oc];
            for (int ih : hid) acc += h1[ih] * fc2_w.at(ih, oc);
            x[rows[i]][oc] += acc;
        }
    }
}

inline std::vector<double> classify_oracle(const Model& m, const Mat& x) {
    const MIAConfig& c = m.cfg;
    const Tensor& hw = W(m, "head.w");
    const Tensor& hb = W(m, "head.b");
    std::vector<double> feat(c.embed_dim, 0.0);
    if (c.use_class_token) {
        feat = x[c.num_tokens];
    } else {
        for (int i = 0; i < c.num_tokens; ++i)
            for (int j = 0; j < c.embed_dim; ++j) feat[j] += x[i][j] / c.num_tokens;
    }
    std::vector<double> logits(c.num_classes);
    for (int k = 0; k < c.num_classes; ++k) {
        double acc = hb.v[k];
        for (int j = 0; j < c.embed_dim; ++j) acc += feat[j] * hw.at(j, k);
        logits[k] = acc;
    }
    return logits;
}

// full dense forward: logits for one sample with every mask on
inline std::vector<double> dense_logits_oracle(const Model& m, const Batch& batch, int s) {
    Mat x = embed_oracle(m, batch, s);
    std::vector<uint8_t> all_h(m.cfg.num_heads, 1), all_n(m.cfg.num_tokens, 1);
    for (int l = 0; l < m.cfg.num_blocks; ++l) block_oracle(m, l, x, all_h, all_n);
    return classify_oracle(m, x);
}

// controller trunk by direct loops: conv3x3(pad 1) + gelu + 2x2 avg pool,
// twice, then global average pooling
inline std::vector<double> controller_trunk_oracle(const Model& m, int l, const Mat& x) {
    const MIAConfig& c = m.cfg;
    std::string p = "ctrl.b" + std::to_string(l) + ".";
    int C = c.embed_dim, Cp = c.num_heads * c.controller_hidden;

    auto conv = [&](const std::vector<double>& in, int cin, int h, int w, const Tensor& wt,
                    const Tensor& bias) {
        std::vector<double> out(static_cast<size_t>(Cp) * h * w);
        for (int co = 0; co < Cp; ++co)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    double acc = bias.v[co];
                    for (int ci = 0; ci < cin; ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                int iy = y - 1 + ky, ix = xx - 1 + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += in[(static_cast<size_t>(ci) * h + iy) * w + ix] *
                                       wt.at(co, (ci * 3 + ky) * 3 + kx);
                            }
                    out[(static_cast<size_t>(co) * h + y) * w + xx] = gelu(acc);
                }
        return out;
    };
    auto pool = [&](const std::vector<double>& in, int cc, int h, int w, int& ho, int& wo) {
        ho = h > 1 ? h / 2 : 1;
        wo = w > 1 ? w / 2 : 1;
        int ph = h > 1 ? 2 : 1, pw = w > 1 ? 2 : 1;
        std::vector<double> out(static_cast<size_t>(cc) * ho * wo);
        for (int ci = 0; ci < cc; ++ci)
            for (int y = 0; y < ho; ++y)
                for (int xx = 0; xx < wo; ++xx) {
                    double s = 0.0;
                    for (int ky = 0; ky < ph; ++ky)
                        for (int kx = 0; kx < pw; ++kx)
                            s += in[(static_cast<size_t>(ci) * h + y * ph + ky) * w + xx * pw + kx];
                    out[(static_cast<size_t>(ci) * ho + y) * wo + xx] = s / (ph * pw);
                }
        return out;
    };

    // token rows to planar channels
    std::vector<double> in(static_cast<size_t>(C) * c.num_tokens);
    for (int i = 0; i < c.num_tokens; ++i)
        for (int j = 0; j < C; ++j) in[static_cast<size_t>(j) * c.num_tokens + i] = x[i][j];
    int h = c.grid_h, w = c.grid_w, ho, wo;
    auto c1 = conv(in, C, h, w, W(m, p + "conv1.w"), W(m, p + "conv1.b"));
    auto p1 = pool(c1, Cp, h, w, ho, wo);
    auto c2 = conv(p1, Cp, ho, wo, W(m, p + "conv2.w"), W(m, p + "conv2.b"));
    int h2, w2;
    auto p2 = pool(c2, Cp, ho, wo, h2, w2);
    std::vector<double> fb(Cp, 0.0);
    for (int ci = 0; ci < Cp; ++ci) {
        for (int i = 0; i < h2 * w2; ++i) fb[ci] += p2[static_cast<size_t>(ci) * h2 * w2 + i];
        fb[ci] /= h2 * w2;
    }
    return fb;
}

}  // namespace oracle
