#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mia/tensor.hpp"

namespace mia {

using VarId = int32_t;
constexpr VarId kNoVar = -1;

// Reverse-mode tape. Each forward op appends a node holding its value and a
// closure that scatters the node's gradient to its parents. The graph is
// rebuilt per step (controller decisions change the topology per sample).
class Graph {
public:
    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    VarId constant(Tensor t) { return push(std::move(t), false, {}); }

    // Parameter entry point: value is copied onto the tape; backward
    // accumulates into *grad_sink (shape must match).
    VarId param(const Tensor& value, Tensor* grad_sink) {
        VarId id = push(value, grad_enabled_, {});
        if (grad_enabled_ && grad_sink) {
            node(id).back = [id, grad_sink](Graph& g) {
                const Tensor& gr = g.node(id).grad;
                if (gr.empty()) return;
                if (grad_sink->empty()) *grad_sink = Tensor(g.node(id).value.shape);
                grad_sink->add_(gr);
            };
        }
        return id;
    }

    const Tensor& val(VarId id) const { return nodes_[id].value; }
    const Tensor& grad_of(VarId id) const { return nodes_[id].grad; }
    bool requires_grad(VarId id) const { return nodes_[id].requires_grad; }
    size_t size() const { return nodes_.size(); }

    void backward(VarId root) {
        assert(grad_enabled_);
        assert(val(root).numel() == 1);
        node(root).grad = Tensor::scalar(1.0);
        for (VarId i = root; i >= 0; --i) {
            Node& n = node(i);
            if (!n.requires_grad || !n.back || n.grad.empty()) continue;
            n.back(*this);
        }
    }

    // ---- elementwise / scalar ops -------------------------------------

    VarId add(VarId a, VarId b) { return binary_broadcast(a, b, /*mul=*/false); }
    VarId mul(VarId a, VarId b) { return binary_broadcast(a, b, /*mul=*/true); }

    VarId sub(VarId a, VarId b) { return add(a, scale(b, -1.0)); }

    VarId scale(VarId a, double s) {
        Tensor out = val(a);
        for (auto& e : out.v) e *= s;
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a, s](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& ga = g.ensure_grad(a);
            for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += s * gr.v[i];
        });
        return id;
    }

    // true division (not reciprocal multiplication): keeps ratios exact
    VarId div_by(VarId a, double d) {
        Tensor out = val(a);
        for (auto& e : out.v) e /= d;
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a, d](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& ga = g.ensure_grad(a);
            for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += gr.v[i] / d;
        });
        return id;
    }

    VarId add_scalar(VarId a, double c) {
        Tensor out = val(a);
        for (auto& e : out.v) e += c;
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& ga = g.ensure_grad(a);
            for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += gr.v[i];
        });
        return id;
    }

    VarId sigmoid(VarId a) {
        Tensor out = val(a);
        for (auto& e : out.v) e = 1.0 / (1.0 + std::exp(-e));
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            const Tensor& y = g.val(id);
            Tensor& ga = g.ensure_grad(a);
            for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += gr.v[i] * y.v[i] * (1.0 - y.v[i]);
        });
        return id;
    }

    VarId softplus(VarId a) {
        Tensor out = val(a);
        for (auto& e : out.v) e = e > 0.0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            const Tensor& x = g.val(a);
            Tensor& ga = g.ensure_grad(a);
            for (size_t i = 0; i < gr.v.size(); ++i)
                ga.v[i] += gr.v[i] / (1.0 + std::exp(-x.v[i]));
        });
        return id;
    }

    VarId gelu(VarId a) {
        Tensor out = val(a);
        for (auto& e : out.v) e = 0.5 * e * (1.0 + std::erf(e * M_SQRT1_2));
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            const Tensor& x = g.val(a);
            Tensor& ga = g.ensure_grad(a);
            constexpr double inv_sqrt_2pi = 0.3989422804014327;
            for (size_t i = 0; i < gr.v.size(); ++i) {
                double xi = x.v[i];
                double cdf = 0.5 * (1.0 + std::erf(xi * M_SQRT1_2));
                double pdf = inv_sqrt_2pi * std::exp(-0.5 * xi * xi);
                ga.v[i] += gr.v[i] * (cdf + xi * pdf);
            }
        });
        return id;
    }

    // Forward: hard threshold at 0.5 (ties keep -> 1). Backward: identity,
    // so the hard value carries the soft relaxation's gradient.
    VarId st_round(VarId a) {
        Tensor out = val(a);
        for (auto& e : out.v) e = e >= 0.5 ? 1.0 : 0.0;
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& ga = g.ensure_grad(a);
            for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += gr.v[i];
        });
        return id;
    }

    VarId sum(VarId a) {
        double s = 0.0;
        for (double e : val(a).v) s += e;
        VarId id = push(Tensor::scalar(s), requires_grad(a), {a});
        attach(id, [id, a](Graph& g) {
            double go = g.node(id).grad.v[0];
            Tensor& ga = g.ensure_grad(a);
            for (auto& e : ga.v) e += go;
        });
        return id;
    }

    VarId mean(VarId a) {
        int64_t n = val(a).numel();
        return scale(sum(a), 1.0 / static_cast<double>(n));
    }

    // ---- linear algebra ------------------------------------------------

    // x (m x k) * w (k x p) + bias (p, optional)
    VarId linear(VarId x, VarId w, VarId bias = kNoVar) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        int m = xv.rows(), k = xv.cols(), p = wv.cols();
        assert(wv.rows() == k);
        Tensor out({m, p});
        gemm(xv.v.data(), wv.v.data(), out.v.data(), m, k, p);
        if (bias != kNoVar) {
            const Tensor& bv = val(bias);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < p; ++j) out.at(i, j) += bv.v[j];
        }
        bool rg = requires_grad(x) || requires_grad(w) || (bias != kNoVar && requires_grad(bias));
        VarId id = push(std::move(out), rg, {x, w, bias});
        attach(id, [id, x, w, bias, m, k, p](Graph& g) {
            const Tensor& go = g.node(id).grad;
            if (g.requires_grad(x)) {
                Tensor& gx = g.ensure_grad(x);
                gemm_nt_grad(go.v.data(), g.val(w).v.data(), gx.v.data(), m, p, k);
            }
            if (g.requires_grad(w)) {
                Tensor& gw = g.ensure_grad(w);
                gemm_tn_grad(g.val(x).v.data(), go.v.data(), gw.v.data(), k, m, p);
            }
            if (bias != kNoVar && g.requires_grad(bias)) {
                Tensor& gb = g.ensure_grad(bias);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < p; ++j) gb.v[j] += go.at(i, j);
            }
        });
        return id;
    }

    VarId matmul(VarId a, VarId b) { return linear(a, b, kNoVar); }

    // a (m x k) * b^T with b (p x k)
    VarId matmul_nt(VarId a, VarId b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        int m = av.rows(), k = av.cols(), p = bv.rows();
        assert(bv.cols() == k);
        Tensor out({m, p});
        gemm_nt(av.v.data(), bv.v.data(), out.v.data(), m, k, p);
        VarId id = push(std::move(out), requires_grad(a) || requires_grad(b), {a, b});
        attach(id, [id, a, b, m, k, p](Graph& g) {
            const Tensor& go = g.node(id).grad;
            if (g.requires_grad(a)) {
                Tensor& ga = g.ensure_grad(a);
                gemm_grad(go.v.data(), g.val(b).v.data(), ga.v.data(), m, p, k);
            }
            if (g.requires_grad(b)) {
                Tensor& gb = g.ensure_grad(b);
                gemm_tn_grad(go.v.data(), g.val(a).v.data(), gb.v.data(), p, m, k);
            }
        });
        return id;
    }

    // ---- shape ops -----------------------------------------------------

    VarId reshape(VarId a, std::vector<int> shape) {
        assert(Tensor::numel_of(shape) == val(a).numel());
        Tensor out(std::move(shape), val(a).v);
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& ga = g.ensure_grad(a);
            for (size_t i = 0; i < gr.v.size(); ++i) ga.v[i] += gr.v[i];
        });
        return id;
    }

    VarId gather_rows(VarId a, std::vector<int> rows) {
        const Tensor& av = val(a);
        int c = av.cols();
        Tensor out({static_cast<int>(rows.size()), c});
        for (size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < c; ++j) out.at(static_cast<int>(i), j) = av.at(rows[i], j);
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a, rows = std::move(rows), c](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& ga = g.ensure_grad(a);
            for (size_t i = 0; i < rows.size(); ++i)
                for (int j = 0; j < c; ++j) ga.at(rows[i], j) += gr.at(static_cast<int>(i), j);
        });
        return id;
    }

    VarId gather_cols(VarId a, std::vector<int> cols) {
        const Tensor& av = val(a);
        int m = av.rows();
        Tensor out({m, static_cast<int>(cols.size())});
        for (int i = 0; i < m; ++i)
            for (size_t j = 0; j < cols.size(); ++j) out.at(i, static_cast<int>(j)) = av.at(i, cols[j]);
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a, cols = std::move(cols), m](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& ga = g.ensure_grad(a);
            for (int i = 0; i < m; ++i)
                for (size_t j = 0; j < cols.size(); ++j)
                    ga.at(i, cols[j]) += gr.at(i, static_cast<int>(j));
        });
        return id;
    }

    VarId slice_cols(VarId a, int start, int len) {
        const Tensor& av = val(a);
        int m = av.rows();
        Tensor out({m, len});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < len; ++j) out.at(i, j) = av.at(i, start + j);
        VarId id = push(std::move(out), requires_grad(a), {a});
        attach(id, [id, a, start, len, m](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& ga = g.ensure_grad(a);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < len; ++j) ga.at(i, start + j) += gr.at(i, j);
        });
        return id;
    }

    VarId concat_cols(const std::vector<VarId>& parts) {
        int m = val(parts[0]).rows();
        int total = 0;
        bool rg = false;
        for (VarId p : parts) {
            total += val(p).cols();
            rg = rg || requires_grad(p);
        }
        Tensor out({m, total});
        int off = 0;
        for (VarId p : parts) {
            const Tensor& pv = val(p);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < pv.cols(); ++j) out.at(i, off + j) = pv.at(i, j);
            off += pv.cols();
        }
        VarId id = push(std::move(out), rg, parts);
        attach(id, [id, parts, m](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            int off = 0;
            for (VarId p : parts) {
                int c = g.val(p).cols();
                if (g.requires_grad(p)) {
                    Tensor& gp = g.ensure_grad(p);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < c; ++j) gp.at(i, j) += gr.at(i, off + j);
                }
                off += c;
            }
        });
        return id;
    }

    VarId concat_rows(const std::vector<VarId>& parts) {
        int c = val(parts[0]).cols();
        int total = 0;
        bool rg = false;
        for (VarId p : parts) {
            total += val(p).rows();
            rg = rg || requires_grad(p);
        }
        Tensor out({total, c});
        int off = 0;
        for (VarId p : parts) {
            const Tensor& pv = val(p);
            for (int i = 0; i < pv.rows(); ++i)
                for (int j = 0; j < c; ++j) out.at(off + i, j) = pv.at(i, j);
            off += pv.rows();
        }
        VarId id = push(std::move(out), rg, parts);
        attach(id, [id, parts, c](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            int off = 0;
            for (VarId p : parts) {
                int r = g.val(p).rows();
                if (g.requires_grad(p)) {
                    Tensor& gp = g.ensure_grad(p);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < c; ++j) gp.at(i, j) += gr.at(off + i, j);
                }
                off += r;
            }
        });
        return id;
    }

    // out = x with out[rows x cols] += y. Carries the residual stream past
    // masked components untouched.
    VarId residual_scatter(VarId x, VarId y, std::vector<int> rows, std::vector<int> cols) {
        Tensor out = val(x);
        const Tensor& yv = val(y);
        assert(yv.rows() == static_cast<int>(rows.size()) && yv.cols() == static_cast<int>(cols.size()));
        for (size_t i = 0; i < rows.size(); ++i)
            for (size_t j = 0; j < cols.size(); ++j)
                out.at(rows[i], cols[j]) += yv.at(static_cast<int>(i), static_cast<int>(j));
        VarId id = push(std::move(out), requires_grad(x) || requires_grad(y), {x, y});
        attach(id, [id, x, y, rows = std::move(rows), cols = std::move(cols)](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            if (g.requires_grad(x)) {
                Tensor& gx = g.ensure_grad(x);
                gx.add_(gr);
            }
            if (g.requires_grad(y)) {
                Tensor& gy = g.ensure_grad(y);
                for (size_t i = 0; i < rows.size(); ++i)
                    for (size_t j = 0; j < cols.size(); ++j)
                        gy.at(static_cast<int>(i), static_cast<int>(j)) += gr.at(rows[i], cols[j]);
            }
        });
        return id;
    }

    // ---- normalization / attention ------------------------------------

    VarId layernorm(VarId x, VarId gamma, VarId beta, double eps = 1e-6) {
        const Tensor& xv = val(x);
        int m = xv.rows(), c = xv.cols();
        Tensor out({m, c});
        Tensor xhat({m, c});
        std::vector<double> inv_std(m);
        for (int i = 0; i < m; ++i) {
            double mu = 0.0;
            for (int j = 0; j < c; ++j) mu += xv.at(i, j);
            mu /= c;
            double var = 0.0;
            for (int j = 0; j < c; ++j) {
                double d = xv.at(i, j) - mu;
                var += d * d;
            }
            var /= c;
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[i] = is;
            for (int j = 0; j < c; ++j) {
                double h = (xv.at(i, j) - mu) * is;
                xhat.at(i, j) = h;
                out.at(i, j) = h * val(gamma).v[j] + val(beta).v[j];
            }
        }
        bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
        VarId id = push(std::move(out), rg, {x, gamma, beta});
        attach(id, [id, x, gamma, beta, m, c, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& gv = g.val(gamma);
            if (g.requires_grad(gamma)) {
                Tensor& gg = g.ensure_grad(gamma);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < c; ++j) gg.v[j] += go.at(i, j) * xhat.at(i, j);
            }
            if (g.requires_grad(beta)) {
                Tensor& gb = g.ensure_grad(beta);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < c; ++j) gb.v[j] += go.at(i, j);
            }
            if (g.requires_grad(x)) {
                Tensor& gx = g.ensure_grad(x);
                for (int i = 0; i < m; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (int j = 0; j < c; ++j) {
                        double gj = go.at(i, j) * gv.v[j];
                        s1 += gj;
                        s2 += gj * xhat.at(i, j);
                    }
                    s1 /= c;
                    s2 /= c;
                    for (int j = 0; j < c; ++j) {
                        double gj = go.at(i, j) * gv.v[j];
                        gx.at(i, j) += (gj - s1 - xhat.at(i, j) * s2) * inv_std[i];
                    }
                }
            }
        });
        return id;
    }

    VarId softmax_rows(VarId x) {
        const Tensor& xv = val(x);
        int m = xv.rows(), c = xv.cols();
        Tensor out({m, c});
        for (int i = 0; i < m; ++i) {
            double mx = xv.at(i, 0);
            for (int j = 1; j < c; ++j) mx = std::max(mx, xv.at(i, j));
            double z = 0.0;
            for (int j = 0; j < c; ++j) {
                double e = std::exp(xv.at(i, j) - mx);
                out.at(i, j) = e;
                z += e;
            }
            for (int j = 0; j < c; ++j) out.at(i, j) /= z;
        }
        VarId id = push(std::move(out), requires_grad(x), {x});
        attach(id, [id, x, m, c](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& p = g.val(id);
            Tensor& gx = g.ensure_grad(x);
            for (int i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += go.at(i, j) * p.at(i, j);
                for (int j = 0; j < c; ++j) gx.at(i, j) += p.at(i, j) * (go.at(i, j) - dot);
            }
        });
        return id;
    }

    // Mean cross-entropy from raw logits (m x k) against integer labels.
    VarId cross_entropy(VarId logits, const std::vector<int>& labels) {
        const Tensor& z = val(logits);
        int m = z.rows(), k = z.cols();
        assert(static_cast<int>(labels.size()) == m);
        Tensor probs({m, k});
        double loss = 0.0;
        for (int i = 0; i < m; ++i) {
            double mx = z.at(i, 0);
            for (int j = 1; j < k; ++j) mx = std::max(mx, z.at(i, j));
            double s = 0.0;
            for (int j = 0; j < k; ++j) {
                double e = std::exp(z.at(i, j) - mx);
                probs.at(i, j) = e;
                s += e;
            }
            for (int j = 0; j < k; ++j) probs.at(i, j) /= s;
            loss += std::log(s) + mx - z.at(i, labels[i]);
        }
        loss /= m;
        VarId id = push(Tensor::scalar(loss), requires_grad(logits), {logits});
        attach(id, [id, logits, labels, probs = std::move(probs), m, k](Graph& g) {
            double go = g.node(id).grad.v[0];
            Tensor& gz = g.ensure_grad(logits);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < k; ++j) {
                    double p = probs.at(i, j) - (labels[i] == j ? 1.0 : 0.0);
                    gz.at(i, j) += go * p / m;
                }
        });
        return id;
    }

    // ---- convolution & pooling (controller / patch embedding) ----------

    // x (Cin, H, W), w (Cout, Cin*kh*kw), bias (Cout) -> (Cout, Ho, Wo)
    VarId conv2d(VarId x, VarId w, VarId bias, int kh, int kw, int stride, int pad) {
        const Tensor& xv = val(x);
        assert(xv.shape.size() == 3);
        int cin = xv.shape[0], h = xv.shape[1], wdt = xv.shape[2];
        const Tensor& wv = val(w);
        int cout = wv.rows();
        assert(wv.cols() == cin * kh * kw);
        int ho = (h + 2 * pad - kh) / stride + 1;
        int wo = (wdt + 2 * pad - kw) / stride + 1;
        int spots = ho * wo, patch = cin * kh * kw;
        Tensor col({spots, patch});
        for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
                int s = oy * wo + ox;
                for (int ci = 0; ci < cin; ++ci)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            int iy = oy * stride - pad + ky;
                            int ix = ox * stride - pad + kx;
                            double v = 0.0;
                            if (iy >= 0 && iy < h && ix >= 0 && ix < wdt)
                                v = xv.v[(static_cast<size_t>(ci) * h + iy) * wdt + ix];
                            col.at(s, (ci * kh + ky) * kw + kx) = v;
                        }
            }
        // rows (spots x cout) = col * w^T, counted
        Tensor rows_t({spots, cout});
        gemm_nt(col.v.data(), wv.v.data(), rows_t.v.data(), spots, patch, cout);
        Tensor out({cout, ho, wo});
        const Tensor& bv = val(bias);
        for (int co = 0; co < cout; ++co)
            for (int s = 0; s < spots; ++s)
                out.v[static_cast<size_t>(co) * spots + s] = rows_t.at(s, co) + bv.v[co];
        bool rg = requires_grad(x) || requires_grad(w) || requires_grad(bias);
        VarId id = push(std::move(out), rg, {x, w, bias});
        attach(id, [id, x, w, bias, kh, kw, stride, pad, cin, h, wdt, cout, ho, wo,
                    col = std::move(col)](Graph& g) {
            const Tensor& go = g.node(id).grad;
            int spots = ho * wo, patch = cin * kh * kw;
            Tensor drows({spots, cout});
            for (int co = 0; co < cout; ++co)
                for (int s = 0; s < spots; ++s)
                    drows.at(s, co) = go.v[static_cast<size_t>(co) * spots + s];
            if (g.requires_grad(bias)) {
                Tensor& gb = g.ensure_grad(bias);
                for (int co = 0; co < cout; ++co)
                    for (int s = 0; s < spots; ++s) gb.v[co] += drows.at(s, co);
            }
            if (g.requires_grad(w)) {
                // dW (cout x patch) += drows^T * col
                Tensor& gw = g.ensure_grad(w);
                gemm_tn_grad(drows.v.data(), col.v.data(), gw.v.data(), cout, spots, patch);
            }
            if (g.requires_grad(x)) {
                Tensor dcol({spots, patch});
                gemm_grad(drows.v.data(), g.val(w).v.data(), dcol.v.data(), spots, cout, patch,
                          false);
                Tensor& gx = g.ensure_grad(x);
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) {
                        int s = oy * wo + ox;
                        for (int ci = 0; ci < cin; ++ci)
                            for (int ky = 0; ky < kh; ++ky)
                                for (int kx = 0; kx < kw; ++kx) {
                                    int iy = oy * stride - pad + ky;
                                    int ix = ox * stride - pad + kx;
                                    if (iy >= 0 && iy < h && ix >= 0 && ix < wdt)
                                        gx.v[(static_cast<size_t>(ci) * h + iy) * wdt + ix] +=
                                            dcol.at(s, (ci * kh + ky) * kw + kx);
                                }
                    }
            }
        });
        return id;
    }

    // 2x2 average pool, stride 2, floor semantics (odd trailing row/col
    // dropped); identity on dimensions of size 1.
    VarId avgpool2(VarId x) {
        const Tensor& xv = val(x);
        assert(xv.shape.size() == 3);
        int c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
        int ho = h > 1 ? h / 2 : 1;
        int wo = w > 1 ? w / 2 : 1;
        int ph = h > 1 ? 2 : 1, pw = w > 1 ? 2 : 1;
        Tensor out({c, ho, wo});
        for (int ci = 0; ci < c; ++ci)
            for (int oy = 0; oy < ho; ++oy)
                for (int ox = 0; ox < wo; ++ox) {
                    double s = 0.0;
                    for (int ky = 0; ky < ph; ++ky)
                        for (int kx = 0; kx < pw; ++kx)
                            s += xv.v[(static_cast<size_t>(ci) * h + oy * ph + ky) * w + ox * pw + kx];
                    out.v[(static_cast<size_t>(ci) * ho + oy) * wo + ox] = s / (ph * pw);
                }
        VarId id = push(std::move(out), requires_grad(x), {x});
        attach(id, [id, x, c, h, w, ho, wo, ph, pw](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& gx = g.ensure_grad(x);
            for (int ci = 0; ci < c; ++ci)
                for (int oy = 0; oy < ho; ++oy)
                    for (int ox = 0; ox < wo; ++ox) {
                        double v = gr.v[(static_cast<size_t>(ci) * ho + oy) * wo + ox] / (ph * pw);
                        for (int ky = 0; ky < ph; ++ky)
                            for (int kx = 0; kx < pw; ++kx)
                                gx.v[(static_cast<size_t>(ci) * h + oy * ph + ky) * w + ox * pw + kx] += v;
                    }
        });
        return id;
    }

    // (C, H, W) -> (1 x C) spatial mean
    VarId global_avgpool(VarId x) {
        const Tensor& xv = val(x);
        int c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
        Tensor out({1, c});
        for (int ci = 0; ci < c; ++ci) {
            double s = 0.0;
            for (int i = 0; i < hw; ++i) s += xv.v[static_cast<size_t>(ci) * hw + i];
            out.v[ci] = s / hw;
        }
        VarId id = push(std::move(out), requires_grad(x), {x});
        attach(id, [id, x, c, hw](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& gx = g.ensure_grad(x);
            for (int ci = 0; ci < c; ++ci) {
                double v = gr.v[ci] / hw;
                for (int i = 0; i < hw; ++i) gx.v[static_cast<size_t>(ci) * hw + i] += v;
            }
        });
        return id;
    }

    // (N x C) token rows in grid row-major order -> (C, Nh, Nw)
    VarId rows_to_chw(VarId x, int nh, int nw) {
        const Tensor& xv = val(x);
        int c = xv.cols();
        assert(xv.rows() == nh * nw);
        Tensor out({c, nh, nw});
        for (int i = 0; i < nh * nw; ++i)
            for (int j = 0; j < c; ++j) out.v[static_cast<size_t>(j) * nh * nw + i] = xv.at(i, j);
        VarId id = push(std::move(out), requires_grad(x), {x});
        attach(id, [id, x, nh, nw, c](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& gx = g.ensure_grad(x);
            for (int i = 0; i < nh * nw; ++i)
                for (int j = 0; j < c; ++j) gx.at(i, j) += gr.v[static_cast<size_t>(j) * nh * nw + i];
        });
        return id;
    }

    // (C, Nh, Nw) -> (N x C)
    VarId chw_to_rows(VarId x) {
        const Tensor& xv = val(x);
        int c = xv.shape[0], n = xv.shape[1] * xv.shape[2];
        Tensor out({n, c});
        for (int j = 0; j < c; ++j)
            for (int i = 0; i < n; ++i) out.at(i, j) = xv.v[static_cast<size_t>(j) * n + i];
        VarId id = push(std::move(out), requires_grad(x), {x});
        attach(id, [id, x, c, n](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& gx = g.ensure_grad(x);
            for (int j = 0; j < c; ++j)
                for (int i = 0; i < n; ++i) gx.v[static_cast<size_t>(j) * n + i] += gr.at(i, j);
        });
        return id;
    }

    // Straight-through mask application over a full-width token matrix.
    // Scales entry (i, c) by block * heads[head_of_col[c]] * tokens[token_of_row[i]];
    // map entries of -1 mean "no factor" (inactive column / class-token row).
    VarId apply_masks(VarId x, VarId block_m, VarId heads_m, VarId tokens_m,
                      std::vector<int> head_of_col, std::vector<int> token_of_row) {
        const Tensor& xv = val(x);
        int m = xv.rows(), c = xv.cols();
        assert(static_cast<int>(head_of_col.size()) == c && static_cast<int>(token_of_row.size()) == m);
        const double bm = val(block_m).v[0];
        const Tensor& hm = val(heads_m);
        const Tensor& tm = val(tokens_m);
        Tensor out({m, c});
        for (int i = 0; i < m; ++i) {
            double rf = token_of_row[i] >= 0 ? tm.v[token_of_row[i]] : 1.0;
            for (int j = 0; j < c; ++j) {
                int hc = head_of_col[j];
                out.at(i, j) = hc >= 0 ? xv.at(i, j) * bm * hm.v[hc] * rf : xv.at(i, j);
            }
        }
        bool rg = requires_grad(x) || requires_grad(block_m) || requires_grad(heads_m) ||
                  requires_grad(tokens_m);
        VarId id = push(std::move(out), rg, {x, block_m, heads_m, tokens_m});
        attach(id, [id, x, block_m, heads_m, tokens_m, head_of_col = std::move(head_of_col),
                    token_of_row = std::move(token_of_row), m, c](Graph& g) {
            const Tensor& go = g.node(id).grad;
            const Tensor& xv = g.val(x);
            const double bm = g.val(block_m).v[0];
            const Tensor& hm = g.val(heads_m);
            const Tensor& tm = g.val(tokens_m);
            Tensor* gx = g.requires_grad(x) ? &g.ensure_grad(x) : nullptr;
            Tensor* gb = g.requires_grad(block_m) ? &g.ensure_grad(block_m) : nullptr;
            Tensor* gh = g.requires_grad(heads_m) ? &g.ensure_grad(heads_m) : nullptr;
            Tensor* gt = g.requires_grad(tokens_m) ? &g.ensure_grad(tokens_m) : nullptr;
            for (int i = 0; i < m; ++i) {
                int tr = token_of_row[i];
                double rf = tr >= 0 ? tm.v[tr] : 1.0;
                for (int j = 0; j < c; ++j) {
                    int hc = head_of_col[j];
                    double o = go.at(i, j);
                    if (hc < 0) {
                        if (gx) gx->at(i, j) += o;
                        continue;
                    }
                    double xb = xv.at(i, j);
                    double hf = hm.v[hc];
                    if (gx) gx->at(i, j) += o * bm * hf * rf;
                    if (gb) gb->v[0] += o * xb * hf * rf;
                    if (gh) gh->v[hc] += o * xb * bm * rf;
                    if (gt && tr >= 0) gt->v[tr] += o * xb * bm * hf;
                }
            }
        });
        return id;
    }

    // (m x c) -> (1 x c) column means
    VarId mean_rows(VarId x) {
        const Tensor& xv = val(x);
        int m = xv.rows(), c = xv.cols();
        Tensor out({1, c});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < c; ++j) out.v[j] += xv.at(i, j);
        for (int j = 0; j < c; ++j) out.v[j] /= m;
        VarId id = push(std::move(out), requires_grad(x), {x});
        attach(id, [id, x, m, c](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            Tensor& gx = g.ensure_grad(x);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < c; ++j) gx.at(i, j) += gr.v[j] / m;
        });
        return id;
    }

    Tensor& ensure_grad(VarId id) {
        Node& n = node(id);
        if (n.grad.empty()) n.grad = Tensor(n.value.shape);
        return n.grad;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Graph&)> back;
    };

    Node& node(VarId id) { return nodes_[id]; }

    VarId push(Tensor value, bool rg, const std::vector<VarId>& parents) {
        (void)parents;
        Node n;
        n.value = std::move(value);
        n.requires_grad = grad_enabled_ && rg;
        nodes_.push_back(std::move(n));
        return static_cast<VarId>(nodes_.size() - 1);
    }

    template <typename F>
    void attach(VarId id, F&& back) {
        if (node(id).requires_grad) node(id).back = std::forward<F>(back);
    }

    // broadcasting: shapes equal, or one side is a scalar {1}
    VarId binary_broadcast(VarId a, VarId b, bool mul_op) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        bool a_scalar = av.numel() == 1 && bv.numel() != 1;
        bool b_scalar = bv.numel() == 1 && av.numel() != 1;
        assert(a_scalar || b_scalar || av.numel() == bv.numel());
        const Tensor& big = a_scalar ? bv : av;
        Tensor out(big.shape);
        for (int64_t i = 0; i < out.numel(); ++i) {
            double x = a_scalar ? av.v[0] : av.v[i];
            double y = b_scalar ? bv.v[0] : bv.v[i];
            out.v[i] = mul_op ? x * y : x + y;
        }
        VarId id = push(std::move(out), requires_grad(a) || requires_grad(b), {a, b});
        attach(id, [id, a, b, a_scalar, b_scalar, mul_op](Graph& g) {
            const Tensor& gr = g.node(id).grad;
            const Tensor& av = g.val(a);
            const Tensor& bv = g.val(b);
            if (g.requires_grad(a)) {
                Tensor& ga = g.ensure_grad(a);
                for (int64_t i = 0; i < gr.numel(); ++i) {
                    double d = mul_op ? gr.v[i] * (b_scalar ? bv.v[0] : bv.v[i]) : gr.v[i];
                    ga.v[a_scalar ? 0 : i] += d;
                }
            }
            if (g.requires_grad(b)) {
                Tensor& gb = g.ensure_grad(b);
                for (int64_t i = 0; i < gr.numel(); ++i) {
                    double d = mul_op ? gr.v[i] * (a_scalar ? av.v[0] : av.v[i]) : gr.v[i];
                    gb.v[b_scalar ? 0 : i] += d;
                }
            }
        });
        return id;
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
};

}  // namespace mia
