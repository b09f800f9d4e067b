#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mia/cost_model.hpp"
#include "mia/model.hpp"
#include "oracles.hpp"

using namespace mia;

namespace {

MIAConfig tiny() { return validate_config(MIAConfig{}); }

Batch random_batch(const MIAConfig& c, int n, uint64_t seed) {
    Rng rng(seed);
    Batch b;
    b.size = n;
    b.channels = c.channels;
    b.height = c.image_size;
    b.width = c.image_size;
    b.pixels.resize(static_cast<size_t>(n) * b.sample_numel());
    for (auto& p : b.pixels) p = rng.uniform();
    b.labels.assign(n, 0);
    for (int i = 0; i < n; ++i) b.labels[i] = static_cast<int>(rng.uniform_int(c.num_classes));
    return b;
}

void set_tensor(Model& m, const std::string& name, double v) {
    m.params.at(m.params.find(name)).value.fill(v);
}

}  // namespace

TEST_CASE("gumbel_binary eval semantics: sigmoid threshold with ties kept") {
    Graph g;
    VarId z = g.constant(Tensor({3}, {3.0, 0.0, -2.0}));
    GumbelResult r = gumbel_binary(g, z, 1.0, RunMode::eval, nullptr);
    CHECK(r.hard[0] == 1);
    CHECK(r.soft[1] == doctest::Approx(0.5));
    CHECK(r.hard[1] == 1);  // tie -> keep
    CHECK(r.hard[2] == 0);
    CHECK(g.val(r.mask).v[0] == 1.0);
    CHECK(g.val(r.mask).v[2] == 0.0);
}

TEST_CASE("gumbel_binary rejects non-positive temperature") {
    Graph g;
    VarId z = g.constant(Tensor::scalar(0.0));
    Rng rng(1);
    CHECK_THROWS_AS(gumbel_binary(g, z, 0.0, RunMode::train, &rng), std::invalid_argument);
    CHECK_THROWS_AS(gumbel_binary(g, z, -1.0, RunMode::train, &rng), std::invalid_argument);
}

TEST_CASE("train-mode keep probability at logit 0 is one half") {
    Rng rng(2024);
    int keep = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        Graph g(false);
        VarId z = g.constant(Tensor::scalar(0.0));
        GumbelResult r = gumbel_binary(g, z, 1.0, RunMode::train, &rng);
        keep += r.hard[0];
    }
    CHECK(std::abs(keep / double(n) - 0.5) < 0.01);
}

TEST_CASE("train-mode sampling is reproducible from the rng state") {
    Rng a(7), b(7);
    Graph g1(false), g2(false);
    VarId z1 = g1.constant(Tensor({5}, {0.3, -0.2, 0.0, 1.0, -1.0}));
    VarId z2 = g2.constant(Tensor({5}, {0.3, -0.2, 0.0, 1.0, -1.0}));
    GumbelResult r1 = gumbel_binary(g1, z1, 0.7, RunMode::train, &a);
    GumbelResult r2 = gumbel_binary(g2, z2, 0.7, RunMode::train, &b);
    CHECK(r1.hard == r2.hard);
    for (int i = 0; i < 5; ++i) CHECK(r1.soft[i] == r2.soft[i]);
}

TEST_CASE("eval decisions are monotone in each keep-logit") {
    for (double z : {-3.0, -0.5, 0.0, 0.49, 0.5, 2.0}) {
        for (double d : {0.1, 1.0, 5.0}) {
            Graph g;
            GumbelResult lo = gumbel_binary(g, g.constant(Tensor::scalar(z)), 1.0,
                                            RunMode::eval, nullptr);
            GumbelResult hi = gumbel_binary(g, g.constant(Tensor::scalar(z + d)), 1.0,
                                            RunMode::eval, nullptr);
            CHECK(hi.hard[0] >= lo.hard[0]);
        }
    }
}

TEST_CASE("controller branch features match hand-unrolled oracles on the dense stream") {
    MIAConfig c = tiny();
    Model m = Model::init(c, 400);
    Batch b = random_batch(c, 1, 8);
    Graph g(false);
    ForwardOptions fo;
    fo.mode = RunMode::eval;
    fo.force.kind = ForcePolicy::Kind::all_on;
    fo.record_logits = true;
    ForwardResult r = m.forward(g, b, fo);

    auto x = oracle::embed_oracle(m, b, 0);
    std::vector<uint8_t> all_h(c.num_heads, 1), all_n(c.num_tokens, 1);
    for (int l = 0; l < c.num_blocks; ++l) {
        std::string p = "ctrl.b" + std::to_string(l) + ".";
        auto fb = oracle::controller_trunk_oracle(m, l, x);

        // block logit: FC_b on the pooled trunk feature
        const Tensor& wb = oracle::W(m, p + "fc_b.w");
        double zb = oracle::W(m, p + "fc_b.b").v[0];
        for (int i = 0; i < static_cast<int>(fb.size()); ++i) zb += fb[i] * wb.at(i, 0);
        REQUIRE(r.logit_vars[0][l].block != kNoVar);
        CHECK(g.val(r.logit_vars[0][l].block).v[0] == doctest::Approx(zb).epsilon(1e-9));

        // head logits: FC_h2 over gelu(FC_h1(F_b)) rows
        const Tensor& w1 = oracle::W(m, p + "fc_h1.w");
        const Tensor& b1 = oracle::W(m, p + "fc_h1.b");
        const Tensor& w2 = oracle::W(m, p + "fc_h2.w");
        double bias2 = oracle::W(m, p + "fc_h2.b").v[0];
        REQUIRE(r.logit_vars[0][l].heads != kNoVar);
        const Tensor& zh = g.val(r.logit_vars[0][l].heads);
        for (int h = 0; h < c.num_heads; ++h) {
            double z = bias2;
            for (int e = 0; e < c.head_feature_dim; ++e) {
                double f = b1.v[h * c.head_feature_dim + e];
                for (int i = 0; i < static_cast<int>(fb.size()); ++i)
                    f += fb[i] * w1.at(i, h * c.head_feature_dim + e);
                z += oracle::gelu(f) * w2.at(e, 0);
            }
            CHECK(zh.v[h] == doctest::Approx(z).epsilon(1e-9));
        }

        // token logits: FC_n over the two-layer token MLP
        const Tensor& m1 = oracle::W(m, p + "mlp_n1.w");
        const Tensor& mb1 = oracle::W(m, p + "mlp_n1.b");
        const Tensor& m2 = oracle::W(m, p + "mlp_n2.w");
        const Tensor& mb2 = oracle::W(m, p + "mlp_n2.b");
        const Tensor& wn = oracle::W(m, p + "fc_n.w");
        double bn = oracle::W(m, p + "fc_n.b").v[0];
        int Cp = c.num_heads * c.controller_hidden;
        REQUIRE(r.logit_vars[0][l].tokens != kNoVar);
        const Tensor& zn = g.val(r.logit_vars[0][l].tokens);
        for (int t = 0; t < c.num_tokens; ++t) {
            std::vector<double> h1(Cp);
            for (int o = 0; o < Cp; ++o) {
                double acc = mb1.v[o];
                for (int i = 0; i < c.embed_dim; ++i) acc += x[t][i] * m1.at(i, o);
                h1[o] = oracle::gelu(acc);
            }
            double z = bn;
            for (int o = 0; o < Cp; ++o) {
                double f2 = mb2.v[o];
                for (int i = 0; i < Cp; ++i) f2 += h1[i] * m2.at(i, o);
                z += f2 * wn.at(o, 0);
            }
            CHECK(zn.v[t] == doctest::Approx(z).epsilon(1e-9));
        }
        oracle::block_oracle(m, l, x, all_h, all_n);
    }
}

TEST_CASE("large positive gate bias keeps every block; shapes are as configured") {
    MIAConfig c = tiny();
    Model m = Model::init(c, 9);
    for (int l = 0; l < c.num_blocks; ++l) {
        std::string p = "ctrl.b" + std::to_string(l) + ".";
        set_tensor(m, p + "fc_b.w", 0.0);
        set_tensor(m, p + "fc_b.b", 10.0);
    }
    Batch b = random_batch(c, 2, 12);
    auto traces = m.evaluate(b);
    for (auto& t : traces)
        for (auto& blk : t.blocks) {
            CHECK(blk.d_block == 1);
            CHECK(!blk.skipped);
            CHECK(blk.d_heads.size() == 4);
            CHECK(blk.d_tokens.size() == 16);
        }
}

TEST_CASE("skipped blocks never evaluate head/token branches (instrumented)") {
    MIAConfig c = tiny();
    Model m = Model::init(c, 10);
    for (int l = 0; l < c.num_blocks; ++l) {
        std::string p = "ctrl.b" + std::to_string(l) + ".";
        set_tensor(m, p + "fc_b.w", 0.0);
        set_tensor(m, p + "fc_b.b", -10.0);  // always skip
    }
    Batch b = random_batch(c, 1, 13);
    Graph g(false);
    ForwardOptions fo;
    fo.mode = RunMode::eval;
    FlopCounter::reset();
    ForwardResult r = m.forward(g, b, fo);
    double measured = FlopCounter::flops;
    FlopCounter::stop();

    // analytic: embed + classifier + L * controller_flops(skipped)
    double expected = patch_embed_flops(c) + classifier_flops(c) +
                      c.num_blocks * controller_flops(c, /*skipped=*/true);
    CHECK(measured == doctest::Approx(expected).epsilon(1e-12));
    for (auto& blk : r.traces[0].blocks) {
        CHECK(blk.skipped);
        CHECK(blk.heads_kept() == c.num_heads);   // recorded as all-ones
        CHECK(blk.tokens_kept() == c.num_tokens);
    }
    CHECK(r.traces[0].flops.ratio < 0.5);
    CHECK(r.traces[0].flops.ratio > 0.0);
    CHECK(r.traces[0].flops.ratio ==
          doctest::Approx(expected / r.traces[0].flops.total).epsilon(1e-12));
}

TEST_CASE("eval-mode controller decisions are identical across repeated calls") {
    MIAConfig c = tiny();
    Model m = Model::init(c, 123);
    Batch b = random_batch(c, 3, 77);
    auto t1 = m.evaluate(b);
    auto t2 = m.evaluate(b);
    REQUIRE(t1.size() == t2.size());
    for (size_t s = 0; s < t1.size(); ++s)
        for (int l = 0; l < c.num_blocks; ++l) {
            CHECK(t1[s].blocks[l].d_block == t2[s].blocks[l].d_block);
            CHECK(t1[s].blocks[l].d_heads == t2[s].blocks[l].d_heads);
            CHECK(t1[s].blocks[l].d_tokens == t2[s].blocks[l].d_tokens);
            CHECK(t1[s].blocks[l].g_block == t2[s].blocks[l].g_block);
        }
}

TEST_CASE("train-mode decisions are reproducible under a reseeded rng") {
    MIAConfig c = tiny();
    Model m = Model::init(c, 321);
    Batch b = random_batch(c, 2, 5);
    auto run = [&](uint64_t seed) {
        Rng rng(seed);
        Graph g(false);
        ForwardOptions fo;
        fo.mode = RunMode::train;
        fo.tau = 1.0;
        fo.rng = &rng;
        return m.forward(g, b, fo);
    };
    ForwardResult r1 = run(99), r2 = run(99), r3 = run(100);
    bool any_diff = false;
    for (int s = 0; s < 2; ++s)
        for (int l = 0; l < c.num_blocks; ++l) {
            CHECK(r1.traces[s].blocks[l].d_block == r2.traces[s].blocks[l].d_block);
            CHECK(r1.traces[s].blocks[l].d_heads == r2.traces[s].blocks[l].d_heads);
            CHECK(r1.traces[s].blocks[l].d_tokens == r2.traces[s].blocks[l].d_tokens);
            if (r1.traces[s].blocks[l].d_heads != r3.traces[s].blocks[l].d_heads) any_diff = true;
            if (r1.traces[s].blocks[l].d_block != r3.traces[s].blocks[l].d_block) any_diff = true;
        }
    CHECK(any_diff);  // different seed actually changes something
}

TEST_CASE("actor/critic heads: tie actions keep, constant critic bias is the value") {
    MIAConfig c = tiny();
    Model m = Model::init(c, 31);
    Rng hr(5);
    m.install_rl_heads(hr);
    for (int l = 0; l < c.num_blocks; ++l) {
        std::string p = "ctrl.b" + std::to_string(l) + ".";
        for (const char* n : {"actor_b.w", "actor_h.w", "actor_n.w"}) set_tensor(m, p + n, 0.0);
        for (const char* n : {"actor_b.b", "actor_h.b", "actor_n.b"}) set_tensor(m, p + n, 0.0);
        for (const char* n : {"critic_b.w", "critic_h.w", "critic_n.w"}) set_tensor(m, p + n, 0.0);
        for (const char* n : {"critic_b.b", "critic_h.b", "critic_n.b"}) set_tensor(m, p + n, 0.3);
    }
    Batch b = random_batch(c, 1, 6);

    // eval: argmax with ties kept -> everything on
    auto traces = m.evaluate(b);
    for (auto& blk : traces[0].blocks) {
        CHECK(blk.d_block == 1);
        CHECK(blk.heads_kept() == c.num_heads);
        CHECK(blk.tokens_kept() == c.num_tokens);
    }

    // train: values are the bias; per-decision entropy is ln 2 exactly
    Rng rng(17);
    Graph g;
    ForwardOptions fo;
    fo.mode = RunMode::train;
    fo.tau = 0.5;
    fo.rng = &rng;
    ForwardResult r = m.forward(g, b, fo);
    REQUIRE(!r.a2c[0].empty());
    double ent_sum = 0.0;
    int decisions = 0;
    for (auto& grp : r.a2c[0]) {
        CHECK(grp.value_val == doctest::Approx(0.3).epsilon(1e-12));
        ent_sum += g.val(grp.entropy).v[0];
        decisions += grp.count;
    }
    CHECK(ent_sum / decisions == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("straight-through gradients match finite differences on the soft path") {
    MIAConfig c = tiny();
    c.num_blocks = 2;  // keep the probe loop cheap
    c = validate_config(c);
    Model m = Model::init(c, 2025);
    Batch b = random_batch(c, 2, 33);
    const uint64_t seed = 31337;
    const double tau = 1.0;

    auto loss_of = [&](Graph& g, Model& mm, const ForwardOptions& fo) {
        ForwardResult r = mm.forward(g, b, fo);
        VarId task = g.cross_entropy(r.logits, b.labels);
        VarId cost = g.constant(Tensor::scalar(0.0));
        for (auto& tr : r.traces)
            cost = g.add(cost, differentiable_cost(g, tr.blocks, c, c.dims));
        return std::pair<VarId, ForwardResult>(g.add(task, g.scale(cost, 1.0 / b.size)),
                                               std::move(r));
    };

    // analytic gradients w.r.t. every controller logit
    Graph g;
    Rng rng(seed);
    ForwardOptions fo;
    fo.mode = RunMode::train;
    fo.tau = tau;
    fo.rng = &rng;
    fo.record_logits = true;
    auto [loss, result] = loss_of(g, m, fo);
    g.backward(loss);

    int checked = 0;
    for (int s = 0; s < b.size; ++s)
        for (int l = 0; l < c.num_blocks; ++l) {
            const ControllerLogitVars& lv = result.logit_vars[s][l];
            struct Probe {
                char dim;
                VarId var;
                int count;
            };
            for (const Probe& pr : {Probe{'b', lv.block, 1},
                                    Probe{'h', lv.heads, c.num_heads},
                                    Probe{'n', lv.tokens, c.num_tokens}}) {
                if (pr.var == kNoVar) continue;
                const Tensor& gr = g.grad_of(pr.var);
                REQUIRE(!gr.empty());
                for (int i = 0; i < pr.count; i += (pr.dim == 'n' ? 5 : 1)) {
                    double eps = 1e-5;
                    double f[2];
                    for (int sgn = 0; sgn < 2; ++sgn) {
                        StProbe probe{s, l, pr.dim, i, sgn == 0 ? eps : -eps};
                        Graph gp(false);
                        Rng rp(seed);
                        ForwardOptions fp;
                        fp.mode = RunMode::train;
                        fp.tau = tau;
                        fp.rng = &rp;
                        fp.probe = &probe;
                        f[sgn] = gp.val(loss_of(gp, m, fp).first).v[0];
                    }
                    double fd = (f[0] - f[1]) / (2 * eps);
                    double ad = gr.v[i];
                    CHECK(std::abs(fd - ad) <=
                          1e-3 * std::max({std::abs(fd), std::abs(ad), 1e-6}));
                    ++checked;
                }
            }
        }
    CHECK(checked >= 20);
}
