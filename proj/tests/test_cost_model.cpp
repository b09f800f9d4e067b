#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mia/cost_model.hpp"
#include "mia/model.hpp"
#include "mia/rng.hpp"

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
    return b;
}

MaskBundle random_policy(const MIAConfig& c, Rng& rng) {
    MaskBundle b;
    b.d_block = rng.uniform() < 0.25 ? 0 : 1;
    b.d_heads.assign(c.num_heads, 1);
    b.d_tokens.assign(c.num_tokens, 1);
    if (b.d_block == 0) {
        b.skipped = c.dims.depth;
        b.d_block = b.skipped ? 0 : 1;
        return b;
    }
    for (auto& d : b.d_heads) d = rng.uniform() < 0.6 ? 1 : 0;
    for (auto& d : b.d_tokens) d = rng.uniform() < 0.6 ? 1 : 0;
    return b;
}

// measured gemm FLOPs of one forced-policy eval forward
double instrumented_flops(Model& m, const Batch& b, const std::vector<MaskBundle>& policy) {
    Graph g(false);
    ForwardOptions fo;
    fo.mode = RunMode::eval;
    fo.force.kind = ForcePolicy::Kind::explicit_masks;
    fo.force.masks = {policy};
    FlopCounter::reset();
    m.forward(g, b, fo);
    double measured = FlopCounter::flops;
    FlopCounter::stop();
    return measured;
}

}  // namespace

TEST_CASE("block_flops edge cases and scaling laws") {
    MIAConfig c = tiny();
    c.use_class_token = false;
    c = validate_config(c);
    BlockFlops z1 = block_flops(0, 8, c);
    CHECK(z1.msa == 0.0);
    CHECK(z1.mlp == 0.0);
    BlockFlops z2 = block_flops(3, 0, c);
    CHECK(z2.msa == 0.0);
    CHECK(z2.mlp == 0.0);

    // halving active heads at fixed tokens scales the MLP by exactly 1/4
    BlockFlops full = block_flops(4, 16, c);
    BlockFlops half = block_flops(2, 16, c);
    CHECK(half.mlp == full.mlp / 4.0);

    CHECK_THROWS_AS(block_flops(5, 16, c), std::out_of_range);
    CHECK_THROWS_AS(block_flops(4, 17, c), std::out_of_range);
    CHECK_THROWS_AS(block_flops(-1, 4, c), std::out_of_range);
}

TEST_CASE("controller_flops: skipped is strictly cheaper; disabled dims cost nothing") {
    MIAConfig c = tiny();
    CHECK(controller_flops(c, true) < controller_flops(c, false));
    CHECK(controller_flops(c, true) > 0.0);
    ActiveDims none{false, false, false};
    CHECK(controller_flops(c, false, none) == 0.0);
    ActiveDims token_only{false, false, true};
    CHECK(controller_flops(c, false, token_only) > 0.0);
    // depth-only gating has no head/token branches, so skipping one block
    // saves only that block's compute, not controller work
    ActiveDims depth_only{true, false, false};
    CHECK(controller_flops(c, true, depth_only) == controller_flops(c, false, depth_only));
    CHECK(controller_flops(c, false, depth_only) < controller_flops(c, false));
}

TEST_CASE("model_flops: all-on trace gives ratio exactly 1") {
    MIAConfig c = tiny();
    std::vector<MaskBundle> blocks(c.num_blocks);
    for (auto& b : blocks) {
        b.d_block = 1;
        b.d_heads.assign(c.num_heads, 1);
        b.d_tokens.assign(c.num_tokens, 1);
    }
    FlopsReport rep = model_flops(blocks, c, c.dims);
    CHECK(rep.ratio == 1.0);
    CHECK(rep.executed == rep.total);
    // per-block entries plus stem and classifier sum exactly to executed
    double sum = rep.embed + rep.classifier;
    for (auto& e : rep.per_block) sum += e.msa + e.mlp + e.controller;
    CHECK(sum == rep.executed);
    CHECK_THROWS_AS(model_flops({}, c, c.dims), std::invalid_argument);
}

TEST_CASE("model_flops matches the instrumented matmul oracle on random policies") {
    std::vector<MIAConfig> configs;
    {
        MIAConfig a;  // TinyViT
        configs.push_back(validate_config(a));
        MIAConfig b;
        b.num_blocks = 3;
        b.num_heads = 2;
        b.head_dim = 8;
        b.image_size = 16;
        b.patch_size = 4;
        b.use_class_token = false;
        b.mlp_ratio = 1.0;
        configs.push_back(validate_config(b));
        MIAConfig d;
        d.num_blocks = 2;
        d.num_heads = 3;
        d.head_dim = 8;
        d.image_size = 24;
        d.patch_size = 8;
        d.num_classes = 7;
        d.mlp_ratio = 2.0;
        configs.push_back(validate_config(d));
    }
    Rng rng(2026);
    for (auto& c : configs) {
        Model m = Model::init(c, rng.next_u64());
        Batch b = random_batch(c, 1, rng.next_u64());
        for (int trial = 0; trial < 12; ++trial) {
            std::vector<MaskBundle> policy;
            for (int l = 0; l < c.num_blocks; ++l) policy.push_back(random_policy(c, rng));
            double measured = instrumented_flops(m, b, policy);
            FlopsReport rep = model_flops(policy, c, c.dims);
            CHECK(std::abs(measured - rep.executed) <= 0.001 * rep.executed);
        }
        // all-on instrumented run equals the analytic total
        std::vector<MaskBundle> on(c.num_blocks);
        for (auto& p : on) {
            p.d_block = 1;
            p.d_heads.assign(c.num_heads, 1);
            p.d_tokens.assign(c.num_tokens, 1);
        }
        double measured = instrumented_flops(m, b, on);
        CHECK(measured == doctest::Approx(total_model_flops(c, c.dims)).epsilon(1e-12));
    }
}

TEST_CASE("all-blocks-skipped ratio equals the controller floor") {
    MIAConfig c = tiny();
    std::vector<MaskBundle> blocks(c.num_blocks);
    for (auto& b : blocks) {
        b.d_block = 0;
        b.skipped = true;
        b.d_heads.assign(c.num_heads, 1);
        b.d_tokens.assign(c.num_tokens, 1);
    }
    FlopsReport rep = model_flops(blocks, c, c.dims);
    double floor = (patch_embed_flops(c) + classifier_flops(c) +
                    c.num_blocks * controller_flops(c, true)) /
                   total_model_flops(c, c.dims);
    CHECK(rep.ratio == doctest::Approx(floor).epsilon(1e-15));
    CHECK(rep.ratio > 0.0);
    CHECK(rep.ratio <= 1.0);
}

TEST_CASE("differentiable_cost equals model_flops exactly on hard masks") {
    MIAConfig c = tiny();
    Rng rng(555);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<MaskBundle> policy;
        for (int l = 0; l < c.num_blocks; ++l) policy.push_back(random_policy(c, rng));
        Graph g(false);
        VarId cost = differentiable_cost(g, policy, c, c.dims);
        FlopsReport rep = model_flops(policy, c, c.dims);
        CHECK(g.val(cost).v[0] == rep.ratio);  // exact: same integer arithmetic
    }
}

TEST_CASE("differentiable_cost gradient matches finite differences and is non-negative") {
    MIAConfig c = tiny();
    Rng rng(777);
    // bundles with leaf mask nodes holding soft values
    auto build = [&](Graph& g, const std::vector<Tensor>& vals, std::vector<Tensor*> sinks) {
        std::vector<MaskBundle> policy;
        for (int l = 0; l < c.num_blocks; ++l) {
            MaskBundle b;
            b.d_block = 1;
            b.d_heads.assign(c.num_heads, 1);
            b.d_tokens.assign(c.num_tokens, 1);
            b.m_block = g.param(vals[l * 3 + 0], sinks.empty() ? nullptr : sinks[l * 3 + 0]);
            b.m_heads = g.param(vals[l * 3 + 1], sinks.empty() ? nullptr : sinks[l * 3 + 1]);
            b.m_tokens = g.param(vals[l * 3 + 2], sinks.empty() ? nullptr : sinks[l * 3 + 2]);
            policy.push_back(std::move(b));
        }
        return differentiable_cost(g, policy, c, c.dims);
    };
    std::vector<Tensor> vals;
    for (int l = 0; l < c.num_blocks; ++l) {
        Tensor mb({1});
        mb.v[0] = rng.uniform_range(0.05, 0.95);
        Tensor mh({c.num_heads}), mn({c.num_tokens});
        for (auto& v : mh.v) v = rng.uniform_range(0.05, 0.95);
        for (auto& v : mn.v) v = rng.uniform_range(0.05, 0.95);
        vals.push_back(mb);
        vals.push_back(mh);
        vals.push_back(mn);
    }
    Graph g;
    std::vector<Tensor> grads;
    for (auto& v : vals) grads.emplace_back(v.shape);
    std::vector<Tensor*> sinks;
    for (auto& t : grads) sinks.push_back(&t);
    VarId cost = build(g, vals, sinks);
    g.backward(cost);

    for (size_t t = 0; t < vals.size(); ++t) {
        for (int64_t i = 0; i < vals[t].numel(); ++i) {
            CHECK(grads[t].v[i] >= 0.0);  // more active compute is never cheaper
            double eps = 1e-6;
            auto up = vals, dn = vals;
            up[t].v[i] += eps;
            dn[t].v[i] -= eps;
            Graph gu(false), gd(false);
            double fu = gu.val(build(gu, up, {})).v[0];
            double fd = gd.val(build(gd, dn, {})).v[0];
            double num = (fu - fd) / (2 * eps);
            CHECK(std::abs(num - grads[t].v[i]) <=
                  1e-6 * std::max({1.0, std::abs(num), std::abs(grads[t].v[i])}));
        }
    }
}

TEST_CASE("flops report CSV has per-block, stem, classifier and summary rows") {
    MIAConfig c = tiny();
    std::vector<MaskBundle> blocks(c.num_blocks);
    for (auto& b : blocks) {
        b.d_block = 1;
        b.d_heads.assign(c.num_heads, 1);
        b.d_tokens.assign(c.num_tokens, 1);
    }
    FlopsReport rep = model_flops(blocks, c, c.dims);
    std::string csv = flops_report_csv_header();
    append_flops_report_csv(csv, 3, rep);
    CHECK(csv.find("sample_id,block,msa,mlp,controller,skipped") == 0);
    CHECK(csv.find("3,0,") != std::string::npos);
    CHECK(csv.find("3,embed,") != std::string::npos);
    CHECK(csv.find("3,classifier,") != std::string::npos);
    CHECK(csv.find("3,summary,") != std::string::npos);
}
