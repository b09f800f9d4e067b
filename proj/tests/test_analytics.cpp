#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mia/analytics.hpp"
#include "mia/training.hpp"

using namespace mia;

namespace {

MIAConfig tiny() { return validate_config(MIAConfig{}); }

SampleTrace make_trace(const MIAConfig& c, int64_t id,
                       const std::vector<int>& d_block,
                       const std::vector<std::vector<uint8_t>>& heads,
                       const std::vector<std::vector<uint8_t>>& tokens) {
    SampleTrace t;
    t.sample_id = id;
    for (int l = 0; l < c.num_blocks; ++l) {
        MaskBundle b;
        b.d_block = d_block[l];
        b.skipped = d_block[l] == 0;
        if (b.skipped) {
            b.d_heads.assign(c.num_heads, 1);
            b.d_tokens.assign(c.num_tokens, 1);
        } else {
            b.d_heads = heads[l];
            b.d_tokens = tokens[l];
        }
        t.blocks.push_back(std::move(b));
    }
    return t;
}

SampleTrace all_on_trace(const MIAConfig& c, int64_t id) {
    std::vector<std::vector<uint8_t>> h(c.num_blocks, std::vector<uint8_t>(c.num_heads, 1));
    std::vector<std::vector<uint8_t>> n(c.num_blocks, std::vector<uint8_t>(c.num_tokens, 1));
    return make_trace(c, id, std::vector<int>(c.num_blocks, 1), h, n);
}

}  // namespace

TEST_CASE("skip ratios: zeros for all-on, ones for all-skipped, exact fractions otherwise") {
    MIAConfig c = tiny();
    std::vector<SampleTrace> on = {all_on_trace(c, 0), all_on_trace(c, 1)};
    auto rows = skip_ratio_stats(on, c);
    REQUIRE(static_cast<int>(rows.size()) == c.num_blocks);
    for (auto& r : rows) {
        CHECK(r.block_skip == 0.0);
        CHECK(r.head_skip == 0.0);
        CHECK(r.token_skip == 0.0);
        CHECK(r.executed_count == 2);
    }

    std::vector<SampleTrace> skipped = {
        make_trace(c, 0, std::vector<int>(c.num_blocks, 0), {}, {})};
    auto rows2 = skip_ratio_stats(skipped, c);
    for (auto& r : rows2) {
        CHECK(r.block_skip == 1.0);
        CHECK(r.executed_count == 0);
    }

    // block 0: one sample keeps 2/4 heads and 12/16 tokens, other sample all on
    std::vector<std::vector<uint8_t>> h(c.num_blocks, std::vector<uint8_t>(c.num_heads, 1));
    std::vector<std::vector<uint8_t>> n(c.num_blocks, std::vector<uint8_t>(c.num_tokens, 1));
    h[0] = {1, 1, 0, 0};
    n[0].assign(c.num_tokens, 1);
    for (int i = 0; i < 4; ++i) n[0][i] = 0;
    std::vector<SampleTrace> mixed = {
        make_trace(c, 0, std::vector<int>(c.num_blocks, 1), h, n), all_on_trace(c, 1)};
    auto rows3 = skip_ratio_stats(mixed, c);
    CHECK(rows3[0].head_skip == doctest::Approx(0.25));   // mean of 0.5 and 0
    CHECK(rows3[0].token_skip == doctest::Approx(0.125)); // mean of 0.25 and 0
    CHECK(rows3[1].head_skip == 0.0);

    CHECK_THROWS_AS(skip_ratio_stats({}, c), AnalyticsError);
    // values are recomputable exact frequencies in [0, 1]
    for (auto& r : rows3) {
        CHECK(r.block_skip >= 0.0);
        CHECK(r.block_skip <= 1.0);
        CHECK(r.head_skip >= 0.0);
        CHECK(r.head_skip <= 1.0);
    }
}

TEST_CASE("policy grid SVG: byte-deterministic, dashed when skipped, full when on") {
    MIAConfig c = tiny();
    SampleTrace on = all_on_trace(c, 0);
    std::string s1 = policy_grid_svg(on, c);
    std::string s2 = policy_grid_svg(on, c);
    CHECK(s1 == s2);
    CHECK(s1.find("stroke-dasharray") == std::string::npos);
    CHECK(s1.find("width=\"80.00\" height=\"80.00\"") != std::string::npos);

    std::vector<int> blocks(c.num_blocks, 1);
    blocks[2] = 0;
    std::vector<std::vector<uint8_t>> h(c.num_blocks, std::vector<uint8_t>(c.num_heads, 1));
    std::vector<std::vector<uint8_t>> n(c.num_blocks, std::vector<uint8_t>(c.num_tokens, 1));
    h[0] = {1, 0, 0, 0};
    SampleTrace t = make_trace(c, 0, blocks, h, n);
    std::string svg = policy_grid_svg(t, c);
    CHECK(svg.find("stroke-dasharray") != std::string::npos);      // the skipped block
    CHECK(svg.find("height=\"20.00\"") != std::string::npos);      // 1/4 heads kept
    CHECK(svg.rfind("</svg>\n") == svg.size() - 7);
}

TEST_CASE("trace CSV and RLE sidecar encode masks faithfully") {
    MIAConfig c = tiny();
    std::vector<int> blocks(c.num_blocks, 1);
    blocks[1] = 0;
    std::vector<std::vector<uint8_t>> h(c.num_blocks, std::vector<uint8_t>(c.num_heads, 1));
    std::vector<std::vector<uint8_t>> n(c.num_blocks, std::vector<uint8_t>(c.num_tokens, 1));
    h[0] = {1, 1, 0, 1};
    for (int i = 5; i < 9; ++i) n[0][i] = 0;
    std::vector<SampleTrace> ts = {make_trace(c, 7, blocks, h, n)};
    std::string csv = trace_csv(ts);
    CHECK(csv.find("sample_id,block,d_block,heads_kept,tokens_kept,skipped,correct") == 0);
    CHECK(csv.find("7,0,1,3,12,0,0") != std::string::npos);
    CHECK(csv.find("7,1,0,4,16,1,0") != std::string::npos);

    std::string rle = trace_rle_sidecar(ts);
    CHECK(rle.find("7,0,head,1x2 0x1 1x1") != std::string::npos);
    CHECK(rle.find("7,0,token,1x5 0x4 1x7") != std::string::npos);
    CHECK(rle.find("7,1,head,1x4") != std::string::npos);
}

TEST_CASE("disabled dimensions produce identically-1 masks end to end") {
    MIAConfig c = tiny();
    c.dims = ActiveDims::from_string("token");
    c.dataset.samples = 64;
    c = validate_config(c);
    Model m = Model::init(c, 15);
    DatasetHandle data = load_dataset(c.dataset);
    Batch b = data.make_batch(data.train_idx, 0, 16);
    // train mode: still no head/depth decisions
    Rng rng(2);
    Graph g;
    ForwardOptions fo;
    fo.mode = RunMode::train;
    fo.tau = 1.0;
    fo.rng = &rng;
    ForwardResult r = m.forward(g, b, fo);
    for (auto& tr : r.traces)
        for (auto& blk : tr.blocks) {
            CHECK(blk.d_block == 1);
            CHECK(!blk.skipped);
            CHECK(blk.heads_kept() == c.num_heads);
        }
    // the flops denominator excludes the disabled branches
    double total = total_model_flops(c, c.dims);
    MIAConfig all = c;
    all.dims = ActiveDims{true, true, true};
    CHECK(total < total_model_flops(all, all.dims));
}

TEST_CASE("empty-dims model runs at ratio exactly 1") {
    MIAConfig c = tiny();
    c.dims = ActiveDims{false, false, false};
    c.dataset.samples = 64;
    c = validate_config(c);
    Model m = Model::init(c, 19);
    DatasetHandle data = load_dataset(c.dataset);
    Batch b = data.make_batch(data.train_idx, 0, 4);
    auto traces = m.evaluate(b);
    for (auto& t : traces) CHECK(t.flops.ratio == 1.0);
}

TEST_CASE("ablation csv lists one row per subset in a fixed order") {
    std::vector<AblationRow> rows(3);
    rows[0].dims = ActiveDims{false, false, false};
    rows[0].exec_ratio = 1.0;
    rows[1].dims = ActiveDims{false, true, false};
    rows[1].accuracy = 0.5;
    rows[2].dims = ActiveDims{true, true, true};
    rows[2].failed = true;
    rows[2].error = "boom";
    std::string csv = ablation_csv(rows);
    CHECK(csv.find("head,depth,token,accuracy,exec_ratio,error") == 0);
    CHECK(csv.find("0,0,0,0,1,") != std::string::npos);
    CHECK(csv.find("1,0,0,0.5,") != std::string::npos);
    CHECK(csv.find("1,1,1,0,1,boom") != std::string::npos);
}
