#pragma once

#include <cstdint>
#include <vector>

#include "mia/autodiff.hpp"

namespace mia {

// Per-block decisions for one sample: hard masks with their soft
// relaxations, plus tape handles for the straight-through mask nodes when
// a graph is being built. For a skipped block (d_block == 0) the head and
// token entries are recorded as all-ones and `skipped` is set; those
// branches were never evaluated.
struct MaskBundle {
    bool skipped = false;
    int d_block = 1;
    double g_block = 1.0;
    std::vector<uint8_t> d_heads;
    std::vector<double> g_heads;
    std::vector<uint8_t> d_tokens;
    std::vector<double> g_tokens;

    VarId m_block = kNoVar;
    VarId m_heads = kNoVar;
    VarId m_tokens = kNoVar;
    // soft relaxations (pre-round), used by the controller pretrain loss
    VarId s_block = kNoVar;
    VarId s_heads = kNoVar;
    VarId s_tokens = kNoVar;

    int heads_kept() const {
        int k = 0;
        for (auto d : d_heads) k += d;
        return k;
    }
    int tokens_kept() const {
        int k = 0;
        for (auto d : d_tokens) k += d;
        return k;
    }
};

}  // namespace mia
