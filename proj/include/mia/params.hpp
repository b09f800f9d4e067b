#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mia/rng.hpp"
#include "mia/tensor.hpp"

namespace mia {

enum class ParamGroup {
    backbone,
    ctrl_trunk,  // controller weights below the final decision FCs
    ctrl_gate,   // stage-1/2 final decision FCs (replaced in stage 3)
    actor,
    critic,
};

inline const char* param_group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::backbone: return "backbone";
        case ParamGroup::ctrl_trunk: return "ctrl_trunk";
        case ParamGroup::ctrl_gate: return "ctrl_gate";
        case ParamGroup::actor: return "actor";
        case ParamGroup::critic: return "critic";
    }
    return "?";
}

struct ParamTensor {
    std::string name;
    ParamGroup group;
    Tensor value;
    Tensor grad;
    // optimizer accumulators (adaptive moments)
    Tensor m;
    Tensor v;
};

struct ParamStore {
    std::vector<ParamTensor> items;
    std::unordered_map<std::string, int> by_name;

    int add(const std::string& name, ParamGroup group, Tensor init) {
        if (by_name.count(name)) throw std::runtime_error("duplicate parameter: " + name);
        ParamTensor p;
        p.name = name;
        p.group = group;
        p.grad = Tensor(init.shape);
        p.m = Tensor(init.shape);
        p.v = Tensor(init.shape);
        p.value = std::move(init);
        items.push_back(std::move(p));
        int id = static_cast<int>(items.size()) - 1;
        by_name[name] = id;
        return id;
    }

    ParamTensor& at(int id) { return items[id]; }
    const ParamTensor& at(int id) const { return items[id]; }

    int find(const std::string& name) const {
        auto it = by_name.find(name);
        return it == by_name.end() ? -1 : it->second;
    }

    void zero_grad() {
        for (auto& p : items) p.grad.fill(0.0);
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& p : items) n += p.value.numel();
        return n;
    }
};

// init helpers
inline Tensor normal_init(std::vector<int> shape, double std_dev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& e : t.v) e = std_dev * rng.gaussian();
    return t;
}

}  // namespace mia
