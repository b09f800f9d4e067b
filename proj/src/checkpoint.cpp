#include "mia/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mia/hash.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mia {

namespace {

constexpr int kCkptSchema = 1;

void write_f32(const std::string& path, const Tensor& t, bool round_live, Tensor* live) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot write tensor file: " + path);
    std::vector<float> buf(t.v.size());
    for (size_t i = 0; i < t.v.size(); ++i) buf[i] = static_cast<float>(t.v[i]);
    f.write(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(float));
    if (!f) throw CheckpointError("short write: " + path);
    if (round_live && live)
        for (size_t i = 0; i < buf.size(); ++i) live->v[i] = static_cast<double>(buf[i]);
}

void read_f32(const std::string& path, Tensor& t) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("tensor file missing: " + path);
    std::vector<float> buf(t.v.size());
    f.read(reinterpret_cast<char*>(buf.data()), buf.size() * sizeof(float));
    if (!f || f.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        throw CheckpointError("tensor file truncated: " + path);
    for (size_t i = 0; i < buf.size(); ++i) t.v[i] = static_cast<double>(buf[i]);
}

}  // namespace

void save_checkpoint(Model& model, CheckpointMeta meta, const std::string& dir,
                     bool with_optimizer) {
    fs::create_directories(fs::path(dir) / "tensors");
    json manifest;
    manifest["schema_version"] = kCkptSchema;
    std::string cfg_text = config_to_json_text(model.cfg);
    manifest["config"] = json::parse(cfg_text);
    manifest["config_hash"] = sha256_hex(cfg_text);
    manifest["stage"] = meta.stage;
    manifest["epoch"] = meta.epoch;
    manifest["tau"] = meta.tau;
    manifest["opt_step"] = meta.opt_step;
    manifest["rng_state"] = meta.rng_state;
    manifest["completed"] = meta.completed;
    manifest["rl_heads"] = model.rl_heads;
    manifest["has_optimizer"] = with_optimizer;
    json tensors = json::array();
    for (auto& p : model.params.items) {
        json t;
        t["name"] = p.name;
        t["group"] = param_group_name(p.group);
        t["shape"] = p.value.shape;
        t["file"] = "tensors/" + p.name + ".f32";
        t["dtype"] = "f32le";
        tensors.push_back(t);
        write_f32((fs::path(dir) / "tensors" / (p.name + ".f32")).string(), p.value, true,
                  &p.value);
        if (with_optimizer) {
            write_f32((fs::path(dir) / "tensors" / (p.name + ".m.f32")).string(), p.m, true, &p.m);
            write_f32((fs::path(dir) / "tensors" / (p.name + ".v.f32")).string(), p.v, true, &p.v);
        }
    }
    manifest["tensors"] = tensors;
    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw CheckpointError("cannot write manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw CheckpointError("checkpoint manifest missing in " + dir);
    json manifest;
    try {
        f >> manifest;
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("manifest parse error: ") + e.what());
    }
    if (manifest.at("schema_version").get<int>() != kCkptSchema)
        throw CheckpointError("unsupported checkpoint schema version");

    MIAConfig cfg = config_from_json_text(manifest.at("config").dump());
    LoadedCheckpoint out{Model::init(cfg, 0), {}};
    if (manifest.value("rl_heads", false)) {
        Rng dummy(0);
        out.model.install_rl_heads(dummy);
    }
    out.meta.stage = manifest.value("stage", "init");
    out.meta.epoch = manifest.value("epoch", 0);
    out.meta.tau = manifest.value("tau", 0.0);
    out.meta.opt_step = manifest.value("opt_step", int64_t{0});
    out.meta.rng_state = manifest.value("rng_state", std::string());
    out.meta.has_optimizer = manifest.value("has_optimizer", false);
    if (manifest.contains("completed"))
        out.meta.completed = manifest["completed"].get<std::vector<std::string>>();

    for (const auto& t : manifest.at("tensors")) {
        std::string name = t.at("name").get<std::string>();
        int id = out.model.params.find(name);
        if (id < 0) throw CheckpointError("checkpoint tensor unknown to this config: " + name);
        ParamTensor& p = out.model.params.at(id);
        auto shape = t.at("shape").get<std::vector<int>>();
        if (shape != p.value.shape)
            throw CheckpointError("checkpoint tensor shape mismatch: " + name);
        read_f32((fs::path(dir) / t.at("file").get<std::string>()).string(), p.value);
        if (out.meta.has_optimizer) {
            read_f32((fs::path(dir) / ("tensors/" + name + ".m.f32")).string(), p.m);
            read_f32((fs::path(dir) / ("tensors/" + name + ".v.f32")).string(), p.v);
        }
    }
    return out;
}

}  // namespace mia
