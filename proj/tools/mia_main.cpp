// Command-line driver: dataset generation, the three training stages,
// evaluation, adversarial evaluation, FLOPs reporting, policy tracing and
// the dimension-ablation harness.

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "mia/analytics.hpp"
#include "mia/attacks.hpp"
#include "mia/checkpoint.hpp"
#include "mia/cost_model.hpp"
#include "mia/dataset.hpp"
#include "mia/hash.hpp"
#include "mia/training.hpp"

namespace fs = std::filesystem;
using namespace mia;

namespace {

struct Flags {
    std::string config;
    std::string out;
    std::string ckpt;
    std::string attack = "both";
    std::string dims;
    std::string policy = "controller";
    bool dims_set = false;
    std::optional<long long> seed;
    std::optional<double> target;
    std::optional<double> inherit;
    std::optional<double> beta;
    std::optional<int> epochs;
};

// Rejects concurrent writers to one output directory.
class DirLock {
public:
    explicit DirLock(const std::string& dir) {
        fs::create_directories(dir);
        path_ = (fs::path(dir) / ".lock").string();
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw std::runtime_error("output directory is locked by another run: " + dir +
                                     " (remove " + path_ + " if stale)");
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }

private:
    std::string path_;
    int fd_ = -1;
};

MIAConfig apply_overrides(MIAConfig cfg, const Flags& f) {
    if (f.seed) cfg.seed = *f.seed;
    if (f.target) cfg.target_flops_ratio = *f.target;
    if (f.inherit) cfg.inherit_fraction = *f.inherit;
    if (f.beta) cfg.beta = *f.beta;
    if (f.dims_set) cfg.dims = ActiveDims::from_string(f.dims);
    return validate_config(cfg);
}

// Run config: --config when given, otherwise the checkpoint's embedded one.
MIAConfig run_config(const Flags& f, const Model* from_ckpt) {
    if (!f.config.empty()) return apply_overrides(load_config_file(f.config), f);
    if (from_ckpt) return apply_overrides(from_ckpt->cfg, f);
    throw std::runtime_error("--config required");
}

void adopt_run_config(Model& model, const MIAConfig& run) {
    const MIAConfig& a = model.cfg;
    if (a.num_blocks != run.num_blocks || a.num_heads != run.num_heads ||
        a.head_dim != run.head_dim || a.image_size != run.image_size ||
        a.patch_size != run.patch_size || a.num_classes != run.num_classes ||
        a.use_class_token != run.use_class_token || a.mlp_ratio != run.mlp_ratio ||
        a.controller_hidden != run.controller_hidden ||
        a.head_feature_dim != run.head_feature_dim)
        throw std::runtime_error("--config architecture does not match the checkpoint");
    model.cfg = run;
}

std::string dataset_fingerprint(const DatasetSpec& d) {
    if (d.kind == "synthetic")
        return "synthetic:" + std::to_string(d.seed) + ":" + std::to_string(d.samples) + ":" +
               std::to_string(d.classes);
    if (d.kind == "packed") return "sha256:" + sha256_file_hex(d.path);
    return "sha256:" + sha256_file_hex((fs::path(d.path) / "labels.csv").string());
}

void write_manifest(const std::string& out_dir, const std::string& command, const MIAConfig& cfg) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["command"] = command;
    j["config_hash"] = "sha256:" + sha256_hex(config_to_json_text(cfg));
    j["dataset"] = dataset_fingerprint(cfg.dataset);
    j["seed"] = cfg.seed;
    j["single_thread"] = true;  // implementation is single-threaded throughout
    std::ofstream f(fs::path(out_dir) / "manifest.json");
    if (!f) throw std::runtime_error("cannot write manifest in " + out_dir);
    f << j.dump(2) << "\n";
}

int cmd_synth_data(const Flags& f) {
    if (f.out.empty()) throw CLI::ValidationError("--out", "required for synth-data");
    MIAConfig cfg = f.config.empty() ? validate_config(MIAConfig{})
                                     : apply_overrides(load_config_file(f.config), f);
    uint64_t seed = f.seed ? static_cast<uint64_t>(*f.seed) : cfg.dataset.seed;
    Dataset d = synth_generate(cfg.dataset.classes, cfg.dataset.samples, seed);
    fs::create_directories(fs::path(f.out).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(f.out).parent_path());
    write_packed(d, f.out);
    nlohmann::json j;
    j["schema_version"] = 1;
    j["command"] = "synth-data";
    j["samples"] = d.n;
    j["classes"] = d.classes;
    j["seed"] = seed;
    j["sha256"] = sha256_file_hex(f.out);
    std::ofstream mf(f.out + ".manifest.json");
    mf << j.dump(2) << "\n";
    std::printf("wrote %s (%d samples, %d classes, seed %llu)\n", f.out.c_str(), d.n, d.classes,
                static_cast<unsigned long long>(seed));
    return 0;
}

int cmd_cotrain(const Flags& f) {
    if (f.out.empty()) throw CLI::ValidationError("--out", "required for cotrain");
    DirLock lock(f.out);
    Model model = [&] {
        if (!f.ckpt.empty()) return load_checkpoint(f.ckpt).model;
        MIAConfig cfg = run_config(f, nullptr);
        return Model::init(cfg, cfg.seed);
    }();
    CheckpointMeta meta = f.ckpt.empty() ? CheckpointMeta{} : load_checkpoint(f.ckpt).meta;
    MIAConfig run = run_config(f, &model);
    adopt_run_config(model, run);
    DatasetHandle data = load_dataset(model.cfg.dataset);
    Rng rng(mix_seed(model.cfg.seed, 0x7a31ULL));

    if (model.cfg.dims.none()) {
        int epochs = f.epochs ? *f.epochs : model.cfg.train.dense_epochs;
        auto rep = train_dense(model, meta, data, f.out, epochs, rng);
        if (std::find(meta.completed.begin(), meta.completed.end(), "dense") ==
            meta.completed.end())
            meta.completed.push_back("dense");
        meta.stage = "dense";
        save_checkpoint(model, meta, (fs::path(f.out) / "ckpt").string());
        write_manifest(f.out, "cotrain", model.cfg);
        std::printf("dense training done: epochs=%d val_acc=%.4f\n", rep.epochs_run,
                    rep.final_clean_acc);
        return 0;
    }
    int epochs = f.epochs ? *f.epochs : model.cfg.train.stage2_epochs;
    auto rep = run_stage2(model, meta, data, f.out, epochs, rng);
    meta.stage = "stage2";
    save_checkpoint(model, meta, (fs::path(f.out) / "ckpt").string());
    write_manifest(f.out, "cotrain", model.cfg);
    std::printf("stage2 done: epochs=%d exec_ratio=%.4f val_acc=%.4f\n", rep.epochs_run,
                rep.final_exec_ratio, rep.final_clean_acc);
    return 0;
}

int cmd_pretrain_controller(const Flags& f) {
    if (f.ckpt.empty()) throw CLI::ValidationError("--ckpt", "required for pretrain-controller");
    if (f.out.empty()) throw CLI::ValidationError("--out", "required for pretrain-controller");
    DirLock lock(f.out);
    auto loaded = load_checkpoint(f.ckpt);
    adopt_run_config(loaded.model, run_config(f, &loaded.model));
    DatasetHandle data = load_dataset(loaded.model.cfg.dataset);
    Rng rng(mix_seed(loaded.model.cfg.seed, 0x57a6e1ULL));
    auto rep = run_stage1(loaded.model, loaded.meta, data, f.out, rng);
    loaded.meta.stage = "stage1";
    save_checkpoint(loaded.model, loaded.meta, (fs::path(f.out) / "ckpt").string());
    write_manifest(f.out, "pretrain-controller", loaded.model.cfg);
    std::printf("stage1 done: epochs=%d (hard pretrain loss reached 0)\n", rep.epochs_run);
    return 0;
}

int cmd_finetune_rl(const Flags& f) {
    if (f.ckpt.empty()) throw CLI::ValidationError("--ckpt", "required for finetune-rl");
    if (f.out.empty()) throw CLI::ValidationError("--out", "required for finetune-rl");
    DirLock lock(f.out);
    auto loaded = load_checkpoint(f.ckpt);
    adopt_run_config(loaded.model, run_config(f, &loaded.model));
    Model model = inherit_weights(loaded.model, loaded.model.cfg.inherit_fraction,
                                  mix_seed(loaded.model.cfg.seed, 0x1e4e217ULL));
    CheckpointMeta meta = loaded.meta;
    DatasetHandle data = load_dataset(model.cfg.dataset);
    if (f.epochs) model.cfg.train.stage3_total_epochs = *f.epochs;
    Rng rng(mix_seed(model.cfg.seed, 0x57a6e3ULL));
    auto rep = run_stage3(model, meta, data, f.out, rng);
    meta.stage = "stage3";
    save_checkpoint(model, meta, (fs::path(f.out) / "ckpt").string());
    write_manifest(f.out, "finetune-rl", model.cfg);
    std::printf("stage3 done: epochs=%d exec_ratio=%.4f val_acc=%.4f\n", rep.epochs_run,
                rep.final_exec_ratio, rep.final_clean_acc);
    return 0;
}

int cmd_eval(const Flags& f) {
    if (f.ckpt.empty()) throw CLI::ValidationError("--ckpt", "required for eval");
    auto loaded = load_checkpoint(f.ckpt);
    adopt_run_config(loaded.model, run_config(f, &loaded.model));
    DatasetHandle data = load_dataset(loaded.model.cfg.dataset);
    std::vector<SampleTrace> traces;
    auto ev = evaluate_model(loaded.model, data, data.val_idx, loaded.model.cfg.train.batch_size,
                             &traces);
    std::printf("val_acc=%.4f exec_ratio=%.4f (excl controller %.4f) n=%d\n", ev.accuracy,
                ev.exec_ratio_mean, ev.exec_ratio_excl_ctrl, ev.n);
    if (!f.out.empty()) {
        DirLock lock(f.out);
        std::ofstream ef(fs::path(f.out) / "eval.csv");
        ef << "checkpoint,n,accuracy,exec_ratio_mean,exec_ratio_std,exec_ratio_excl_ctrl\n";
        char buf[320];
        std::snprintf(buf, sizeof(buf), "%s,%d,%.10g,%.10g,%.10g,%.10g\n", f.ckpt.c_str(), ev.n,
                      ev.accuracy, ev.exec_ratio_mean, ev.exec_ratio_std, ev.exec_ratio_excl_ctrl);
        ef << buf;
        std::string fr = flops_report_csv_header();
        for (auto& t : traces) append_flops_report_csv(fr, t.sample_id, t.flops);
        std::ofstream ff(fs::path(f.out) / "flops.csv");
        ff << fr;
        write_manifest(f.out, "eval", loaded.model.cfg);
    }
    return 0;
}

int cmd_attack_eval(const Flags& f) {
    if (f.ckpt.empty()) throw CLI::ValidationError("--ckpt", "required for attack-eval");
    auto loaded = load_checkpoint(f.ckpt);
    adopt_run_config(loaded.model, run_config(f, &loaded.model));
    DatasetHandle data = load_dataset(loaded.model.cfg.dataset);
    std::vector<AttackSpec> attacks;
    if (f.attack == "pgd" || f.attack == "both") attacks.push_back(AttackSpec::pgd_default());
    if (f.attack == "fgsm" || f.attack == "both") attacks.push_back(AttackSpec::fgsm_default());
    if (attacks.empty()) throw CLI::ValidationError("--attack", "must be pgd, fgsm or both");
    std::vector<int> idx(data.val_idx.begin(),
                         data.val_idx.begin() + std::min<size_t>(data.val_idx.size(), 512));
    auto rows = evaluate_attacks(loaded.model, data, idx, loaded.model.cfg.train.batch_size,
                                 attacks);
    std::string csv = attack_report_csv(f.ckpt, rows);
    std::fputs(csv.c_str(), stdout);
    if (!f.out.empty()) {
        DirLock lock(f.out);
        std::ofstream of(fs::path(f.out) / "attack_report.csv");
        of << csv;
        write_manifest(f.out, "attack-eval", loaded.model.cfg);
    }
    return 0;
}

int cmd_flops(const Flags& f) {
    if (f.ckpt.empty()) throw CLI::ValidationError("--ckpt", "required for flops");
    auto loaded = load_checkpoint(f.ckpt);
    adopt_run_config(loaded.model, run_config(f, &loaded.model));
    const MIAConfig& cfg = loaded.model.cfg;
    if (f.policy == "all-on") {
        std::printf("ratio %.6f\n", 1.0);
        return 0;
    }
    if (f.policy == "all-skip") {
        std::vector<MaskBundle> blocks(cfg.num_blocks);
        for (auto& b : blocks) {
            b.d_block = 0;
            b.skipped = cfg.dims.depth;
            b.d_heads.assign(cfg.num_heads, 1);
            b.d_tokens.assign(cfg.num_tokens, 1);
        }
        FlopsReport rep = model_flops(blocks, cfg, cfg.dims);
        std::printf("ratio %.6f (executed %.0f of %.0f)\n", rep.ratio, rep.executed, rep.total);
        return 0;
    }
    DatasetHandle data = load_dataset(cfg.dataset);
    auto ev = evaluate_model(loaded.model, data, data.val_idx, cfg.train.batch_size);
    std::printf("ratio %.6f (mean over %d val samples; excl controller %.6f)\n",
                ev.exec_ratio_mean, ev.n, ev.exec_ratio_excl_ctrl);
    return 0;
}

int cmd_trace_policy(const Flags& f) {
    if (f.ckpt.empty()) throw CLI::ValidationError("--ckpt", "required for trace-policy");
    if (f.out.empty()) throw CLI::ValidationError("--out", "required for trace-policy");
    auto loaded = load_checkpoint(f.ckpt);
    adopt_run_config(loaded.model, run_config(f, &loaded.model));
    DatasetHandle data = load_dataset(loaded.model.cfg.dataset);
    DirLock lock(f.out);
    std::vector<SampleTrace> traces;
    evaluate_model(loaded.model, data, data.val_idx, loaded.model.cfg.train.batch_size, &traces);
    std::ofstream(fs::path(f.out) / "traces.csv") << trace_csv(traces);
    std::ofstream(fs::path(f.out) / "traces_rle.csv") << trace_rle_sidecar(traces);
    std::ofstream(fs::path(f.out) / "skip_ratios.csv")
        << skip_ratio_csv(skip_ratio_stats(traces, loaded.model.cfg));
    int grids = std::min<int>(8, static_cast<int>(traces.size()));
    for (int i = 0; i < grids; ++i)
        export_policy_grid(traces[i], loaded.model.cfg,
                           (fs::path(f.out) / ("policy_sample" + std::to_string(i) + ".svg"))
                               .string());
    write_manifest(f.out, "trace-policy", loaded.model.cfg);
    std::printf("wrote traces for %zu samples to %s\n", traces.size(), f.out.c_str());
    return 0;
}

int cmd_ablate(const Flags& f) {
    if (f.out.empty()) throw CLI::ValidationError("--out", "required for ablate");
    MIAConfig cfg = run_config(f, nullptr);
    DatasetHandle data = load_dataset(cfg.dataset);
    DirLock lock(f.out);
    AblationOptions opt;
    if (f.epochs) opt.stage2_epochs = *f.epochs;
    auto rows = ablation_harness(cfg, data, f.out, opt);
    write_manifest(f.out, "ablate", cfg);
    std::fputs(ablation_csv(rows).c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mia: input-adaptive vision transformer trainer and evaluator"};
    app.require_subcommand(1);

    Flags f;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", f.config, "config file (JSON)");
        sub->add_option("--seed", f.seed, "seed override");
        sub->add_option("--target-flops-ratio", f.target, "target executed/total FLOPs ratio");
        sub->add_option("--inherit", f.inherit, "inherited controller weight fraction (rho)");
        sub->add_option("--beta", f.beta, "reward trade-off weight");
        sub->add_option("--epochs", f.epochs, "epoch count override");
        sub->add_option("--out", f.out, "output directory (or file for synth-data)");
        sub->add_option("--ckpt", f.ckpt, "checkpoint directory");
        sub->add_option("--attack", f.attack, "pgd | fgsm | both");
        sub->add_option("--dims", f.dims, "active dynamic dimensions, e.g. head,depth,token")
            ->each([&](const std::string&) { f.dims_set = true; });
    };

    auto* synth = app.add_subcommand("synth-data", "generate the synthetic dataset");
    auto* pre = app.add_subcommand("pretrain-controller", "stage 1: controller pretraining");
    auto* cot = app.add_subcommand("cotrain",
                                   "stage 2 co-training (or plain backbone training with --dims \"\")");
    auto* rl = app.add_subcommand("finetune-rl", "stage 3: hybrid RL finetuning");
    auto* ev = app.add_subcommand("eval", "clean evaluation of a checkpoint");
    auto* att = app.add_subcommand("attack-eval", "adversarial evaluation (PGD / FGSM-L2)");
    auto* fl = app.add_subcommand("flops", "FLOPs ratio of a checkpoint under a policy");
    fl->add_option("--policy", f.policy, "all-on | all-skip | controller");
    auto* tp = app.add_subcommand("trace-policy", "export per-sample skipping policies");
    auto* ab = app.add_subcommand("ablate", "dimension-ablation harness (8 subsets)");
    for (CLI::App* sub : {synth, pre, cot, rl, ev, att, fl, tp, ab}) add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 1;
    }

    // Deterministic single-threaded execution is the only mode; the switch
    // is accepted for compatibility with the documented interface.
    (void)std::getenv("MIA_SINGLE_THREAD");

    try {
        if (synth->parsed()) return cmd_synth_data(f);
        if (pre->parsed()) return cmd_pretrain_controller(f);
        if (cot->parsed()) return cmd_cotrain(f);
        if (rl->parsed()) return cmd_finetune_rl(f);
        if (ev->parsed()) return cmd_eval(f);
        if (att->parsed()) return cmd_attack_eval(f);
        if (fl->parsed()) return cmd_flops(f);
        if (tp->parsed()) return cmd_trace_policy(f);
        if (ab->parsed()) return cmd_ablate(f);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
