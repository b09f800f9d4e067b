#include "mia/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mia/cost_model.hpp"

namespace fs = std::filesystem;

namespace mia {

VarId pretrain_loss_soft(Graph& g, const std::vector<MaskBundle>& blocks) {
    if (blocks.empty()) throw TrainingError("pretrain_loss: empty bundle list");
    VarId total = g.constant(Tensor::scalar(0.0));
    for (const auto& b : blocks) {
        VarId term = g.add_scalar(g.scale(b.s_block, -1.0), 1.0);           // 1 - G_b
        VarId h = g.mean(g.add_scalar(g.scale(b.s_heads, -1.0), 1.0));      // mean(1 - G_h)
        VarId n = g.mean(g.add_scalar(g.scale(b.s_tokens, -1.0), 1.0));     // mean(1 - G_n)
        total = g.add(total, g.add(term, g.add(h, n)));
    }
    return total;
}

double pretrain_loss_hard(const std::vector<MaskBundle>& blocks) {
    if (blocks.empty()) throw TrainingError("pretrain_loss: empty bundle list");
    double total = 0.0;
    for (const auto& b : blocks) {
        total += 1.0 - b.d_block;
        double h = 0.0, n = 0.0;
        for (auto d : b.d_heads) h += 1.0 - d;
        for (auto d : b.d_tokens) n += 1.0 - d;
        total += h / b.d_heads.size() + n / b.d_tokens.size();
    }
    return total;
}

double dynamic_alpha(double task_loss, double cost_loss, double exec_ratio, double target_ratio,
                     const MIAConfig& cfg) {
    if (!(cost_loss > 0.0)) throw TrainingError("dynamic_alpha: cost_loss must be positive");
    double mag = cfg.alpha_magnitude * task_loss / cost_loss;
    if (exec_ratio > target_ratio) return mag;
    if (exec_ratio < target_ratio) return -mag;
    return 0.0;
}

RewardRecord compute_reward(int y, double exec_ratio, double target_ratio, double beta) {
    RewardRecord r;
    r.y = y;
    r.exec_ratio = exec_ratio;
    r.target_ratio = target_ratio;
    r.beta = beta;
    r.reward = y + beta * (target_ratio - exec_ratio);
    return r;
}

A2cLosses a2c_losses(Graph& g, const std::vector<A2cGroup>& groups, double reward,
                     double entropy_coeff) {
    if (!std::isfinite(reward)) throw TrainingError("a2c_losses: reward not finite");
    A2cLosses out;
    out.policy = g.constant(Tensor::scalar(0.0));
    out.value = g.constant(Tensor::scalar(0.0));
    VarId ent = g.constant(Tensor::scalar(0.0));
    for (const auto& grp : groups) {
        double advantage = reward - grp.value_val;  // critic as fixed baseline
        out.policy = g.add(out.policy, g.scale(grp.log_prob, -advantage));
        VarId diff = g.add_scalar(g.scale(grp.value, -1.0), reward);
        out.value = g.add(out.value, g.mul(diff, diff));
        ent = g.add(ent, grp.entropy);
    }
    out.entropy_bonus = g.scale(ent, -entropy_coeff);
    return out;
}

double AdamW::step(ParamStore& params, const GroupLrs& lrs, double grad_clip) {
    double norm_sq = 0.0;
    for (auto& p : params.items) {
        if (lrs.get(p.group) == 0.0) continue;
        for (double gv : p.grad.v) norm_sq += gv * gv;
    }
    double norm = std::sqrt(norm_sq);
    double clip_scale = 1.0;
    if (grad_clip > 0.0 && norm > grad_clip) clip_scale = grad_clip / norm;

    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& p : params.items) {
        double lr = lrs.get(p.group);
        if (lr == 0.0) continue;
        bool decay = lrs.weight_decay > 0.0 && p.name.size() > 2 &&
                     p.name.compare(p.name.size() - 2, 2, ".w") == 0;
        for (size_t i = 0; i < p.value.v.size(); ++i) {
            double gv = p.grad.v[i] * clip_scale;
            p.m.v[i] = beta1 * p.m.v[i] + (1.0 - beta1) * gv;
            p.v.v[i] = beta2 * p.v.v[i] + (1.0 - beta2) * gv * gv;
            double mhat = p.m.v[i] / bc1;
            double vhat = p.v.v[i] / bc2;
            double upd = mhat / (std::sqrt(vhat) + eps);
            if (decay) upd += lrs.weight_decay * p.value.v[i];
            p.value.v[i] -= lr * upd;
        }
    }
    return norm;
}

// ---- metrics ------------------------------------------------------------

MetricsPaths metrics_paths(const std::string& out_dir) {
    return {(fs::path(out_dir) / "metrics.csv").string(),
            (fs::path(out_dir) / "steps.csv").string(),
            (fs::path(out_dir) / "rewards.csv").string()};
}

namespace {

class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& out_dir) : paths_(metrics_paths(out_dir)) {
        fs::create_directories(out_dir);
    }

    void epoch_row(const std::string& stage, int epoch, double task, double cost, double alpha,
                   double exec_mean, double exec_std, double reward_mean, double clean_acc) {
        std::ofstream f = open(paths_.epoch_csv,
                               "stage,epoch,task_loss,cost_loss,alpha,exec_ratio_mean,"
                               "exec_ratio_std,reward_mean,clean_acc\n");
        char buf[320];
        std::snprintf(buf, sizeof(buf), "%s,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                      stage.c_str(), epoch, task, cost, alpha, exec_mean, exec_std, reward_mean,
                      clean_acc);
        f << buf;
    }

    void step_row(const std::string& stage, int epoch, int step, double task, double cost,
                  double alpha, double exec) {
        std::ofstream f =
            open(paths_.steps_csv, "stage,epoch,step,task_loss,cost_loss,alpha,exec_ratio\n");
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.17g,%.17g,%.17g,%.17g\n", stage.c_str(), epoch,
                      step, task, cost, alpha, exec);
        f << buf;
    }

    void reward_row(int epoch, int step, int sample, const RewardRecord& r) {
        std::ofstream f = open(paths_.rewards_csv,
                               "stage,epoch,step,sample,y,exec_ratio,target_ratio,beta,reward\n");
        char buf[256];
        std::snprintf(buf, sizeof(buf), "stage3,%d,%d,%d,%d,%.17g,%.17g,%.17g,%.17g\n", epoch,
                      step, sample, r.y, r.exec_ratio, r.target_ratio, r.beta, r.reward);
        f << buf;
    }

private:
    std::ofstream open(const std::string& path, const char* header) {
        bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
        std::ofstream f(path, std::ios::app);
        if (!f) throw TrainingError("cannot write metrics file: " + path);
        if (fresh) f << header;
        return f;
    }

    MetricsPaths paths_;
};

std::vector<std::vector<int>> epoch_batches(const DatasetHandle& data, int batch_size, Rng& rng) {
    std::vector<int> order = data.train_idx;
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (size_t s = 0; s < order.size(); s += batch_size) {
        batches.emplace_back(order.begin() + s,
                             order.begin() + std::min(order.size(), s + batch_size));
        if (batches.back().size() < 2 && batches.size() > 1) {
            batches.pop_back();  // drop 1-sample stragglers
            break;
        }
    }
    return batches;
}

double tau_schedule(const MIAConfig& cfg, int epoch, int total_epochs) {
    if (total_epochs <= 1) return cfg.gumbel_tau_end;
    double f = static_cast<double>(epoch) / (total_epochs - 1);
    return cfg.gumbel_tau_start * std::pow(cfg.gumbel_tau_end / cfg.gumbel_tau_start, f);
}

std::vector<int> probe_indices(const DatasetHandle& data, int cap) {
    const std::vector<int>& src = data.val_idx.empty() ? data.train_idx : data.val_idx;
    std::vector<int> idx(src.begin(), src.begin() + std::min<size_t>(src.size(), cap));
    return idx;
}

}  // namespace

EvalSummary evaluate_model(Model& model, const DatasetHandle& data, const std::vector<int>& idx,
                           int batch_size, std::vector<SampleTrace>* traces_out) {
    if (idx.empty()) throw TrainingError("evaluate_model: empty index set");
    EvalSummary s;
    s.n = static_cast<int>(idx.size());
    int correct = 0;
    double rsum = 0.0, rsq = 0.0, rx = 0.0;
    for (size_t at = 0; at < idx.size(); at += batch_size) {
        std::vector<int> chunk(idx.begin() + at,
                               idx.begin() + std::min(idx.size(), at + batch_size));
        Batch b = data.make_batch(chunk);
        auto traces = model.evaluate(b);
        for (size_t i = 0; i < traces.size(); ++i) {
            traces[i].sample_id = chunk[i];
            if (traces[i].correct()) ++correct;
            double r = traces[i].flops.ratio;
            rsum += r;
            rsq += r * r;
            rx += traces[i].flops.ratio_excl_controller();
            if (traces_out) traces_out->push_back(std::move(traces[i]));
        }
    }
    s.accuracy = static_cast<double>(correct) / s.n;
    s.exec_ratio_mean = rsum / s.n;
    double var = rsq / s.n - s.exec_ratio_mean * s.exec_ratio_mean;
    s.exec_ratio_std = var > 0.0 ? std::sqrt(var) : 0.0;
    s.exec_ratio_excl_ctrl = rx / s.n;
    return s;
}

// ---- dense backbone training ---------------------------------------------

StageReport train_dense(Model& model, CheckpointMeta& meta, const DatasetHandle& data,
                        const std::string& out_dir, int epochs, Rng& rng) {
    MetricsWriter mw(out_dir);
    ActiveDims saved = model.cfg.dims;
    model.cfg.dims = ActiveDims{false, false, false};
    AdamW opt;
    opt.t = meta.opt_step;
    GroupLrs lrs;
    lrs.set(ParamGroup::backbone, model.cfg.train.dense_lr);
    lrs.weight_decay = model.cfg.train.weight_decay;
    StageReport rep;
    for (int e = 0; e < epochs; ++e) {
        auto batches = epoch_batches(data, model.cfg.train.batch_size, rng);
        double task_sum = 0.0;
        int step = 0;
        for (auto& bidx : batches) {
            Batch batch = data.make_batch(bidx);
            Graph g;
            ForwardOptions fo;
            fo.mode = RunMode::train;
            fo.rng = &rng;
            fo.tau = model.cfg.gumbel_tau_start;
            model.params.zero_grad();
            ForwardResult r = model.forward(g, batch, fo);
            VarId loss = g.cross_entropy(r.logits, batch.labels);
            double task = g.val(loss).v[0];
            if (!std::isfinite(task)) throw TrainingError("dense training: loss not finite");
            g.backward(loss);
            opt.step(model.params, lrs, model.cfg.train.grad_clip);
            task_sum += task;
            mw.step_row("dense", meta.epoch, step++, task, 1.0, 0.0, 1.0);
        }
        auto ev = evaluate_model(model, data, probe_indices(data, 256), model.cfg.train.batch_size);
        mw.epoch_row("dense", meta.epoch, task_sum / batches.size(), 1.0, 0.0, 1.0, 0.0, 0.0,
                     ev.accuracy);
        rep.final_task_loss = task_sum / batches.size();
        rep.final_clean_acc = ev.accuracy;
        ++meta.epoch;
        ++rep.epochs_run;
    }
    meta.opt_step = opt.t;
    model.cfg.dims = saved;
    return rep;
}

// ---- stage 1: controller pretraining --------------------------------------

StageReport run_stage1(Model& model, CheckpointMeta& meta, const DatasetHandle& data,
                       const std::string& out_dir, Rng& rng) {
    if (std::find(meta.completed.begin(), meta.completed.end(), "dense") == meta.completed.end())
        throw TrainingError("stage1 requires a trained backbone (run cotrain with dims \"\" first)");
    MetricsWriter mw(out_dir);
    AdamW opt;
    GroupLrs lrs;
    lrs.set(ParamGroup::ctrl_trunk, model.cfg.train.stage1_lr);
    lrs.set(ParamGroup::ctrl_gate, model.cfg.train.stage1_lr);
    lrs.weight_decay = 0.0;

    StageReport rep;
    std::vector<int> probe = probe_indices(data, 256);
    for (int e = 0; e < model.cfg.train.stage1_max_epochs; ++e) {
        auto batches = epoch_batches(data, model.cfg.train.batch_size, rng);
        double loss_sum = 0.0;
        int step = 0;
        for (auto& bidx : batches) {
            Batch batch = data.make_batch(bidx);
            Graph g;
            ForwardOptions fo;
            fo.mode = RunMode::train;
            fo.rng = &rng;
            fo.tau = model.cfg.gumbel_tau_start;
            fo.freeze(ParamGroup::backbone);
            model.params.zero_grad();
            ForwardResult r = model.forward(g, batch, fo);
            VarId loss = g.constant(Tensor::scalar(0.0));
            for (auto& tr : r.traces)
                loss = g.add(loss, pretrain_loss_soft(g, tr.blocks));
            loss = g.scale(loss, 1.0 / batch.size);
            double lv = g.val(loss).v[0];
            if (!std::isfinite(lv)) throw TrainingError("stage1: loss not finite");
            g.backward(loss);
            opt.step(model.params, lrs, 0.0);
            loss_sum += lv;
            mw.step_row("stage1", meta.epoch, step++, lv, 1.0, 0.0, 1.0);
        }
        // termination: hard pretrain loss over the probe set, eval mode
        double hard = 0.0;
        for (size_t at = 0; at < probe.size(); at += model.cfg.train.batch_size) {
            std::vector<int> chunk(probe.begin() + at,
                                   probe.begin() +
                                       std::min(probe.size(), at + model.cfg.train.batch_size));
            Batch b = data.make_batch(chunk);
            for (auto& tr : model.evaluate(b)) hard += pretrain_loss_hard(tr.blocks);
        }
        auto ev = evaluate_model(model, data, probe, model.cfg.train.batch_size);
        mw.epoch_row("stage1", meta.epoch, loss_sum / batches.size(), 1.0, 0.0,
                     ev.exec_ratio_mean, ev.exec_ratio_std, 0.0, ev.accuracy);
        ++meta.epoch;
        ++rep.epochs_run;
        rep.final_clean_acc = ev.accuracy;
        rep.final_exec_ratio = ev.exec_ratio_mean;
        if (hard == 0.0) {
            meta.completed.push_back("stage1");
            return rep;
        }
    }
    throw TrainingError("stage1 did not reach zero hard pretrain loss within the epoch budget");
}

// ---- stage 2: co-training ---------------------------------------------------

StageReport run_stage2(Model& model, CheckpointMeta& meta, const DatasetHandle& data,
                       const std::string& out_dir, int epochs, Rng& rng) {
    if (std::find(meta.completed.begin(), meta.completed.end(), "stage1") == meta.completed.end())
        throw TrainingError("stage2 requires a stage1 checkpoint");
    MetricsWriter mw(out_dir);
    AdamW opt;
    GroupLrs lrs;
    lrs.set(ParamGroup::backbone, model.cfg.train.stage2_lr_backbone);
    lrs.set(ParamGroup::ctrl_trunk, model.cfg.train.stage2_lr_controller);
    lrs.set(ParamGroup::ctrl_gate, model.cfg.train.stage2_lr_controller);
    lrs.weight_decay = model.cfg.train.weight_decay;

    StageReport rep;
    double target = model.cfg.target_flops_ratio;
    for (int e = 0; e < epochs; ++e) {
        double tau = tau_schedule(model.cfg, e, epochs);
        meta.tau = tau;
        auto batches = epoch_batches(data, model.cfg.train.batch_size, rng);
        double task_sum = 0.0, cost_sum = 0.0, alpha_last = 0.0;
        double exec_sum = 0.0, exec_sq = 0.0;
        int step = 0;
        for (auto& bidx : batches) {
            Batch batch = data.make_batch(bidx);
            Graph g;
            ForwardOptions fo;
            fo.mode = RunMode::train;
            fo.rng = &rng;
            fo.tau = tau;
            model.params.zero_grad();
            ForwardResult r = model.forward(g, batch, fo);
            VarId l_task = g.cross_entropy(r.logits, batch.labels);
            VarId l_cost = g.constant(Tensor::scalar(0.0));
            for (auto& tr : r.traces)
                l_cost = g.add(l_cost, differentiable_cost(g, tr.blocks, model.cfg, model.cfg.dims));
            l_cost = g.scale(l_cost, 1.0 / batch.size);
            double task = g.val(l_task).v[0];
            double cost = g.val(l_cost).v[0];
            if (!std::isfinite(task) || !std::isfinite(cost)) {
                double mh = 0.0;
                int cnt = 0;
                for (auto& tr : r.traces)
                    for (auto& b : tr.blocks) {
                        mh += b.g_block;
                        ++cnt;
                    }
                throw TrainingError("stage2: loss not finite (tau=" + std::to_string(tau) +
                                    ", mean block soft=" + std::to_string(mh / cnt) + ")");
            }
            // straight-through forward equals the executed hard ratio
            double exec = cost;
            double alpha = dynamic_alpha(task, cost, exec, target, model.cfg);
            VarId total = g.add(l_task, g.scale(l_cost, alpha));
            g.backward(total);
            opt.step(model.params, lrs, model.cfg.train.grad_clip);
            task_sum += task;
            cost_sum += cost;
            alpha_last = alpha;
            exec_sum += exec;
            exec_sq += exec * exec;
            mw.step_row("stage2", meta.epoch, step++, task, cost, alpha, exec);
        }
        int nb = static_cast<int>(batches.size());
        double exec_mean = exec_sum / nb;
        double exec_var = exec_sq / nb - exec_mean * exec_mean;
        auto ev = evaluate_model(model, data, probe_indices(data, 256), model.cfg.train.batch_size);
        mw.epoch_row("stage2", meta.epoch, task_sum / nb, cost_sum / nb, alpha_last, exec_mean,
                     exec_var > 0 ? std::sqrt(exec_var) : 0.0, 0.0, ev.accuracy);
        ++meta.epoch;
        ++rep.epochs_run;
        rep.final_exec_ratio = exec_mean;
        rep.final_clean_acc = ev.accuracy;
        rep.final_task_loss = task_sum / nb;
    }
    meta.opt_step = opt.t;
    meta.completed.push_back("stage2");
    return rep;
}

// ---- stage 3: inherit + hybrid RL -----------------------------------------

Model inherit_weights(const Model& pretrained, double rho, uint64_t seed) {
    if (rho < 0.0 || rho > 1.0) throw TrainingError("inherit_weights: rho must be in [0, 1]");
    Model m = Model::init(pretrained.cfg, seed);
    // copy everything trained, then install fresh actor/critic heads
    for (const auto& src : pretrained.params.items) {
        int id = m.params.find(src.name);
        if (id >= 0) m.params.at(id).value = src.value;
    }
    Rng rng(mix_seed(seed, 0x3a9e001ULL));
    m.install_rl_heads(rng);

    // reinitialize a seeded random subset of the remaining controller
    // tensors totaling (1 - rho) of their parameter count
    std::vector<int> trunk_ids;
    int64_t total = 0;
    for (size_t i = 0; i < m.params.items.size(); ++i) {
        if (m.params.items[i].group == ParamGroup::ctrl_trunk) {
            trunk_ids.push_back(static_cast<int>(i));
            total += m.params.items[i].value.numel();
        }
    }
    Rng pick(mix_seed(seed, 0x9e1ec7ULL));
    pick.shuffle(trunk_ids);
    int64_t target = static_cast<int64_t>(std::llround((1.0 - rho) * total));
    int64_t selected = 0;
    for (int id : trunk_ids) {
        if (selected >= target) break;
        ParamTensor& p = m.params.at(id);
        p.value = normal_init(p.value.shape, 0.02, rng);
        selected += p.value.numel();
    }
    return m;
}

StageReport run_stage3(Model& model, CheckpointMeta& meta, const DatasetHandle& data,
                       const std::string& out_dir, Rng& rng) {
    if (std::find(meta.completed.begin(), meta.completed.end(), "stage2") == meta.completed.end())
        throw TrainingError("stage3 requires a stage2 checkpoint");
    if (!model.rl_heads) throw TrainingError("stage3 requires actor/critic heads (inherit first)");
    MetricsWriter mw(out_dir);
    AdamW opt;
    StageReport rep;
    double target = model.cfg.target_flops_ratio;
    double tau = model.cfg.gumbel_tau_end;
    meta.tau = tau;
    int total_epochs = model.cfg.train.stage3_total_epochs;
    int frozen_epochs = model.cfg.train.stage3_frozen_epochs;

    for (int e = 0; e < total_epochs; ++e) {
        bool frozen = e < frozen_epochs;
        GroupLrs lrs;
        lrs.set(ParamGroup::actor, model.cfg.train.stage3_lr_rl);
        lrs.set(ParamGroup::critic, model.cfg.train.stage3_lr_rl);
        if (!frozen) {
            lrs.set(ParamGroup::backbone, model.cfg.train.stage3_lr_backbone);
            lrs.set(ParamGroup::ctrl_trunk, model.cfg.train.stage3_lr_controller);
            lrs.weight_decay = model.cfg.train.weight_decay;
        }
        auto batches = epoch_batches(data, model.cfg.train.batch_size, rng);
        double task_sum = 0.0, reward_sum = 0.0, exec_sum = 0.0, exec_sq = 0.0;
        int reward_count = 0;
        int step = 0;
        for (auto& bidx : batches) {
            Batch batch = data.make_batch(bidx);
            Graph g;
            ForwardOptions fo;
            fo.mode = RunMode::train;
            fo.rng = &rng;
            fo.tau = tau;
            if (frozen) {
                fo.freeze(ParamGroup::backbone);
                fo.freeze(ParamGroup::ctrl_trunk);
                fo.freeze(ParamGroup::ctrl_gate);
            }
            model.params.zero_grad();
            ForwardResult r = model.forward(g, batch, fo);
            VarId l_task = g.cross_entropy(r.logits, batch.labels);
            double task = g.val(l_task).v[0];
            if (!std::isfinite(task)) throw TrainingError("stage3: task loss not finite");

            VarId total = frozen ? g.constant(Tensor::scalar(0.0)) : l_task;
            double exec_batch = 0.0;
            for (int s = 0; s < batch.size; ++s) {
                const SampleTrace& tr = r.traces[s];
                int y = tr.correct() ? 1 : 0;
                RewardRecord rr = compute_reward(y, tr.flops.ratio, target, model.cfg.beta);
                mw.reward_row(meta.epoch, step, s, rr);
                reward_sum += rr.reward;
                ++reward_count;
                exec_batch += tr.flops.ratio;
                A2cLosses al =
                    a2c_losses(g, r.a2c[s], rr.reward, model.cfg.train.entropy_coeff);
                VarId sample_loss =
                    g.add(al.policy, g.add(al.value, al.entropy_bonus));
                total = g.add(total, g.scale(sample_loss, 1.0 / batch.size));
            }
            g.backward(total);
            opt.step(model.params, lrs, model.cfg.train.grad_clip);
            exec_batch /= batch.size;
            exec_sum += exec_batch;
            exec_sq += exec_batch * exec_batch;
            task_sum += task;
            mw.step_row("stage3", meta.epoch, step++, task, exec_batch, 0.0, exec_batch);
        }
        int nb = static_cast<int>(batches.size());
        double exec_mean = exec_sum / nb;
        double exec_var = exec_sq / nb - exec_mean * exec_mean;
        double reward_mean = reward_sum / reward_count;
        if (!std::isfinite(reward_mean)) throw TrainingError("stage3: reward not finite");
        auto ev = evaluate_model(model, data, probe_indices(data, 256), model.cfg.train.batch_size);
        mw.epoch_row("stage3", meta.epoch, task_sum / nb, exec_mean, 0.0, exec_mean,
                     exec_var > 0 ? std::sqrt(exec_var) : 0.0, reward_mean, ev.accuracy);
        ++meta.epoch;
        ++rep.epochs_run;
        rep.final_exec_ratio = exec_mean;
        rep.final_clean_acc = ev.accuracy;
        rep.final_task_loss = task_sum / nb;
    }
    meta.opt_step = opt.t;
    meta.completed.push_back("stage3");
    return rep;
}

}  // namespace mia
