#include "mia/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mia {

namespace {

// gradient of the mean cross-entropy w.r.t. each input image
std::vector<Tensor> input_gradients(Model& model, const Batch& batch) {
    Graph g;
    ForwardOptions fo;
    fo.mode = RunMode::eval;
    fo.want_input_vars = true;
    ForwardResult r = model.forward(g, batch, fo);
    VarId loss = g.cross_entropy(r.logits, batch.labels);
    g.backward(loss);
    std::vector<Tensor> grads;
    for (int s = 0; s < batch.size; ++s) {
        const Tensor& gr = g.grad_of(r.input_vars[s]);
        grads.push_back(gr.empty() ? Tensor({batch.channels, batch.height, batch.width}) : gr);
    }
    return grads;
}

}  // namespace

Batch pgd_attack(Model& model, const Batch& clean, const AttackSpec& spec) {
    if (spec.epsilon < 0.0) throw AttackError("pgd_attack: negative epsilon");
    Batch adv = clean;
    if (spec.epsilon == 0.0 || spec.steps <= 0) return adv;
    double step = spec.step_size > 0.0 ? spec.step_size : spec.epsilon / 4.0;
    int64_t per = clean.sample_numel();
    for (int it = 0; it < spec.steps; ++it) {
        auto grads = input_gradients(model, adv);
        for (int s = 0; s < clean.size; ++s) {
            double* x = adv.pixels.data() + s * per;
            const double* x0 = clean.pixels.data() + s * per;
            const Tensor& gr = grads[s];
            for (int64_t i = 0; i < per; ++i) {
                if (!std::isfinite(gr.v[i]))
                    throw AttackError("pgd_attack: non-finite gradient at step " +
                                      std::to_string(it));
                double sign = gr.v[i] > 0.0 ? 1.0 : (gr.v[i] < 0.0 ? -1.0 : 0.0);
                double d = std::clamp(x[i] + step * sign - x0[i], -spec.epsilon, spec.epsilon);
                double v = x0[i] + d;
                // x0 + clamped delta can round a hair outside the ball;
                // nudge back so the measured |v - x0| <= epsilon exactly
                while (std::abs(v - x0[i]) > spec.epsilon) v = std::nextafter(v, x0[i]);
                x[i] = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return adv;
}

Batch fgsm_l2_attack(Model& model, const Batch& clean, const AttackSpec& spec,
                     int* zero_grad_samples) {
    if (spec.epsilon < 0.0) throw AttackError("fgsm_l2_attack: negative epsilon");
    Batch adv = clean;
    if (zero_grad_samples) *zero_grad_samples = 0;
    if (spec.epsilon == 0.0) return adv;
    auto grads = input_gradients(model, adv);
    int64_t per = clean.sample_numel();
    for (int s = 0; s < clean.size; ++s) {
        const Tensor& gr = grads[s];
        double norm = 0.0;
        for (double v : gr.v) norm += v * v;
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            if (zero_grad_samples) ++*zero_grad_samples;
            continue;
        }
        double* x = adv.pixels.data() + s * per;
        for (int64_t i = 0; i < per; ++i)
            x[i] = std::clamp(x[i] + spec.epsilon * gr.v[i] / norm, 0.0, 1.0);
        // recompute the realized norm; rounding may land a hair above the
        // budget, in which case the perturbation is rescaled once
        double actual = 0.0;
        for (int64_t i = 0; i < per; ++i) {
            double d = x[i] - clean.pixels[s * per + i];
            actual += d * d;
        }
        actual = std::sqrt(actual);
        if (actual > spec.epsilon) {
            double rescale = spec.epsilon / actual;
            for (int64_t i = 0; i < per; ++i) {
                double d = (x[i] - clean.pixels[s * per + i]) * rescale;
                x[i] = std::clamp(clean.pixels[s * per + i] + d, 0.0, 1.0);
            }
        }
    }
    return adv;
}

std::vector<AttackRow> evaluate_attacks(Model& model, const DatasetHandle& data,
                                        const std::vector<int>& idx, int batch_size,
                                        const std::vector<AttackSpec>& attacks) {
    if (idx.empty()) throw AttackError("evaluate_attacks: empty dataset");
    double clean_correct = 0.0, clean_ratio = 0.0;
    std::vector<double> adv_correct(attacks.size(), 0.0), adv_ratio(attacks.size(), 0.0);
    int n = static_cast<int>(idx.size());

    for (size_t at = 0; at < idx.size(); at += batch_size) {
        std::vector<int> chunk(idx.begin() + at, idx.begin() + std::min(idx.size(), at + batch_size));
        Batch batch = data.make_batch(chunk);
        auto traces = model.evaluate(batch);
        for (auto& t : traces) {
            if (t.correct()) clean_correct += 1.0;
            clean_ratio += t.flops.ratio;
        }
        for (size_t a = 0; a < attacks.size(); ++a) {
            Batch adv = attacks[a].kind == AttackSpec::Kind::pgd_linf
                            ? pgd_attack(model, batch, attacks[a])
                            : fgsm_l2_attack(model, batch, attacks[a]);
            auto atr = model.evaluate(adv);
            for (auto& t : atr) {
                if (t.correct()) adv_correct[a] += 1.0;
                adv_ratio[a] += t.flops.ratio;
            }
        }
    }

    std::vector<AttackRow> rows;
    AttackRow clean_row;
    clean_row.attack = "clean";
    clean_row.clean_acc = clean_correct / n;
    clean_row.robust_acc = clean_correct / n;
    clean_row.exec_ratio_clean = clean_ratio / n;
    clean_row.exec_ratio_adv = clean_ratio / n;
    rows.push_back(clean_row);
    for (size_t a = 0; a < attacks.size(); ++a) {
        AttackRow r;
        r.attack = attacks[a].name();
        r.epsilon = attacks[a].epsilon;
        r.steps = attacks[a].kind == AttackSpec::Kind::pgd_linf ? attacks[a].steps : 1;
        r.clean_acc = clean_correct / n;
        r.robust_acc = adv_correct[a] / n;
        r.exec_ratio_clean = clean_ratio / n;
        r.exec_ratio_adv = adv_ratio[a] / n;
        rows.push_back(r);
    }
    return rows;
}

std::string attack_report_csv(const std::string& checkpoint, const std::vector<AttackRow>& rows) {
    std::string out =
        "checkpoint,attack,epsilon,steps,clean_acc,robust_acc,exec_ratio_clean,exec_ratio_adv\n";
    char buf[384];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.10g,%d,%.10g,%.10g,%.10g,%.10g\n",
                      checkpoint.c_str(), r.attack.c_str(), r.epsilon, r.steps, r.clean_acc,
                      r.robust_acc, r.exec_ratio_clean, r.exec_ratio_adv);
        out += buf;
    }
    return out;
}

}  // namespace mia
