#pragma once

#include <string>
#include <vector>

#include "mia/dataset.hpp"
#include "mia/model.hpp"

namespace mia {

struct AttackError : std::runtime_error {
    explicit AttackError(const std::string& m) : std::runtime_error(m) {}
};

struct AttackSpec {
    enum class Kind { pgd_linf, fgsm_l2 };
    Kind kind = Kind::pgd_linf;
    double epsilon = 0.002;  // 0.002 for PGD-Linf, 0.03 for FGSM-L2
    int steps = 10;          // PGD only
    double step_size = 0.0;  // PGD only; 0 -> epsilon/4
    uint64_t seed = 0;

    static AttackSpec pgd_default() { return {Kind::pgd_linf, 0.002, 10, 0.0, 0}; }
    static AttackSpec fgsm_default() { return {Kind::fgsm_l2, 0.03, 1, 0.0, 0}; }
    std::string name() const { return kind == Kind::pgd_linf ? "pgd_linf" : "fgsm_l2"; }
};

// Iterative loss ascent on [0,1] pixels, projected into the L-inf ball
// around the clean input each step. Gradients flow through the controller's
// straight-through soft path; masks are recomputed on the perturbed input
// at every step.
Batch pgd_attack(Model& model, const Batch& clean, const AttackSpec& spec);

// Single L2-normalized ascent step; zero-gradient samples stay clean (the
// count is reported back through *zero_grad_samples).
Batch fgsm_l2_attack(Model& model, const Batch& clean, const AttackSpec& spec,
                     int* zero_grad_samples = nullptr);

struct AttackRow {
    std::string attack;  // "clean" for the no-attack row
    double epsilon = 0.0;
    int steps = 0;
    double clean_acc = 0.0;
    double robust_acc = 0.0;
    double exec_ratio_clean = 1.0;
    double exec_ratio_adv = 1.0;
};

// Clean accuracy plus per-attack robust accuracy and FLOPs ratios over the
// given index set.
std::vector<AttackRow> evaluate_attacks(Model& model, const DatasetHandle& data,
                                        const std::vector<int>& idx, int batch_size,
                                        const std::vector<AttackSpec>& attacks);

std::string attack_report_csv(const std::string& checkpoint, const std::vector<AttackRow>& rows);

}  // namespace mia
