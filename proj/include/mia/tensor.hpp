#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

namespace mia {

// Dense row-major tensor of doubles. Rank is implied by shape.size().
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    }
    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        assert(static_cast<int64_t>(v.size()) == numel_of(shape));
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor scalar(double x) { return Tensor({1}, {x}); }
    static Tensor full(std::vector<int> s, double x) {
        Tensor t(std::move(s));
        for (auto& e : t.v) e = x;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    bool empty() const { return v.empty(); }
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(int i, int j) { return v[static_cast<size_t>(i) * cols() + j]; }
    double at(int i, int j) const { return v[static_cast<size_t>(i) * cols() + j]; }

    void add_(const Tensor& o) {
        assert(v.size() == o.v.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
    }
    void fill(double x) {
        for (auto& e : v) e = x;
    }
};

// Counter for executed matrix-multiply FLOPs (2 per MAC). Tests enable it
// around forward passes to compare real executed work against the analytic
// cost model. Only forward gemms count; backward kernels do not.
struct FlopCounter {
    static thread_local bool enabled;
    static thread_local double flops;

    static void reset() {
        flops = 0.0;
        enabled = true;
    }
    static void stop() { enabled = false; }
};

// c (m x p) = a (m x k) * b (k x p), optionally accumulating into c.
inline void gemm(const double* a, const double* b, double* c, int m, int k, int p,
                 bool accumulate = false) {
    if (m <= 0 || p <= 0) return;
    if (!accumulate) {
        for (int64_t i = 0; i < static_cast<int64_t>(m) * p; ++i) c[i] = 0.0;
    }
    if (k > 0) {
        for (int i = 0; i < m; ++i) {
            const double* ai = a + static_cast<int64_t>(i) * k;
            double* ci = c + static_cast<int64_t>(i) * p;
            for (int t = 0; t < k; ++t) {
                const double av = ai[t];
                if (av == 0.0) continue;
                const double* bt = b + static_cast<int64_t>(t) * p;
                for (int j = 0; j < p; ++j) ci[j] += av * bt[j];
            }
        }
    }
    if (FlopCounter::enabled) {
        FlopCounter::flops += 2.0 * static_cast<double>(m) * k * p;
    }
}

// c (m x p) = a (m x k) * b^T, b stored as (p x k). Counted like gemm.
inline void gemm_nt(const double* a, const double* b, double* c, int m, int k, int p,
                    bool accumulate = false) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<int64_t>(i) * k;
        double* ci = c + static_cast<int64_t>(i) * p;
        for (int j = 0; j < p; ++j) {
            const double* bj = b + static_cast<int64_t>(j) * k;
            double s = 0.0;
            for (int t = 0; t < k; ++t) s += ai[t] * bj[t];
            if (accumulate)
                ci[j] += s;
            else
                ci[j] = s;
        }
    }
    if (FlopCounter::enabled) {
        FlopCounter::flops += 2.0 * static_cast<double>(m) * k * p;
    }
}

// Backward-pass kernels; never counted.
inline void gemm_grad(const double* a, const double* b, double* c, int m, int k, int p,
                      bool accumulate = true) {
    bool was = FlopCounter::enabled;
    FlopCounter::enabled = false;
    gemm(a, b, c, m, k, p, accumulate);
    FlopCounter::enabled = was;
}

inline void gemm_nt_grad(const double* a, const double* b, double* c, int m, int k, int p,
                         bool accumulate = true) {
    bool was = FlopCounter::enabled;
    FlopCounter::enabled = false;
    gemm_nt(a, b, c, m, k, p, accumulate);
    FlopCounter::enabled = was;
}

// c (m x p) += a^T * b with a stored as (k x m), b as (k x p).
inline void gemm_tn_grad(const double* a, const double* b, double* c, int m, int k, int p) {
    for (int t = 0; t < k; ++t) {
        const double* at = a + static_cast<int64_t>(t) * m;
        const double* bt = b + static_cast<int64_t>(t) * p;
        for (int i = 0; i < m; ++i) {
            const double av = at[i];
            if (av == 0.0) continue;
            double* ci = c + static_cast<int64_t>(i) * p;
            for (int j = 0; j < p; ++j) ci[j] += av * bt[j];
        }
    }
}

}  // namespace mia
