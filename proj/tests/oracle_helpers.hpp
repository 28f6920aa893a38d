// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Test-only oracles: central finite differences, sort-based selection,
// naive reference loops. Kept independent of the library paths they check.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "tinymoe/rng.hpp"
#include "tinymoe/tensor.hpp"

namespace test_oracles {

// Central finite-difference gradient of f w.r.t. x, step h.
// f must be a pure function of the entries of x.
inline std::vector<double> fd_gradient(std::vector<double>& x,
                                       const std::function<double()>& f,
                                       double h = 1e-4) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = f();
        x[i] = keep - h;
        const double fm = f();
        x[i] = keep;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

// Guarded relative error: true relative error for O(1) magnitudes, absolute
// for tiny ones.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, rel_err(a[i], b[i]));
    return m;
}

inline std::vector<double> random_vec(size_t n, tinymoe::RngStream& rng, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.next_normal() * scale;
    return v;
}

// Reference matvec / matmul with plain loops (double).
inline std::vector<double> ref_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                      int64_t m, int64_t k, int64_t n) {
    std::vector<double> c(size_t(m * n), 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double s = 0;
            for (int64_t kk = 0; kk < k; ++kk) s += a[size_t(i * k + kk)] * b[size_t(kk * n + j)];
            c[size_t(i * n + j)] = s;
        }
    return c;
}

} // namespace test_oracles
