#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "roiformer/tensor.hpp"

namespace roiformer {

// Finite-difference certification of analytic backwards. Runs in double
// precision only; single precision cannot reach the 1e-5 tolerances.

struct GradReport {
    std::string op_name;
    double max_abs_err = 0;
    double max_rel_err = 0;
    int64_t worst_index = -1;
    double analytic_at_worst = 0;
    double numeric_at_worst = 0;
    bool pass = true;
};

// Central differences (f(x+h) - f(x-h)) / 2h per coordinate of x.
// f is re-evaluated with x perturbed in place and must be deterministic.
template <typename F>
Tensor<double> finite_diff_gradient(F&& f, Tensor<double>& x, double step = 1e-6) {
    Tensor<double> g(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double saved = x.data[i];
        x.data[i] = saved + step;
        const double fp = f();
        x.data[i] = saved - step;
        const double fm = f();
        x.data[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw ValueError("finite_diff_gradient: non-finite function value");
        g.data[i] = (fp - fm) / (2 * step);
    }
    return g;
}

// Elementwise pass criterion: |a-n| <= atol + rtol*max(|a|,|n|).
// Reported relative error uses denominator max(|a|,|n|,atol/rtol) so that
// coordinates near zero are judged on absolute error alone.
inline GradReport compare_gradients(const std::string& op_name, const Tensor<double>& analytic,
                                    const Tensor<double>& numeric, double rtol = 1e-5,
                                    double atol = 1e-8) {
    if (!analytic.same_shape(numeric))
        throw ShapeError("compare_gradients: shape mismatch");
    GradReport r;
    r.op_name = op_name;
    const double guard = atol / rtol;
    for (int64_t i = 0; i < analytic.numel(); ++i) {
        const double a = analytic.data[i], n = numeric.data[i];
        const double abs_err = std::abs(a - n);
        const double mag = std::max(std::abs(a), std::abs(n));
        const double rel = abs_err / std::max(mag, guard);
        if (abs_err > atol + rtol * mag) r.pass = false;
        if (rel > r.max_rel_err || r.worst_index < 0) {
            r.max_rel_err = rel;
            r.worst_index = i;
            r.analytic_at_worst = a;
            r.numeric_at_worst = n;
        }
        r.max_abs_err = std::max(r.max_abs_err, abs_err);
    }
    return r;
}

// Merge per-parameter reports of one op into a single row.
inline GradReport merge_reports(const std::string& op_name,
                                const std::vector<GradReport>& parts) {
    GradReport r;
    r.op_name = op_name;
    for (const auto& p : parts) {
        if (p.max_rel_err > r.max_rel_err || r.worst_index < 0) {
            r.max_rel_err = p.max_rel_err;
            r.worst_index = p.worst_index;
            r.analytic_at_worst = p.analytic_at_worst;
            r.numeric_at_worst = p.numeric_at_worst;
        }
        r.max_abs_err = std::max(r.max_abs_err, p.max_abs_err);
        r.pass = r.pass && p.pass;
    }
    return r;
}

inline void print_report_header(std::FILE* out = stdout) {
    std::fprintf(out, "%-40s %12s %12s  %s\n", "op", "max_abs", "max_rel", "status");
}

inline void print_report(const GradReport& r, std::FILE* out = stdout) {
    std::fprintf(out, "%-40s %12.3e %12.3e  %s\n", r.op_name.c_str(), r.max_abs_err,
                 r.max_rel_err, r.pass ? "PASS" : "FAIL");
}

}  // namespace roiformer
