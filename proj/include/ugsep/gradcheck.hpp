#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ugsep/tensor.hpp"

namespace ugsep {

// ---------------------------------------------------------------------------
// Central finite-difference gradient checker.
//
// Relative error uses a unit floor: |a - n| / max(1, |a|, |n|), so the
// check behaves absolutely for tiny gradients and relatively for large
// ones.
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::size_t param_index = 0;
    std::size_t entry_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    bool pass = true;
    double max_rel_err = 0.0;
    std::size_t entries_checked = 0;
    GradCheckEntry worst;
};

using ScalarFn = std::function<double(const std::vector<TensorD>&)>;

inline GradCheckReport check_gradient(const ScalarFn& f, std::vector<TensorD> params,
                                      const std::vector<TensorD>& analytic, double h,
                                      double tol) {
    if (!(h > 0.0)) {
        throw std::invalid_argument("check_gradient: step h must be positive");
    }
    if (analytic.size() != params.size()) {
        throw std::invalid_argument("check_gradient: analytic gradient count " +
                                    std::to_string(analytic.size()) + " != param count " +
                                    std::to_string(params.size()));
    }
    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (!analytic[p].same_shape(params[p])) {
            throw std::invalid_argument("check_gradient: gradient shape " +
                                        analytic[p].shape_str() + " != param shape " +
                                        params[p].shape_str() + " at index " +
                                        std::to_string(p));
        }
        for (std::size_t i = 0; i < params[p].numel(); ++i) {
            const double saved = params[p][i];
            params[p][i] = saved + h;
            const double fp = f(params);
            params[p][i] = saved - h;
            const double fm = f(params);
            params[p][i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::runtime_error("check_gradient: non-finite function value at param " +
                                         std::to_string(p) + " entry " + std::to_string(i));
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[p][i];
            const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            const double rel = std::fabs(a - numeric) / denom;
            ++report.entries_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = {p, i, a, numeric, rel};
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace ugsep
