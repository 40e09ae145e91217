#pragma once

#include <functional>
#include <string>
#include <vector>

#include "m2va/params.hpp"

namespace m2va {

struct GradCheckEntry {
    std::string name;
    idx numel = 0;
    double max_rel_err = 0.0;
    idx worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    bool ok = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool all_ok = true;
};

// Central-difference check of d(f)/d(param) for every trainable parameter.
// f must be a deterministic scalar-valued function of the registry's current
// parameter values; it is re-evaluated ~2x per scalar parameter, so keep the
// model tiny. Failures are report entries, never exceptions.
GradCheckReport finite_difference_check(const std::function<Tensor()>& f,
                                        ParamRegistry& params, double h = 1e-5,
                                        double tol = 1e-4);

std::string format_report(const GradCheckReport& report);

}  // namespace m2va
