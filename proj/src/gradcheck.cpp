#include "m2va/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace m2va {

GradCheckReport finite_difference_check(const std::function<Tensor()>& f,
                                        ParamRegistry& params, double h, double tol) {
    if (h <= 0.0) throw ConfigError("finite_difference_check: h must be positive");
    GradCheckReport report;

    params.zero_grads();
    {
        Tape tape;
        Tensor loss = f();
        tape.backward(loss);
    }

    for (Parameter* p : params.trainable()) {
        GradCheckEntry entry;
        entry.name = p->name;
        entry.numel = p->tensor.numel();
        p->tensor.impl()->ensure_grad();
        auto& values = p->tensor.data();
        const auto& analytic = p->tensor.grad();
        for (size_t i = 0; i < values.size(); ++i) {
            double saved = values[i];
            values[i] = saved + h;
            double fp = f().item();
            values[i] = saved - h;
            double fm = f().item();
            values[i] = saved;
            double numeric = (fp - fm) / (2.0 * h);
            double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-3});
            double rel = std::fabs(analytic[i] - numeric) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = static_cast<idx>(i);
                entry.analytic = analytic[i];
                entry.numeric = numeric;
            }
        }
        entry.ok = entry.max_rel_err < tol;
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        report.all_ok = report.all_ok && entry.ok;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

std::string format_report(const GradCheckReport& report) {
    std::ostringstream os;
    os << std::left << std::setw(44) << "parameter" << std::right << std::setw(8)
       << "numel" << std::setw(14) << "max_rel_err" << "  status\n";
    for (const auto& e : report.entries) {
        os << std::left << std::setw(44) << e.name << std::right << std::setw(8)
           << e.numel << std::setw(14) << std::scientific << std::setprecision(3)
           << e.max_rel_err << "  " << (e.ok ? "ok" : "FAIL");
        if (!e.ok)
            os << "  (analytic " << e.analytic << " vs numeric " << e.numeric
               << " at index " << e.worst_index << ")";
        os << "\n";
    }
    os << "overall max relative error: " << std::scientific << std::setprecision(3)
       << report.max_rel_err << (report.all_ok ? "  [all ok]" : "  [FAILURES]") << "\n";
    return os.str();
}

}  // namespace m2va
