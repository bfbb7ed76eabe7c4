#include "pmtl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "pmtl/common.hpp"

namespace pmtl {

GradCheckReport check_gradients(const std::string& name, const std::function<Tensor()>& fn,
                                std::vector<Tensor> inputs, int probes_per_tensor, Rng* rng,
                                Scalar fd_eps) {
    GradCheckReport report;
    report.name = name;

    for (Tensor& t : inputs) {
        check(t.requires_grad(), "check_gradients(" + name + "): input does not require grad");
        t.zero_grad();
    }
    Tensor loss = fn();
    loss.backward();

    std::vector<std::vector<Scalar>> analytic;
    analytic.reserve(inputs.size());
    for (Tensor& t : inputs) {
        if (t.has_grad()) {
            analytic.push_back(t.grad_vec());
        } else {
            analytic.emplace_back(static_cast<std::size_t>(t.numel()), Scalar(0));
        }
    }

    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        const std::int64_t n = t.numel();
        std::vector<std::int64_t> probe_idx;
        if (probes_per_tensor < 0 || probes_per_tensor >= n) {
            probe_idx.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) probe_idx[static_cast<std::size_t>(i)] = i;
        } else {
            check(rng != nullptr, "check_gradients: sampling probes requires an rng");
            for (int i = 0; i < probes_per_tensor; ++i) {
                probe_idx.push_back(
                    static_cast<std::int64_t>(rng->uniform_int(static_cast<std::uint64_t>(n))));
            }
        }
        for (std::int64_t j : probe_idx) {
            Scalar* slot = t.data() + j;
            const Scalar x0 = *slot;
            const Scalar h = fd_eps * std::max(Scalar(1), std::abs(x0));
            *slot = x0 + h;
            const Scalar f_plus = fn().item();
            *slot = x0 - h;
            const Scalar f_minus = fn().item();
            *slot = x0;
            const Scalar numeric = (f_plus - f_minus) / (2 * h);
            const Scalar a = analytic[ti][static_cast<std::size_t>(j)];
            const Scalar denom = std::max({std::abs(a), std::abs(numeric), Scalar(1e-3)});
            const Scalar rel = std::abs(a - numeric) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_detail = "tensor " + std::to_string(ti) + " elem " +
                                      std::to_string(j) + ": analytic=" + std::to_string(a) +
                                      " numeric=" + std::to_string(numeric);
            }
        }
    }
    return report;
}

}  // namespace pmtl
