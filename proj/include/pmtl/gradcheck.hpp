#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pmtl/rng.hpp"
#include "pmtl/tensor.hpp"

namespace pmtl {

struct GradCheckReport {
    std::string name;
    Scalar max_rel_err = 0;
    std::string worst_detail;
    bool passed(Scalar tol = 1e-4) const { return max_rel_err < tol; }
};

// Central finite differences against the reverse-mode gradients of `fn`,
// which must rebuild the scalar loss from the current contents of `inputs`
// on every call. probes_per_tensor < 0 checks every element; otherwise that
// many elements are sampled per tensor with `rng`.
GradCheckReport check_gradients(const std::string& name, const std::function<Tensor()>& fn,
                                std::vector<Tensor> inputs, int probes_per_tensor = -1,
                                Rng* rng = nullptr, Scalar fd_eps = 1e-5);

}  // namespace pmtl
