#pragma once

#include <Eigen/Core>
#include <memory>
#include <utility>

#include "pmtl/tensor.hpp"

namespace pmtl {
namespace detail {

using EMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using MatMap = Eigen::Map<EMat>;
using CMatMap = Eigen::Map<const EMat>;
using VecMap = Eigen::Map<EVec>;
using CVecMap = Eigen::Map<const EVec>;
using OuterStride = Eigen::OuterStride<Eigen::Dynamic>;
using StridedMap = Eigen::Map<EMat, 0, OuterStride>;
using CStridedMap = Eigen::Map<const EMat, 0, OuterStride>;

// Builds the output node of an op: wires parents and decides tracking.
// Ops that contribute no gradient to an input must not list it as a parent.
class OpBuilder {
   public:
    OpBuilder(Shape shape, std::initializer_list<const Tensor*> inputs) : out_(std::move(shape)) {
        for (const Tensor* t : inputs) {
            if (t->requires_grad()) {
                track_ = true;
                break;
            }
        }
        if (track_) {
            out_.set_requires_grad(true);
            auto& parents = out_.node()->parents;
            parents.reserve(inputs.size());
            for (const Tensor* t : inputs) parents.push_back(t->node());
        }
    }

    bool tracking() const { return track_; }
    Tensor& out() { return out_; }
    Scalar* data() { return out_.data(); }

    template <typename Fn>
    Tensor done(Fn&& backward) {
        if (track_) out_.node()->backward_fn = std::forward<Fn>(backward);
        return std::move(out_);
    }

    Tensor done() { return std::move(out_); }

   private:
    Tensor out_;
    bool track_ = false;
};

// Gradient buffer of parent i, or nullptr when that parent is not tracked
// (lets backward closures skip dead branches).
inline Scalar* parent_grad(Node& self, std::size_t i) {
    auto& p = self.parents[i];
    return p->requires_grad ? p->grad_data() : nullptr;
}

inline const std::vector<Scalar>& parent_value(Node& self, std::size_t i) {
    return self.parents[i]->value;
}

}  // namespace detail
}  // namespace pmtl
