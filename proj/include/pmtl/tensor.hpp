#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "pmtl/common.hpp"

namespace pmtl {

class Tensor;

namespace detail {

// One node of the reverse-mode graph. A Tensor is a shared handle to a node;
// ops connect nodes through `parents` and record a closure that pushes the
// node's gradient into its parents.
struct Node {
    Shape shape;
    std::vector<Scalar> value;
    std::vector<Scalar> grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool frozen = false;  // optimizer must not touch this tensor
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

    Scalar* grad_data() {
        if (grad.empty()) grad.assign(value.size(), Scalar(0));
        return grad.data();
    }
};

}  // namespace detail

// Dense row-major tensor of doubles with optional autodiff tracking.
// Value semantics on the handle; storage is shared.
class Tensor {
   public:
    Tensor() = default;

    explicit Tensor(Shape shape, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        node_->shape = std::move(shape);
        node_->value.assign(static_cast<std::size_t>(numel_of(node_->shape)), Scalar(0));
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, Scalar v) {
        Tensor t(std::move(shape));
        for (auto& x : t.node_->value) x = v;
        return t;
    }

    static Tensor from_vector(std::vector<Scalar> data, Shape shape) {
        check(static_cast<std::int64_t>(data.size()) == numel_of(shape),
              "from_vector: data size does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return node_->numel(); }

    Scalar* data() { return node_->value.data(); }
    const Scalar* data() const { return node_->value.data(); }
    std::vector<Scalar>& vec() { return node_->value; }
    const std::vector<Scalar>& vec() const { return node_->value; }

    // Row-major element access, mainly for tests and small fixtures.
    Scalar& at(std::initializer_list<int> idx) { return node_->value[flat_index(idx)]; }
    Scalar at(std::initializer_list<int> idx) const { return node_->value[flat_index(idx)]; }

    // Scalar extraction for loss nodes.
    Scalar item() const {
        check(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }

    bool frozen() const { return node_->frozen; }
    void set_frozen(bool b) { node_->frozen = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    Scalar* grad() { return node_->grad_data(); }
    const std::vector<Scalar>& grad_vec() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Scalar(0));
    }

    // Copy of values with no graph attached.
    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = node_->shape;
        t.node_->value = node_->value;
        return t;
    }

    // Reverse-mode sweep from a scalar node.
    void backward();

    std::shared_ptr<detail::Node> node() const { return node_; }

   private:
    std::size_t flat_index(std::initializer_list<int> idx) const {
        std::size_t flat = 0;
        std::size_t i = 0;
        for (int v : idx) {
            flat = flat * static_cast<std::size_t>(node_->shape[i]) + static_cast<std::size_t>(v);
            ++i;
        }
        return flat;
    }

    std::shared_ptr<detail::Node> node_;
};

// Plain integer tensor (labels, quantization indices). Not differentiable.
struct IntTensor {
    Shape shape;
    std::vector<std::int32_t> data;

    IntTensor() = default;
    explicit IntTensor(Shape s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), 0);
    }
    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int32_t& at(std::initializer_list<int> idx) {
        std::size_t flat = 0, i = 0;
        for (int v : idx) {
            flat = flat * static_cast<std::size_t>(shape[i]) + static_cast<std::size_t>(v);
            ++i;
        }
        return data[flat];
    }
};

}  // namespace pmtl
