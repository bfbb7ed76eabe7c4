#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "pmtl/ops.hpp"
#include "pmtl/rng.hpp"

namespace pmtl {

enum class ParamKind { Param, Buffer };

// Visits (name, tensor, kind) in a fixed order; the order defines checkpoint
// layout and optimizer slot assignment.
using ParamVisitor = std::function<void(const std::string&, Tensor&, ParamKind)>;

inline void fanin_uniform_init(Tensor& w, int fan_in, Rng& rng) {
    const Scalar bound = Scalar(1) / std::sqrt(static_cast<Scalar>(fan_in));
    for (Scalar& v : w.vec()) v = rng.uniform(-bound, bound);
}

struct Conv2dLayer {
    Tensor w, b;
    int stride = 1;
    int pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(int in_ch, int out_ch, int kernel, int stride_, int pad_, Rng& rng)
        : w(Shape{out_ch, in_ch, kernel, kernel}, true),
          b(Shape{out_ch}, true),
          stride(stride_),
          pad(pad_) {
        fanin_uniform_init(w, in_ch * kernel * kernel, rng);
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

    void visit(const std::string& prefix, const ParamVisitor& v) {
        v(prefix + ".w", w, ParamKind::Param);
        v(prefix + ".b", b, ParamKind::Param);
    }
};

struct BatchNorm2dLayer {
    Tensor gamma, beta, run_mean, run_var;
    Scalar momentum = 0.1;
    Scalar eps = 1e-5;

    BatchNorm2dLayer() = default;
    explicit BatchNorm2dLayer(int ch)
        : gamma(Tensor::full({ch}, 1)), beta(Shape{ch}, true), run_mean(Shape{ch}),
          run_var(Tensor::full({ch}, 1)) {
        gamma.set_requires_grad(true);
    }

    Tensor forward(const Tensor& x, bool training) {
        return batchnorm2d(x, gamma, beta, run_mean, run_var, training, momentum, eps);
    }

    void visit(const std::string& prefix, const ParamVisitor& v) {
        v(prefix + ".gamma", gamma, ParamKind::Param);
        v(prefix + ".beta", beta, ParamKind::Param);
        v(prefix + ".run_mean", run_mean, ParamKind::Buffer);
        v(prefix + ".run_var", run_var, ParamKind::Buffer);
    }
};

struct LinearLayer {
    Tensor w, b;

    LinearLayer() = default;
    LinearLayer(int in_dim, int out_dim, Rng& rng)
        : w(Shape{in_dim, out_dim}, true), b(Shape{out_dim}, true) {
        fanin_uniform_init(w, in_dim, rng);
    }

    Tensor forward(const Tensor& x) const { return linear(x, w, b); }

    void visit(const std::string& prefix, const ParamVisitor& v) {
        v(prefix + ".w", w, ParamKind::Param);
        v(prefix + ".b", b, ParamKind::Param);
    }
};

struct LayerNormLayer {
    Tensor gamma, beta;
    Scalar eps = 1e-5;

    LayerNormLayer() = default;
    explicit LayerNormLayer(int dim) : gamma(Tensor::full({dim}, 1)), beta(Shape{dim}, true) {
        gamma.set_requires_grad(true);
    }

    Tensor forward(const Tensor& x) const { return layernorm_last(x, gamma, beta, eps); }

    void visit(const std::string& prefix, const ParamVisitor& v) {
        v(prefix + ".gamma", gamma, ParamKind::Param);
        v(prefix + ".beta", beta, ParamKind::Param);
    }
};

}  // namespace pmtl
