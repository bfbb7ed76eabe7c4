#include <algorithm>
#include <cmath>

#include "op_utils.hpp"
#include "pmtl/ops.hpp"

namespace pmtl {

using detail::CMatMap;
using detail::MatMap;
using detail::OpBuilder;
using detail::parent_grad;
using detail::parent_value;

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    OpBuilder ob(a.shape(), {&a, &b});
    const std::int64_t n = a.numel();
    const Scalar* pa = a.data();
    const Scalar* pb = b.data();
    Scalar* po = ob.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    return ob.done([n](detail::Node& self) {
        const Scalar* g = self.grad.data();
        for (std::size_t pi = 0; pi < 2; ++pi) {
            if (Scalar* gp = parent_grad(self, pi)) {
                for (std::int64_t i = 0; i < n; ++i) gp[i] += g[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    OpBuilder ob(a.shape(), {&a, &b});
    const std::int64_t n = a.numel();
    const Scalar* pa = a.data();
    const Scalar* pb = b.data();
    Scalar* po = ob.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    return ob.done([n](detail::Node& self) {
        const Scalar* g = self.grad.data();
        if (Scalar* ga = parent_grad(self, 0)) {
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (Scalar* gb = parent_grad(self, 1)) {
            for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    OpBuilder ob(a.shape(), {&a, &b});
    const std::int64_t n = a.numel();
    const Scalar* pa = a.data();
    const Scalar* pb = b.data();
    Scalar* po = ob.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    return ob.done([n](detail::Node& self) {
        const Scalar* g = self.grad.data();
        const Scalar* va = parent_value(self, 0).data();
        const Scalar* vb = parent_value(self, 1).data();
        if (Scalar* ga = parent_grad(self, 0)) {
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
        }
        if (Scalar* gb = parent_grad(self, 1)) {
            for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
        }
    });
}

Tensor scale(const Tensor& a, Scalar s) {
    OpBuilder ob(a.shape(), {&a});
    const std::int64_t n = a.numel();
    const Scalar* pa = a.data();
    Scalar* po = ob.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    return ob.done([n, s](detail::Node& self) {
        const Scalar* g = self.grad.data();
        if (Scalar* ga = parent_grad(self, 0)) {
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
        }
    });
}

Tensor relu(const Tensor& a) {
    OpBuilder ob(a.shape(), {&a});
    const std::int64_t n = a.numel();
    const Scalar* pa = a.data();
    Scalar* po = ob.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] > 0 ? pa[i] : Scalar(0);
    return ob.done([n](detail::Node& self) {
        const Scalar* g = self.grad.data();
        const Scalar* y = self.value.data();
        if (Scalar* ga = parent_grad(self, 0)) {
            for (std::int64_t i = 0; i < n; ++i) {
                if (y[i] > 0) ga[i] += g[i];
            }
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    check(numel_of(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    OpBuilder ob(std::move(shape), {&a});
    std::copy_n(a.data(), a.numel(), ob.data());
    const std::int64_t n = a.numel();
    return ob.done([n](detail::Node& self) {
        const Scalar* g = self.grad.data();
        if (Scalar* ga = parent_grad(self, 0)) {
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
    });
}

Tensor to_tokens(const Tensor& x) {
    check(x.ndim() == 4, "to_tokens: expected [B,C,h,w], got " + shape_str(x.shape()));
    const int B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int P = h * w;
    OpBuilder ob({B, P, C}, {&x});
    const Scalar* px = x.data();
    Scalar* po = ob.data();
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            const Scalar* src = px + (static_cast<std::int64_t>(b) * C + c) * P;
            Scalar* dst = po + static_cast<std::int64_t>(b) * P * C + c;
            for (int p = 0; p < P; ++p) dst[static_cast<std::int64_t>(p) * C] = src[p];
        }
    }
    return ob.done([B, C, P](detail::Node& self) {
        const Scalar* g = self.grad.data();
        if (Scalar* gx = parent_grad(self, 0)) {
            for (int b = 0; b < B; ++b) {
                for (int c = 0; c < C; ++c) {
                    Scalar* dst = gx + (static_cast<std::int64_t>(b) * C + c) * P;
                    const Scalar* src = g + static_cast<std::int64_t>(b) * P * C + c;
                    for (int p = 0; p < P; ++p) dst[p] += src[static_cast<std::int64_t>(p) * C];
                }
            }
        }
    });
}

Tensor from_tokens(const Tensor& x, int h, int w) {
    check(x.ndim() == 3, "from_tokens: expected [B,P,C], got " + shape_str(x.shape()));
    const int B = x.dim(0), P = x.dim(1), C = x.dim(2);
    check(P == h * w, "from_tokens: token count " + std::to_string(P) + " != " +
                          std::to_string(h) + "x" + std::to_string(w));
    OpBuilder ob({B, C, h, w}, {&x});
    const Scalar* px = x.data();
    Scalar* po = ob.data();
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            Scalar* dst = po + (static_cast<std::int64_t>(b) * C + c) * P;
            const Scalar* src = px + static_cast<std::int64_t>(b) * P * C + c;
            for (int p = 0; p < P; ++p) dst[p] = src[static_cast<std::int64_t>(p) * C];
        }
    }
    return ob.done([B, C, P](detail::Node& self) {
        const Scalar* g = self.grad.data();
        if (Scalar* gx = parent_grad(self, 0)) {
            for (int b = 0; b < B; ++b) {
                for (int c = 0; c < C; ++c) {
                    const Scalar* src = g + (static_cast<std::int64_t>(b) * C + c) * P;
                    Scalar* dst = gx + static_cast<std::int64_t>(b) * P * C + c;
                    for (int p = 0; p < P; ++p) dst[static_cast<std::int64_t>(p) * C] += src[p];
                }
            }
        }
    });
}

Tensor sum_all(const Tensor& a) {
    OpBuilder ob({1}, {&a});
    const std::int64_t n = a.numel();
    const Scalar* pa = a.data();
    Scalar acc = 0;
    for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
    ob.data()[0] = acc;
    return ob.done([n](detail::Node& self) {
        const Scalar g = self.grad[0];
        if (Scalar* ga = parent_grad(self, 0)) {
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
        }
    });
}

Tensor mean_all(const Tensor& a) {
    check(a.numel() > 0, "mean_all: empty tensor");
    OpBuilder ob({1}, {&a});
    const std::int64_t n = a.numel();
    const Scalar* pa = a.data();
    Scalar acc = 0;
    for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
    ob.data()[0] = acc / static_cast<Scalar>(n);
    return ob.done([n](detail::Node& self) {
        const Scalar g = self.grad[0] / static_cast<Scalar>(n);
        if (Scalar* ga = parent_grad(self, 0)) {
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
        }
    });
}

Tensor weighted_sum(const std::vector<Tensor>& terms, const std::vector<Scalar>& coeffs) {
    check(!terms.empty() && terms.size() == coeffs.size(),
          "weighted_sum: need matching nonempty terms/coeffs");
    bool track = false;
    Scalar acc = 0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        check(terms[i].numel() == 1, "weighted_sum: terms must be scalars");
        if (terms[i].requires_grad()) track = true;
        acc += coeffs[i] * terms[i].item();
    }
    Tensor out({1});
    out.data()[0] = acc;
    if (!track) return out;
    out.set_requires_grad(true);
    for (const Tensor& t : terms) out.node()->parents.push_back(t.node());
    out.node()->backward_fn = [coeffs](detail::Node& self) {
        const Scalar g = self.grad[0];
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            if (Scalar* gp = parent_grad(self, i)) gp[0] += g * coeffs[i];
        }
    };
    return out;
}

Tensor matmul(const Tensor& x, const Tensor& w) {
    check(w.ndim() == 2, "matmul: weight must be 2-D, got " + shape_str(w.shape()));
    const int K = w.dim(0), N = w.dim(1);
    check(x.ndim() >= 1 && x.shape().back() == K,
          "matmul: inner dims differ, " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
    const std::int64_t rows = x.numel() / K;
    Shape out_shape = x.shape();
    out_shape.back() = N;
    OpBuilder ob(std::move(out_shape), {&x, &w});
    CMatMap X(x.data(), rows, K);
    CMatMap W(w.data(), K, N);
    MatMap O(ob.data(), rows, N);
    O.noalias() = X * W;
    return ob.done([rows, K, N](detail::Node& self) {
        CMatMap G(self.grad.data(), rows, N);
        CMatMap X(parent_value(self, 0).data(), rows, K);
        CMatMap W(parent_value(self, 1).data(), K, N);
        if (Scalar* gx = parent_grad(self, 0)) {
            MatMap GX(gx, rows, K);
            GX.noalias() += G * W.transpose();
        }
        if (Scalar* gw = parent_grad(self, 1)) {
            MatMap GW(gw, K, N);
            GW.noalias() += X.transpose() * G;
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check(w.ndim() == 2 && b.ndim() == 1 && b.dim(0) == w.dim(1),
          "linear: bias/weight shapes inconsistent");
    const int K = w.dim(0), N = w.dim(1);
    check(x.shape().back() == K, "linear: inner dims differ");
    const std::int64_t rows = x.numel() / K;
    Shape out_shape = x.shape();
    out_shape.back() = N;
    OpBuilder ob(std::move(out_shape), {&x, &w, &b});
    CMatMap X(x.data(), rows, K);
    CMatMap W(w.data(), K, N);
    detail::CVecMap Bv(b.data(), N);
    MatMap O(ob.data(), rows, N);
    O.noalias() = X * W;
    O.rowwise() += Bv.transpose();
    return ob.done([rows, K, N](detail::Node& self) {
        CMatMap G(self.grad.data(), rows, N);
        CMatMap X(parent_value(self, 0).data(), rows, K);
        CMatMap W(parent_value(self, 1).data(), K, N);
        if (Scalar* gx = parent_grad(self, 0)) {
            MatMap GX(gx, rows, K);
            GX.noalias() += G * W.transpose();
        }
        if (Scalar* gw = parent_grad(self, 1)) {
            MatMap GW(gw, K, N);
            GW.noalias() += X.transpose() * G;
        }
        if (Scalar* gb = parent_grad(self, 2)) {
            detail::VecMap GB(gb, N);
            GB.noalias() += G.colwise().sum().transpose();
        }
    });
}

Tensor softmax_last(const Tensor& x) {
    check(x.ndim() >= 1, "softmax_last: scalar input");
    const int D = x.shape().back();
    const std::int64_t rows = x.numel() / D;
    OpBuilder ob(x.shape(), {&x});
    const Scalar* px = x.data();
    Scalar* po = ob.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const Scalar* in = px + r * D;
        Scalar* out = po + r * D;
        Scalar m = in[0];
        for (int j = 1; j < D; ++j) m = std::max(m, in[j]);
        Scalar z = 0;
        for (int j = 0; j < D; ++j) {
            out[j] = std::exp(in[j] - m);
            z += out[j];
        }
        const Scalar inv = Scalar(1) / z;
        for (int j = 0; j < D; ++j) out[j] *= inv;
    }
    return ob.done([rows, D](detail::Node& self) {
        const Scalar* g = self.grad.data();
        const Scalar* y = self.value.data();
        if (Scalar* gx = parent_grad(self, 0)) {
            for (std::int64_t r = 0; r < rows; ++r) {
                const Scalar* gr = g + r * D;
                const Scalar* yr = y + r * D;
                Scalar dot = 0;
                for (int j = 0; j < D; ++j) dot += gr[j] * yr[j];
                Scalar* gxr = gx + r * D;
                for (int j = 0; j < D; ++j) gxr[j] += yr[j] * (gr[j] - dot);
            }
        }
    });
}

bool all_finite(const Tensor& t) {
    const Scalar* p = t.data();
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) return false;
    }
    return true;
}

}  // namespace pmtl
