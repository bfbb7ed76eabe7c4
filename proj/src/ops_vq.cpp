#include <cmath>
#include <limits>
#include <vector>

#include "op_utils.hpp"
#include "pmtl/ops.hpp"

namespace pmtl {

using detail::CMatMap;
using detail::EMat;
using detail::MatMap;
using detail::OpBuilder;
using detail::parent_grad;
using detail::parent_value;

Tensor quantize_st(const Tensor& x, const Tensor& codebook, IntTensor& indices_out) {
    check(x.ndim() == 4, "quantize_st: input must be [B,C,h,w]");
    check(codebook.ndim() == 2, "quantize_st: codebook must be [K,C]");
    const int B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int K = codebook.dim(0);
    check(K >= 1, "quantize_st: empty codebook");
    check(codebook.dim(1) == C, "quantize_st: slot dimension " + std::to_string(codebook.dim(1)) +
                                    " != feature channels " + std::to_string(C));
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t n_pos = static_cast<std::int64_t>(B) * hw;

    // Gather spatial elements into rows so the distance search is one GEMM:
    // argmin_k ||x - z_k||^2 = argmin_k (||z_k||^2 - 2 x.z_k).
    EMat rows(n_pos, C);
    const Scalar* px = x.data();
    for (int b = 0; b < B; ++b) {
        for (std::int64_t p = 0; p < hw; ++p) {
            Scalar* dst = rows.data() + (b * hw + p) * C;
            for (int c = 0; c < C; ++c) dst[c] = px[(static_cast<std::int64_t>(b) * C + c) * hw + p];
        }
    }
    CMatMap Z(codebook.data(), K, C);
    std::vector<Scalar> zn2(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) zn2[static_cast<std::size_t>(k)] = Z.row(k).squaredNorm();
    EMat dots(n_pos, K);
    dots.noalias() = rows * Z.transpose();

    indices_out = IntTensor({B, h, w});
    OpBuilder ob(x.shape(), {&x});  // codebook is intentionally not a parent
    Scalar* po = ob.data();
    for (std::int64_t n = 0; n < n_pos; ++n) {
        int best = 0;
        Scalar best_score = zn2[0] - 2 * dots(n, 0);
        for (int k = 1; k < K; ++k) {
            const Scalar score = zn2[static_cast<std::size_t>(k)] - 2 * dots(n, k);
            if (score < best_score) {  // strict: ties keep the lowest index
                best_score = score;
                best = k;
            }
        }
        indices_out.data[static_cast<std::size_t>(n)] = best;
        const int b = static_cast<int>(n / hw);
        const std::int64_t p = n % hw;
        const Scalar* slot = codebook.data() + static_cast<std::int64_t>(best) * C;
        for (int c = 0; c < C; ++c) {
            po[(static_cast<std::int64_t>(b) * C + c) * hw + p] = slot[c];
        }
    }
    const std::int64_t n = x.numel();
    return ob.done([n](detail::Node& self) {
        // Straight-through: the quantizer behaves as identity in backward.
        const Scalar* g = self.grad.data();
        if (Scalar* gx = parent_grad(self, 0)) {
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
        }
    });
}

Tensor vq_aux_loss(const Tensor& x, const Tensor& codebook, const IntTensor& indices,
                   Scalar beta) {
    check(x.ndim() == 4, "vq_aux_loss: input must be [B,C,h,w]");
    const int B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
    check(indices.shape == Shape({B, h, w}), "vq_aux_loss: indices shape mismatch");
    const int K = codebook.dim(0);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    const std::int64_t n_elems = x.numel();

    Scalar sq = 0;
    const Scalar* px = x.data();
    const Scalar* pz = codebook.data();
    for (int b = 0; b < B; ++b) {
        for (std::int64_t p = 0; p < hw; ++p) {
            const int k = indices.data[static_cast<std::size_t>(b * hw + p)];
            check(k >= 0 && k < K, "vq_aux_loss: slot index out of range");
            const Scalar* slot = pz + static_cast<std::int64_t>(k) * C;
            for (int c = 0; c < C; ++c) {
                const Scalar d = px[(static_cast<std::int64_t>(b) * C + c) * hw + p] - slot[c];
                sq += d * d;
            }
        }
    }
    OpBuilder ob({1}, {&x, &codebook});
    ob.data()[0] = (1 + beta) * sq / static_cast<Scalar>(n_elems);
    return ob.done([B, C, hw, n_elems, beta, idx = indices.data](detail::Node& self) {
        const Scalar g = self.grad[0];
        const std::vector<Scalar>& xv = parent_value(self, 0);
        const std::vector<Scalar>& zv = parent_value(self, 1);
        Scalar* gx = parent_grad(self, 0);
        Scalar* gz = parent_grad(self, 1);
        const Scalar kz = 2 * g / static_cast<Scalar>(n_elems);         // codebook pull
        const Scalar kx = 2 * beta * g / static_cast<Scalar>(n_elems);  // commitment
        for (int b = 0; b < B; ++b) {
            for (std::int64_t p = 0; p < hw; ++p) {
                const int k = idx[static_cast<std::size_t>(b * hw + p)];
                const Scalar* slot = zv.data() + static_cast<std::int64_t>(k) * C;
                for (int c = 0; c < C; ++c) {
                    const std::int64_t xi = (static_cast<std::int64_t>(b) * C + c) * hw + p;
                    const Scalar d = xv[static_cast<std::size_t>(xi)] - slot[c];
                    if (gz) gz[static_cast<std::int64_t>(k) * C + c] += kz * (-d);
                    if (gx) gx[xi] += kx * d;
                }
            }
        }
    });
}

Tensor cosine_to_slots(const Tensor& x, const Tensor& slots, Scalar eps) {
    check(x.ndim() == 3, "cosine_to_slots: tokens must be [B,P,D]");
    check(slots.ndim() == 2, "cosine_to_slots: slots must be [T,D]");
    const int B = x.dim(0), P = x.dim(1), D = x.dim(2);
    const int T = slots.dim(0);
    check(slots.dim(1) == D, "cosine_to_slots: dim mismatch, tokens D=" + std::to_string(D) +
                                 " slots D=" + std::to_string(slots.dim(1)));
    const std::int64_t n = static_cast<std::int64_t>(B) * P;

    CMatMap X(x.data(), n, D);
    CMatMap V(slots.data(), T, D);
    std::vector<Scalar> xn(static_cast<std::size_t>(n)), vn(static_cast<std::size_t>(T));
    std::vector<std::uint8_t> x_floored(static_cast<std::size_t>(n)),
        v_floored(static_cast<std::size_t>(T));
    for (std::int64_t i = 0; i < n; ++i) {
        const Scalar nm = X.row(i).norm();
        x_floored[static_cast<std::size_t>(i)] = nm < eps;
        xn[static_cast<std::size_t>(i)] = std::max(nm, eps);
    }
    for (int t = 0; t < T; ++t) {
        const Scalar nm = V.row(t).norm();
        v_floored[static_cast<std::size_t>(t)] = nm < eps;
        vn[static_cast<std::size_t>(t)] = std::max(nm, eps);
    }

    OpBuilder ob({B, P, T}, {&x, &slots});
    MatMap S(ob.data(), n, T);
    S.noalias() = X * V.transpose();
    for (std::int64_t i = 0; i < n; ++i) {
        for (int t = 0; t < T; ++t) {
            S(i, t) /= xn[static_cast<std::size_t>(i)] * vn[static_cast<std::size_t>(t)];
        }
    }
    return ob.done([n, D, T, xn = std::move(xn), vn = std::move(vn),
                    x_floored = std::move(x_floored),
                    v_floored = std::move(v_floored)](detail::Node& self) {
        CMatMap G(self.grad.data(), n, T);
        CMatMap S(self.value.data(), n, T);
        CMatMap X(parent_value(self, 0).data(), n, D);
        CMatMap V(parent_value(self, 1).data(), T, D);
        Scalar* gx = parent_grad(self, 0);
        Scalar* gv = parent_grad(self, 1);
        // dS/dx = v/(|x||v|) - S x/|x|^2 ; the second term vanishes when the
        // norm sits at the floor (the floored norm is constant there).
        if (gx) {
            EMat Gn = G;  // G with columns scaled by 1/vn
            for (int t = 0; t < T; ++t) Gn.col(t) /= vn[static_cast<std::size_t>(t)];
            MatMap GX(gx, n, D);
            EMat term1 = Gn * V;
            for (std::int64_t i = 0; i < n; ++i) {
                const Scalar inv_xn = Scalar(1) / xn[static_cast<std::size_t>(i)];
                GX.row(i) += term1.row(i) * inv_xn;
                if (!x_floored[static_cast<std::size_t>(i)]) {
                    const Scalar q = G.row(i).cwiseProduct(S.row(i)).sum();
                    GX.row(i) -= X.row(i) * (q * inv_xn * inv_xn);
                }
            }
        }
        if (gv) {
            EMat Gn = G;  // G with rows scaled by 1/xn
            for (std::int64_t i = 0; i < n; ++i) Gn.row(i) /= xn[static_cast<std::size_t>(i)];
            MatMap GV(gv, T, D);
            EMat term1 = Gn.transpose() * X;
            for (int t = 0; t < T; ++t) {
                const Scalar inv_vn = Scalar(1) / vn[static_cast<std::size_t>(t)];
                GV.row(t) += term1.row(t) * inv_vn;
                if (!v_floored[static_cast<std::size_t>(t)]) {
                    const Scalar q = G.col(t).cwiseProduct(S.col(t)).sum();
                    GV.row(t) -= V.row(t) * (q * inv_vn * inv_vn);
                }
            }
        }
    });
}

}  // namespace pmtl
