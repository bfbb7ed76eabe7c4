#include <cmath>
#include <vector>

#include "op_utils.hpp"
#include "pmtl/ops.hpp"

namespace pmtl {

using detail::CStridedMap;
using detail::EMat;
using detail::OpBuilder;
using detail::OuterStride;
using detail::parent_grad;
using detail::parent_value;
using detail::StridedMap;

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                           AttnCapture* capture) {
    check(q.ndim() == 3 && k.ndim() == 3 && v.ndim() == 3,
          "multihead_attention: q/k/v must be [B,P,D]/[B,S,D]/[B,S,D]");
    const int B = q.dim(0), P = q.dim(1), D = q.dim(2);
    const int S = k.dim(1);
    check(k.dim(0) == B && v.dim(0) == B, "multihead_attention: batch mismatch");
    check(k.dim(2) == D && v.dim(2) == D, "multihead_attention: feature dim mismatch");
    check(v.dim(1) == S, "multihead_attention: key/value length mismatch");
    check(n_heads >= 1 && D % n_heads == 0,
          "multihead_attention: D=" + std::to_string(D) + " not divisible by heads=" +
              std::to_string(n_heads));
    const int dh = D / n_heads;
    const Scalar scl = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

    OpBuilder ob({B, P, D}, {&q, &k, &v});
    // Post-softmax weights, saved for backward (and optional capture).
    std::vector<Scalar> attn(static_cast<std::size_t>(B) * n_heads * P * S);
    for (int b = 0; b < B; ++b) {
        for (int hh = 0; hh < n_heads; ++hh) {
            CStridedMap Qh(q.data() + (static_cast<std::int64_t>(b) * P) * D + hh * dh, P, dh,
                           OuterStride(D));
            CStridedMap Kh(k.data() + (static_cast<std::int64_t>(b) * S) * D + hh * dh, S, dh,
                           OuterStride(D));
            CStridedMap Vh(v.data() + (static_cast<std::int64_t>(b) * S) * D + hh * dh, S, dh,
                           OuterStride(D));
            detail::MatMap Wm(attn.data() + (static_cast<std::int64_t>(b) * n_heads + hh) *
                                                (static_cast<std::int64_t>(P) * S),
                              P, S);
            Wm.noalias() = Qh * Kh.transpose() * scl;
            for (int r = 0; r < P; ++r) {
                Scalar* row = Wm.data() + static_cast<std::int64_t>(r) * S;
                Scalar m = row[0];
                for (int j = 1; j < S; ++j) m = std::max(m, row[j]);
                Scalar z = 0;
                for (int j = 0; j < S; ++j) {
                    row[j] = std::exp(row[j] - m);
                    z += row[j];
                }
                const Scalar inv = Scalar(1) / z;
                for (int j = 0; j < S; ++j) row[j] *= inv;
            }
            StridedMap Oh(ob.data() + (static_cast<std::int64_t>(b) * P) * D + hh * dh, P, dh,
                          OuterStride(D));
            Oh.noalias() = Wm * Vh;
        }
    }
    if (capture != nullptr) {
        capture->shape = {B, n_heads, P, S};
        capture->weights = attn;
    }
    return ob.done([B, P, S, D, n_heads, dh, scl, attn = std::move(attn)](detail::Node& self) {
        const std::vector<Scalar>& qv = parent_value(self, 0);
        const std::vector<Scalar>& kv = parent_value(self, 1);
        const std::vector<Scalar>& vv = parent_value(self, 2);
        Scalar* gq = parent_grad(self, 0);
        Scalar* gk = parent_grad(self, 1);
        Scalar* gv = parent_grad(self, 2);
        EMat dW(P, S), dScores(P, S);
        for (int b = 0; b < B; ++b) {
            for (int hh = 0; hh < n_heads; ++hh) {
                const std::int64_t qoff = (static_cast<std::int64_t>(b) * P) * D + hh * dh;
                const std::int64_t koff = (static_cast<std::int64_t>(b) * S) * D + hh * dh;
                CStridedMap Qh(qv.data() + qoff, P, dh, OuterStride(D));
                CStridedMap Kh(kv.data() + koff, S, dh, OuterStride(D));
                CStridedMap Vh(vv.data() + koff, S, dh, OuterStride(D));
                detail::CMatMap Wm(attn.data() + (static_cast<std::int64_t>(b) * n_heads + hh) *
                                                     (static_cast<std::int64_t>(P) * S),
                                   P, S);
                CStridedMap Gh(self.grad.data() + qoff, P, dh, OuterStride(D));

                dW.noalias() = Gh * Vh.transpose();
                // Softmax backward per row.
                for (int r = 0; r < P; ++r) {
                    const Scalar dot = dW.row(r).cwiseProduct(Wm.row(r)).sum();
                    dScores.row(r) = Wm.row(r).cwiseProduct(dW.row(r).array().matrix() -
                                                            EMat::Constant(1, S, dot));
                }
                if (gv) {
                    StridedMap GVh(gv + koff, S, dh, OuterStride(D));
                    GVh.noalias() += Wm.transpose() * Gh;
                }
                if (gq) {
                    StridedMap GQh(gq + qoff, P, dh, OuterStride(D));
                    GQh.noalias() += dScores * Kh * scl;
                }
                if (gk) {
                    StridedMap GKh(gk + koff, S, dh, OuterStride(D));
                    GKh.noalias() += dScores.transpose() * Qh * scl;
                }
            }
        }
    });
}

}  // namespace pmtl
